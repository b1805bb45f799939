#include "crowdtree/tree.hpp"

#include "crowdtree/checkpoint.hpp"
#include "crowdtree/parallel.hpp"
#include "crowdtree/random.hpp"
#include "crowdtree/selection.hpp"
#include "crowdtree/stagnation.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace crowdtree {

namespace {

void note(const ProgressFn& progress, const std::string& msg) {
  if (progress) progress(msg);
}

std::string display(const std::string& address) { return address.empty() ? "root" : address; }

std::vector<double> error_column(const RegressorNet& net, std::span<const SampledPatch> patches, const PatchSpec& spec) {
  std::vector<double> col(patches.size());
  parallel_for(patches.size(), [&](std::size_t i) {
    col[i] = count_error(predict_count(net, patches[i].patch.pixels, spec), patches[i].patch.count);
  });
  return col;
}

ErrorMatrix gather(const std::vector<const std::vector<double>*>& columns, std::size_t rows) {
  ErrorMatrix m(rows, std::vector<double>(columns.size()));
  for (std::size_t k = 0; k < columns.size(); ++k) {
    for (std::size_t i = 0; i < rows; ++i) m[i][k] = (*columns[k])[i];
  }
  return m;
}

ClassifierTrainResult classifier_from_errors(const ErrorMatrix& train_err, const ErrorMatrix& val_err,
                                             std::span<const SampledPatch> train, std::span<const SampledPatch> val,
                                             std::size_t num_leaves, const PatchSpec& spec, const GrowthConfig& cfg,
                                             std::uint64_t seed) {
  auto labeled = make_labeled_rois(train, make_labels(train_err, cfg.tie_epsilon), spec);
  auto val_labeled = make_labeled_rois(val, make_labels(val_err, cfg.tie_epsilon), spec);
  ClassifierTrainConfig tc = cfg.classifier_train;
  tc.seed = seed;
  return train_classifier(labeled, val_labeled, num_leaves, cfg.classifier, tc);
}

nlohmann::ordered_json number(double v) {
  if (std::isfinite(v)) return v;
  return nullptr;
}

double number(const nlohmann::ordered_json& j) {
  return j.is_null() ? std::numeric_limits<double>::quiet_NaN() : j.get<double>();
}

std::string partition_csv(const std::vector<std::size_t>& partition, const std::vector<std::string>& leaves) {
  std::ostringstream os;
  os << "patch_id,leaf_address\n";
  for (std::size_t i = 0; i < partition.size(); ++i) os << i << ',' << display(leaves.at(partition[i])) << '\n';
  return os.str();
}

std::vector<std::size_t> read_partition(const std::filesystem::path& path, const std::vector<std::string>& leaves) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open partition file " + path.string());
  std::string line;
  std::getline(in, line);
  std::vector<std::size_t> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto comma = line.find(',');
    std::string addr = line.substr(comma + 1);
    if (addr == "root") addr.clear();
    const auto it = std::find(leaves.begin(), leaves.end(), addr);
    if (it == leaves.end()) throw std::runtime_error(path.string() + ": unknown leaf '" + addr + "'");
    out.push_back(static_cast<std::size_t>(it - leaves.begin()));
  }
  return out;
}

}  // namespace

void GrowthConfig::validate() const {
  fine_tune.validate();
  classifier.validate();
  loss.validate();
  if (inner_patience < 1) throw std::invalid_argument("growth.inner_patience must be >= 1");
  if (outer_patience < 1) throw std::invalid_argument("growth.outer_patience must be >= 1");
  if (max_epochs < 1) throw std::invalid_argument("growth.max_epochs must be >= 1");
  if (fine_tune_batch < 1) throw std::invalid_argument("growth.fine_tune_batch must be >= 1");
  if (!(tie_epsilon >= 0.0)) throw std::invalid_argument("growth.tie_epsilon must be >= 0");
  if (!(min_split_fraction >= 0.0 && min_split_fraction <= 1.0)) {
    throw std::invalid_argument("growth.min_split_fraction must lie in [0, 1]");
  }
  if (classifier_train.batch_size < 1 || classifier_train.patience < 1) {
    throw std::invalid_argument("growth.classifier_train batch_size and patience must be >= 1");
  }
}

DifferentialResult differential_train(const RegressorNet& parent, std::size_t k, std::span<const SampledPatch> subset,
                                      std::span<const SampledPatch> val_subset, const PatchSpec& spec,
                                      const GrowthConfig& cfg, const std::string& address, const ProgressFn& progress) {
  if (k < 2) throw std::invalid_argument("differential_train: need at least 2 experts, got " + std::to_string(k));
  if (subset.size() < 2) {
    throw std::invalid_argument("differential_train: leaf " + display(address) + " has " +
                                std::to_string(subset.size()) + " patches; at least 2 are required");
  }
  cfg.validate();

  DifferentialResult r;
  r.parent_mae = patch_mae(parent, subset, spec);
  std::vector<RegressorNet> experts(k, parent);
  for (auto& e : experts) {
    e.params.zero_grad();
    e.params.reset_velocity();
  }
  std::vector<const RegressorNet*> ptrs;
  for (const auto& e : experts) ptrs.push_back(&e);

  std::vector<std::size_t> assign, val_assign;
  double train_oracle = 0.0;
  auto evaluate = [&]() {
    const ErrorMatrix e = count_error_matrix(ptrs, subset, spec);
    assign = make_labels(e, cfg.tie_epsilon);
    train_oracle = oracle_mae(e);
    if (val_subset.empty()) {
      val_assign.clear();
      return train_oracle;
    }
    const ErrorMatrix ve = count_error_matrix(ptrs, val_subset, spec);
    val_assign = make_labels(ve, cfg.tie_epsilon);
    return oracle_mae(ve);
  };

  double v = evaluate();
  r.initial_oracle = train_oracle;
  Stagnation stagnation(cfg.inner_patience);
  stagnation.observe(v);
  r.val_curve.push_back(v);
  auto keep = [&](std::size_t epoch) {
    r.experts = experts;
    r.assignment = assign;
    r.val_assignment = val_assign;
    r.final_oracle = train_oracle;
    r.best_val_oracle = v;
    r.best_epoch = epoch;
  };
  keep(0);
  note(progress, "split " + display(address) + " epoch 0: oracle " + format_double(train_oracle) + " val " +
                     format_double(v));

  Rng rng(derive_seed(cfg.seed, "node:" + address));
  std::vector<std::size_t> order(subset.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::vector<const Patch*> batch;
  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    rng.shuffle(order);
    for (std::size_t e = 0; e < k; ++e) {
      batch.clear();
      auto flush = [&]() {
        const double loss = count_step(experts[e], batch, spec, cfg.fine_tune, cfg.loss);
        if (!std::isfinite(loss)) {
          std::ostringstream os;
          os << "differential_train: count loss diverged at leaf " << display(address) << ", expert " << e
             << ", epoch " << epoch << " (lr " << cfg.fine_tune.learning_rate << ")";
          throw std::runtime_error(os.str());
        }
        batch.clear();
      };
      for (std::size_t i : order) {
        if (assign[i] != e) continue;
        batch.push_back(&subset[i].patch);
        if (batch.size() == cfg.fine_tune_batch) flush();
      }
      if (!batch.empty()) flush();
    }
    v = evaluate();
    r.val_curve.push_back(v);
    r.epochs = epoch;
    const bool best = stagnation.observe(v);
    if (best) keep(epoch);
    note(progress, "split " + display(address) + " epoch " + std::to_string(epoch) + ": oracle " +
                       format_double(train_oracle) + " val " + format_double(v) + (best ? " *" : ""));
    if (stagnation.stalled()) break;
  }
  for (auto& e : r.experts) {
    e.params.zero_grad();
    e.params.reset_velocity();
  }
  return r;
}

std::vector<const RegressorNet*> ExpertTree::experts(std::size_t level) const {
  std::vector<const RegressorNet*> out;
  for (const auto& a : levels.at(level).leaves) out.push_back(&nodes.at(a).net);
  return out;
}

double oracle_mae(std::span<const RegressorNet* const> leaves, std::span<const SampledPatch> patches,
                  const PatchSpec& spec) {
  if (leaves.empty()) throw std::invalid_argument("oracle_mae: no leaves");
  return oracle_mae(count_error_matrix(leaves, patches, spec));
}

ClassifierTrainResult train_level_classifier(std::span<const RegressorNet* const> leaves,
                                             std::span<const SampledPatch> train, std::span<const SampledPatch> val,
                                             const PatchSpec& spec, const GrowthConfig& cfg, std::uint64_t seed) {
  return classifier_from_errors(count_error_matrix(leaves, train, spec), count_error_matrix(leaves, val, spec), train,
                                val, leaves.size(), spec, cfg, seed);
}

ExpertTree grow(const RegressorNet& root, std::span<const SampledPatch> train, std::span<const SampledPatch> val,
                const PatchSpec& spec, const GrowthConfig& cfg, const ProgressFn& progress) {
  cfg.validate();
  if (train.size() < 1) throw std::invalid_argument("grow: empty training set");
  if (val.empty()) throw std::invalid_argument("grow: empty validation set");

  ExpertTree tree;
  std::vector<std::size_t> all(train.size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  tree.nodes[""] = {root, all};

  std::map<std::string, std::vector<double>> train_err, val_err;
  auto cache = [&](const std::string& a) {
    if (!train_err.count(a)) {
      train_err[a] = error_column(tree.nodes.at(a).net, train, spec);
      val_err[a] = error_column(tree.nodes.at(a).net, val, spec);
    }
  };
  std::vector<std::string> train_leaf(train.size()), val_leaf(val.size());

  auto report = [&](std::size_t level, const TreeLevel& lv) {
    std::vector<const std::vector<double>*> tcols, vcols;
    for (const auto& a : lv.leaves) {
      cache(a);
      tcols.push_back(&train_err.at(a));
      vcols.push_back(&val_err.at(a));
    }
    const ErrorMatrix te = gather(tcols, train.size());
    const ErrorMatrix ve = gather(vcols, val.size());
    const auto val_labels = make_labels(ve, cfg.tie_epsilon);
    std::vector<std::size_t> routed(val.size());
    parallel_for(val.size(),
                 [&](std::size_t i) { routed[i] = route_leaf(lv.classifier, roi_pixels(val[i].patch.pixels, spec)); });

    LevelReport r;
    r.level = level;
    r.n_experts = lv.leaves.size();
    r.leaves = lv.leaves;
    r.oracle_mae = oracle_mae(ve);
    r.train_oracle_mae = oracle_mae(te);
    double total = 0.0;
    std::size_t correct = 0;
    std::vector<double> val_counts(val.size());
    for (std::size_t i = 0; i < val.size(); ++i) {
      total += ve[i][routed[i]];
      correct += routed[i] == val_labels[i] ? 1 : 0;
      val_counts[i] = val[i].patch.count;
    }
    r.actual_mae = total / static_cast<double>(val.size());
    r.classifier_accuracy = 100.0 * static_cast<double>(correct) / static_cast<double>(val.size());
    std::vector<std::size_t> sizes(lv.leaves.size(), 0);
    for (std::size_t p : lv.partition) ++sizes[p];
    for (std::size_t s : sizes) r.shares.push_back(static_cast<double>(s) / static_cast<double>(train.size()));
    r.profile = specialty_profile(routed, val_counts, lv.leaves.size());
    r.check();
    return r;
  };

  TreeLevel level0;
  level0.leaves = {""};
  level0.partition.assign(train.size(), 0);
  level0.labels.assign(train.size(), 0);
  level0.classifier = ClassifierNet::constant(0);
  tree.reports.push_back(report(0, level0));
  tree.levels.push_back(std::move(level0));
  note(progress, "level 0: val mae " + format_double(tree.reports.back().actual_mae));

  Stagnation stagnation(cfg.outer_patience);
  stagnation.observe(tree.reports.back().actual_mae);

  for (std::size_t level = 1; level <= cfg.max_tree_depth; ++level) {
    std::vector<std::string> next;
    bool split_any = false;
    for (const auto& a : tree.levels.back().leaves) {
      std::vector<std::size_t> ids, vids;
      for (std::size_t i = 0; i < train.size(); ++i) {
        if (train_leaf[i] == a) ids.push_back(i);
      }
      for (std::size_t i = 0; i < val.size(); ++i) {
        if (val_leaf[i] == a) vids.push_back(i);
      }
      const double share = static_cast<double>(ids.size()) / static_cast<double>(train.size());
      if (ids.size() < 2 || share < cfg.min_split_fraction) {
        note(progress, "leaf " + display(a) + " not split (" + std::to_string(ids.size()) + " patches, share " +
                           format_double(share) + ")");
        next.push_back(a);
        continue;
      }
      std::vector<SampledPatch> sub, vsub;
      for (std::size_t i : ids) sub.push_back(train[i]);
      for (std::size_t i : vids) vsub.push_back(val[i]);
      DifferentialResult res = differential_train(tree.nodes.at(a).net, 2, sub, vsub, spec, cfg, a, progress);
      for (std::size_t c = 0; c < 2; ++c) {
        const std::string child = a + static_cast<char>('0' + c);
        TreeNode node{std::move(res.experts[c]), {}};
        for (std::size_t j = 0; j < ids.size(); ++j) {
          if (res.assignment[j] == c) node.subset.push_back(ids[j]);
        }
        tree.nodes[child] = std::move(node);
        next.push_back(child);
      }
      for (std::size_t j = 0; j < ids.size(); ++j) train_leaf[ids[j]] = a + static_cast<char>('0' + res.assignment[j]);
      for (std::size_t j = 0; j < vids.size(); ++j) {
        val_leaf[vids[j]] = a + static_cast<char>('0' + res.val_assignment[j]);
      }
      tree.splits.push_back({level, a, ids.size(), res.parent_mae, res.initial_oracle, res.final_oracle,
                             res.best_val_oracle, res.epochs});
      split_any = true;
    }
    if (!split_any) {
      note(progress, "level " + std::to_string(level) + ": no eligible leaf; growth stops");
      break;
    }
    std::sort(next.begin(), next.end());

    TreeLevel lv;
    lv.leaves = next;
    for (std::size_t i = 0; i < train.size(); ++i) {
      lv.partition.push_back(static_cast<std::size_t>(
          std::find(next.begin(), next.end(), train_leaf[i]) - next.begin()));
    }
    std::vector<const std::vector<double>*> tcols, vcols;
    for (const auto& a : next) {
      cache(a);
      tcols.push_back(&train_err.at(a));
      vcols.push_back(&val_err.at(a));
    }
    const ErrorMatrix te = gather(tcols, train.size());
    const ErrorMatrix ve = gather(vcols, val.size());
    lv.labels = make_labels(te, cfg.tie_epsilon);
    auto trained = classifier_from_errors(te, ve, train, val, next.size(), spec, cfg,
                                          derive_seed(cfg.seed, "classifier:level" + std::to_string(level)));
    for (const auto& w : trained.warnings) note(progress, "level " + std::to_string(level) + ": " + w);
    lv.classifier = std::move(trained.net);

    tree.reports.push_back(report(level, lv));
    tree.levels.push_back(std::move(lv));
    const auto& r = tree.reports.back();
    note(progress, "level " + std::to_string(level) + ": " + std::to_string(r.n_experts) + " experts, oracle " +
                       format_double(r.oracle_mae) + " actual " + format_double(r.actual_mae) + " accuracy " +
                       format_double(r.classifier_accuracy) + " train oracle " + format_double(r.train_oracle_mae));
    if (stagnation.observe(r.actual_mae)) tree.best_level = level;
    if (stagnation.stalled()) {
      note(progress, "validation actual MAE stagnated; growth stops");
      break;
    }
  }
  return tree;
}

std::string node_dirname(const std::string& address) { return address.empty() ? "root" : address; }

void save_tree(const std::filesystem::path& dir, const ExpertTree& tree, std::span<const SampledPatch> train) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  nlohmann::ordered_json nodes = nlohmann::ordered_json::array();
  for (const auto& [address, node] : tree.nodes) {
    save_regressor(dir / "nodes" / node_dirname(address), node.net, {"crowdtree-node", 0, 0.0});
    std::ostringstream subset;
    subset << "patch_id\n";
    for (std::size_t i : node.subset) subset << i << '\n';
    write_text(dir / "nodes" / node_dirname(address) / "subset.csv", subset.str());
    nodes.push_back({{"address", address}, {"subset_size", node.subset.size()}});
  }
  nlohmann::ordered_json levels = nlohmann::ordered_json::array();
  for (std::size_t l = 0; l < tree.levels.size(); ++l) {
    const auto& lv = tree.levels[l];
    const auto cdir = dir / "classifiers" / ("level_" + std::to_string(l));
    if (lv.classifier.num_classes == 1 && lv.classifier.params.size() == 0) {
      nlohmann::ordered_json m;
      m["architecture"] = "constant";
      m["leaf_addresses"] = lv.leaves;
      m["leaf_index"] = lv.classifier.class_to_leaf.front();
      write_text(cdir / "manifest.json", m.dump(2) + "\n");
    } else {
      save_classifier(cdir, lv.classifier, lv.leaves, tree.reports.at(l).classifier_accuracy);
    }
    write_text(dir / ("partition_level_" + std::to_string(l) + ".csv"), partition_csv(lv.partition, lv.leaves));
    levels.push_back({{"level", l}, {"leaves", lv.leaves}});
  }
  if (train.size() != tree.levels.back().partition.size()) {
    throw std::invalid_argument("save_tree: training set does not match the tree partition");
  }
  write_text(dir / "partition.csv",
             partition_csv(tree.levels.at(tree.best_level).partition, tree.levels.at(tree.best_level).leaves));

  nlohmann::ordered_json reports = nlohmann::ordered_json::array();
  for (const auto& r : tree.reports) {
    nlohmann::ordered_json profile = nlohmann::ordered_json::array();
    for (const auto& p : r.profile) {
      profile.push_back(
          {{"n", p.n}, {"mean", number(p.mean)}, {"std", number(p.std)}, {"share", p.share}, {"empty", p.empty}});
    }
    reports.push_back({{"level", r.level},
                       {"n_experts", r.n_experts},
                       {"oracle_mae", r.oracle_mae},
                       {"actual_mae", r.actual_mae},
                       {"classifier_accuracy", r.classifier_accuracy},
                       {"train_oracle_mae", r.train_oracle_mae},
                       {"leaves", r.leaves},
                       {"shares", r.shares},
                       {"val_profile", profile}});
  }
  write_text(dir / "reports.json", reports.dump(2) + "\n");
  write_text(dir / "table4.csv", table4_csv(tree.reports));

  std::ostringstream splits;
  splits << "level,address,subset_size,parent_mae,initial_oracle,final_oracle,best_val_oracle,epochs\n";
  for (const auto& s : tree.splits) {
    splits << s.level << ',' << display(s.address) << ',' << s.subset_size << ',' << format_double(s.parent_mae)
           << ',' << format_double(s.initial_oracle) << ',' << format_double(s.final_oracle) << ','
           << format_double(s.best_val_oracle) << ',' << s.epochs << '\n';
  }
  write_text(dir / "splits.csv", splits.str());

  nlohmann::ordered_json meta;
  meta["best_level"] = tree.best_level;
  meta["levels"] = levels;
  meta["nodes"] = nodes;
  write_text(dir / "tree.json", meta.dump(2) + "\n");
}

ExpertTree load_tree(const std::filesystem::path& dir) {
  std::ifstream in(dir / "tree.json");
  if (!in) throw std::runtime_error("missing tree manifest " + (dir / "tree.json").string());
  const auto meta = nlohmann::ordered_json::parse(in);
  ExpertTree tree;
  tree.best_level = meta.at("best_level").get<std::size_t>();
  for (const auto& n : meta.at("nodes")) {
    const auto address = n.at("address").get<std::string>();
    TreeNode node{load_regressor(dir / "nodes" / node_dirname(address)), {}};
    std::ifstream subset(dir / "nodes" / node_dirname(address) / "subset.csv");
    std::string line;
    std::getline(subset, line);
    while (std::getline(subset, line)) {
      if (!line.empty()) node.subset.push_back(std::stoul(line));
    }
    tree.nodes[address] = std::move(node);
  }
  for (const auto& lj : meta.at("levels")) {
    const auto l = lj.at("level").get<std::size_t>();
    TreeLevel lv;
    lv.leaves = lj.at("leaves").get<std::vector<std::string>>();
    for (const auto& a : lv.leaves) {
      if (!tree.nodes.count(a)) throw std::runtime_error("tree: level " + std::to_string(l) + " lists unknown leaf");
    }
    const auto cdir = dir / "classifiers" / ("level_" + std::to_string(l));
    std::ifstream cm(cdir / "manifest.json");
    if (!cm) throw std::runtime_error("missing classifier manifest " + (cdir / "manifest.json").string());
    const auto cj = nlohmann::ordered_json::parse(cm);
    if (cj.at("architecture") == "constant") {
      lv.classifier = ClassifierNet::constant(cj.at("leaf_index").get<std::size_t>());
    } else {
      lv.classifier = load_classifier(cdir).net;
    }
    lv.partition = read_partition(dir / ("partition_level_" + std::to_string(l) + ".csv"), lv.leaves);
    tree.levels.push_back(std::move(lv));
  }
  std::ifstream rin(dir / "reports.json");
  if (!rin) throw std::runtime_error("missing reports " + (dir / "reports.json").string());
  for (const auto& rj : nlohmann::ordered_json::parse(rin)) {
    LevelReport r;
    r.level = rj.at("level").get<std::size_t>();
    r.n_experts = rj.at("n_experts").get<std::size_t>();
    r.oracle_mae = rj.at("oracle_mae").get<double>();
    r.actual_mae = rj.at("actual_mae").get<double>();
    r.classifier_accuracy = rj.at("classifier_accuracy").get<double>();
    r.train_oracle_mae = rj.at("train_oracle_mae").get<double>();
    r.leaves = rj.at("leaves").get<std::vector<std::string>>();
    r.shares = rj.at("shares").get<std::vector<double>>();
    for (const auto& p : rj.at("val_profile")) {
      r.profile.push_back({number(p.at("mean")), number(p.at("std")), p.at("share").get<double>(),
                           p.at("n").get<std::size_t>(), p.at("empty").get<bool>()});
    }
    tree.reports.push_back(std::move(r));
  }
  return tree;
}

}  // namespace crowdtree
