#include "crowdtree/baselines.hpp"

#include "crowdtree/checkpoint.hpp"
#include "crowdtree/parallel.hpp"
#include "crowdtree/random.hpp"
#include "crowdtree/stagnation.hpp"

#include <json.hpp>

#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace crowdtree {

namespace {

template <typename Model>
Var moe_forward_impl(Tape& tape, Model& model, Var x, const PatchSpec& spec) {
  if (model.experts.size() < 2) throw std::invalid_argument("moe: need at least 2 experts");
  std::vector<Var> maps;
  for (auto& e : model.experts) maps.push_back(crop_roi(regressor_forward(tape, e.params, x), spec));
  Var rois = crop(x, spec.roi_offset_y(), spec.roi_offset_x(), spec.roi_h, spec.roi_w);
  Var gate = softmax(classifier_logits(tape, model.gate.params, rois));
  return mix(maps, gate);
}

std::string expert_dir(std::size_t k) { return "expert_" + std::to_string(k); }

}  // namespace

MoEModel MoEModel::from_base(const RegressorNet& base, std::size_t k, std::uint64_t seed) {
  if (k < 2) throw std::invalid_argument("moe: need at least 2 experts, got " + std::to_string(k));
  MoEModel m;
  m.experts.assign(k, base);
  for (auto& e : m.experts) {
    e.params.zero_grad();
    e.params.reset_velocity();
  }
  m.gate = ClassifierNet::initialize(k, derive_seed(seed, "gate"));
  return m;
}

Var moe_forward(Tape& tape, MoEModel& model, Var patches, const PatchSpec& spec) {
  return moe_forward_impl(tape, model, patches, spec);
}
Var moe_forward(Tape& tape, const MoEModel& model, Var patches, const PatchSpec& spec) {
  return moe_forward_impl(tape, model, patches, spec);
}

DensityMap moe_predict(const MoEModel& model, const Image& patch, const PatchSpec& spec) {
  Tape tape(false);
  const Image* p = &patch;
  Var out = moe_forward(tape, model, tape.constant(image_batch(std::span<const Image* const>(&p, 1))), spec);
  return tensor_to_grid(out.value().reshaped({spec.roi_h / kDownscale, spec.roi_w / kDownscale}));
}

std::vector<double> moe_gate(const MoEModel& model, const Image& patch, const PatchSpec& spec) {
  return classify_probabilities(model.gate, roi_pixels(patch, spec));
}

double moe_patch_mae(const MoEModel& model, std::span<const SampledPatch> patches, const PatchSpec& spec) {
  if (patches.empty()) throw std::invalid_argument("moe_patch_mae: empty patch set");
  std::vector<double> err(patches.size());
  parallel_for(patches.size(), [&](std::size_t i) {
    err[i] = std::abs(moe_predict(model, patches[i].patch.pixels, spec).sum() - patches[i].patch.count);
  });
  double total = 0.0;
  for (double e : err) total += e;
  return total / static_cast<double>(patches.size());
}

void MoEConfig::validate() const {
  optim.validate();
  if (experts < 2) throw std::invalid_argument("moe.experts must be >= 2");
  if (batch_size < 1 || eval_every < 1 || patience < 1) {
    throw std::invalid_argument("moe.batch_size, eval_every and patience must be >= 1");
  }
}

MoETrainResult train_moe(const RegressorNet& base, std::span<const SampledPatch> train,
                         std::span<const SampledPatch> val, const PatchSpec& spec, const MoEConfig& cfg,
                         const ProgressFn& progress) {
  cfg.validate();
  if (train.empty()) throw std::invalid_argument("train_moe: empty training set");
  if (val.empty()) val = train;
  MoEModel model = MoEModel::from_base(base, cfg.experts, cfg.seed);

  MoETrainResult result;
  result.model = model;
  result.best_val_mae = moe_patch_mae(model, val, spec);
  result.curve.push_back({0, 0.0, result.best_val_mae});
  Stagnation stagnation(cfg.patience);
  stagnation.observe(result.best_val_mae);

  Rng rng(derive_seed(cfg.seed, "moe"));
  double loss_sum = 0.0;
  std::size_t loss_n = 0;
  std::vector<const Image*> images(cfg.batch_size), gts(cfg.batch_size);
  for (std::size_t step = 1; step <= cfg.max_steps; ++step) {
    for (std::size_t b = 0; b < cfg.batch_size; ++b) {
      const auto& p = train[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(train.size()) - 1))];
      images[b] = &p.patch.pixels;
      gts[b] = &p.patch.roi_gt;
    }
    Tape tape;
    Var x = tape.constant(image_batch(images));
    Var loss = l2_loss(moe_forward(tape, model, x, spec), image_batch(gts));
    const double value = loss.value()[0];
    if (!std::isfinite(value)) {
      std::ostringstream os;
      os << "train_moe: loss diverged at step " << step << " (lr " << cfg.optim.learning_rate << ")";
      throw std::runtime_error(os.str());
    }
    tape.backward(loss);
    for (auto& e : model.experts) sgd_step(e.params, cfg.optim);
    sgd_step(model.gate.params, cfg.optim);
    loss_sum += value;
    ++loss_n;
    if (step % cfg.eval_every == 0 || step == cfg.max_steps) {
      const double val_mae = moe_patch_mae(model, val, spec);
      result.curve.push_back({step, loss_sum / static_cast<double>(loss_n), val_mae});
      loss_sum = 0.0;
      loss_n = 0;
      const bool best = stagnation.observe(val_mae);
      if (best) {
        result.model = model;
        result.best_step = step;
        result.best_val_mae = val_mae;
      }
      if (progress) progress("moe step " + std::to_string(step) + ": val mae " + format_double(val_mae) + (best ? " *" : ""));
      if (stagnation.stalled()) break;
    }
  }
  for (auto& e : result.model.experts) {
    e.params.zero_grad();
    e.params.reset_velocity();
  }
  result.model.gate.params.zero_grad();
  result.model.gate.params.reset_velocity();
  return result;
}

void save_moe(const std::filesystem::path& dir, const MoEModel& model, double val_mae) {
  std::vector<std::string> names;
  for (std::size_t k = 0; k < model.experts.size(); ++k) {
    save_regressor(dir / expert_dir(k), model.experts[k], {"moe-joint", 0, val_mae});
    names.push_back(std::to_string(k));
  }
  save_classifier(dir / "gate", model.gate, names, std::nan(""));
  nlohmann::ordered_json m;
  m["method"] = "moe-joint";
  m["experts"] = model.experts.size();
  m["val_mae"] = val_mae;
  write_text(dir / "manifest.json", m.dump(2) + "\n");
}

MoEModel load_moe(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw std::runtime_error("missing MoE manifest " + (dir / "manifest.json").string());
  const auto m = nlohmann::ordered_json::parse(in);
  MoEModel model;
  const auto k = m.at("experts").get<std::size_t>();
  for (std::size_t i = 0; i < k; ++i) model.experts.push_back(load_regressor(dir / expert_dir(i)));
  model.gate = load_classifier(dir / "gate").net;
  return model;
}

NWayResult nway_differential_train(const RegressorNet& base, std::size_t k, std::span<const SampledPatch> train,
                                   std::span<const SampledPatch> val, const PatchSpec& spec, const GrowthConfig& cfg,
                                   const ProgressFn& progress) {
  NWayResult r;
  r.training = differential_train(base, k, train, val, spec, cfg, "", progress);
  std::vector<const RegressorNet*> ptrs;
  for (const auto& e : r.training.experts) ptrs.push_back(&e);
  r.classifier = train_level_classifier(ptrs, train, val, spec, cfg,
                                        derive_seed(cfg.seed, "classifier:nway" + std::to_string(k)));
  return r;
}

void save_nway(const std::filesystem::path& dir, const NWayResult& result) {
  std::vector<std::string> names;
  const auto& experts = result.training.experts;
  for (std::size_t k = 0; k < experts.size(); ++k) {
    save_regressor(dir / expert_dir(k), experts[k], {"nway-differential", result.training.epochs, result.training.best_val_oracle});
    names.push_back(std::to_string(k));
  }
  const auto& net = result.classifier.net;
  if (net.params.size() == 0) {
    nlohmann::ordered_json c;
    c["architecture"] = "constant";
    c["leaf_index"] = net.class_to_leaf.front();
    write_text(dir / "classifier" / "manifest.json", c.dump(2) + "\n");
  } else {
    save_classifier(dir / "classifier", net, names, result.classifier.accuracy);
  }
  std::ostringstream part;
  part << "patch_id,expert\n";
  for (std::size_t i = 0; i < result.training.assignment.size(); ++i) part << i << ',' << result.training.assignment[i] << '\n';
  write_text(dir / "partition.csv", part.str());
  nlohmann::ordered_json m;
  m["method"] = "nway-differential";
  m["experts"] = experts.size();
  m["epochs"] = result.training.epochs;
  m["best_epoch"] = result.training.best_epoch;
  m["initial_oracle"] = result.training.initial_oracle;
  m["final_oracle"] = result.training.final_oracle;
  m["base_mae"] = result.training.parent_mae;
  m["classifier_accuracy"] = result.classifier.accuracy;
  write_text(dir / "manifest.json", m.dump(2) + "\n");
}

LoadedNWay load_nway(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw std::runtime_error("missing N-way manifest " + (dir / "manifest.json").string());
  const auto m = nlohmann::ordered_json::parse(in);
  LoadedNWay out;
  const auto k = m.at("experts").get<std::size_t>();
  for (std::size_t i = 0; i < k; ++i) out.experts.push_back(load_regressor(dir / expert_dir(i)));
  std::ifstream cin(dir / "classifier" / "manifest.json");
  if (!cin) throw std::runtime_error("missing N-way classifier in " + dir.string());
  const auto c = nlohmann::ordered_json::parse(cin);
  if (c.at("architecture") == "constant") {
    out.classifier = ClassifierNet::constant(c.at("leaf_index").get<std::size_t>());
  } else {
    out.classifier = load_classifier(dir / "classifier").net;
  }
  return out;
}

Comparison compare_table(const std::vector<MethodCandidate>& methods) {
  Comparison c;
  for (const auto& m : methods) {
    try {
      MethodRow row = m.evaluate();
      row.method = m.method;
      c.rows.push_back(std::move(row));
    } catch (const std::exception& e) {
      c.omitted.push_back(m.method + ": " + e.what());
    }
  }
  return c;
}

}  // namespace crowdtree
