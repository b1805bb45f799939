#include "crowdtree/pipeline.hpp"

#include "crowdtree/checkpoint.hpp"
#include "crowdtree/evaluate.hpp"
#include "crowdtree/parallel.hpp"
#include "crowdtree/random.hpp"

#include <algorithm>
#include <cctype>
#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>
#include <type_traits>

extern char** environ;

namespace crowdtree {

namespace fs = std::filesystem;
using Json = nlohmann::ordered_json;

namespace {

/// Strict reader over one JSON object: unknown keys are rejected on finish().
class Section {
 public:
  Section(Json j, std::string path) : j_(std::move(j)), path_(std::move(path)) {
    if (!j_.is_object()) throw std::invalid_argument("config key '" + path_ + "': expected an object");
  }

  template <typename T>
  void get(const std::string& key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    const Json& v = j_.at(key);
    if constexpr (std::is_integral_v<T> && std::is_unsigned_v<T> && !std::is_same_v<T, bool>) {
      if (!v.is_number_unsigned()) throw std::invalid_argument("config key '" + full(key) + "': expected a non-negative integer");
    }
    if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) throw std::invalid_argument("config key '" + full(key) + "': expected a number");
    }
    try {
      out = v.get<T>();
    } catch (const nlohmann::json::exception& e) {
      throw std::invalid_argument("config key '" + full(key) + "': " + e.what());
    }
  }

  Section sub(const std::string& key) {
    seen_.insert(key);
    return Section(j_.contains(key) ? j_.at(key) : Json::object(), full(key));
  }

  const Json* raw(const std::string& key) {
    seen_.insert(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }

  void finish() const {
    for (const auto& [k, v] : j_.items()) {
      if (!seen_.count(k)) throw std::invalid_argument("unknown config key '" + full(k) + "'");
    }
  }

  std::string full(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

 private:
  Json j_;
  std::string path_;
  std::set<std::string> seen_;
};

Json optim_json(const OptimConfig& o) {
  return {{"learning_rate", o.learning_rate}, {"momentum", o.momentum}, {"weight_decay", o.weight_decay}};
}

void read_optim(Section s, OptimConfig& o) {
  s.get("learning_rate", o.learning_rate);
  s.get("momentum", o.momentum);
  s.get("weight_decay", o.weight_decay);
  s.finish();
}

std::string read_text(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + p.string());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

std::string hex(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

fs::path out_dir(const RunConfig& cfg, const std::string& sub) { return fs::path(cfg.out) / sub; }

void require(const RunConfig& cfg, const std::string& stage, const std::string& dep) {
  const auto p = out_dir(cfg, dep) / "stage.json";
  if (!fs::exists(p)) {
    throw std::runtime_error("stage '" + stage + "' requires " + p.string() + "; run the stage that produces '" + dep +
                             "' first");
  }
}

std::string dep_hash(const RunConfig& cfg, const std::string& dep) {
  return hex(fnv1a(read_text(out_dir(cfg, dep) / "stage.json")));
}

void write_stage(const RunConfig& cfg, const std::string& dir, const std::string& stage,
                 const std::vector<std::string>& deps, Json extra = Json::object()) {
  Json m;
  m["stage"] = stage;
  m["seed"] = cfg.seed;
  m["stage_seed"] = derive_seed(cfg.seed, stage);
  m["config_hash"] = config_hash(cfg);
  Json d = Json::object();
  for (const auto& dep : deps) d[dep] = dep_hash(cfg, dep);
  m["dependencies"] = d;
  for (auto& [k, v] : extra.items()) m[k] = v;
  write_text(out_dir(cfg, dir) / "stage.json", m.dump(2) + "\n");
  write_text(fs::path(cfg.out) / "config.json", cfg.to_json().dump(2) + "\n");
}

void say(const Log& log, const std::string& msg) {
  if (log) log(msg);
}

GrowthConfig growth_for(const RunConfig& cfg) {
  GrowthConfig g = cfg.growth;
  g.seed = derive_seed(cfg.seed, "grow");
  return g;
}

struct Loaded {
  LoadedDataset data;
  PatchSets sets;
};

Loaded load_inputs(const RunConfig& cfg) {
  Loaded l{load_dataset(out_dir(cfg, "data")), {}};
  l.sets = make_patch_sets(l.data, cfg);
  return l;
}

std::vector<std::map<std::string, std::string>> read_csv(const fs::path& p) {
  std::istringstream in(read_text(p));
  std::string line;
  std::vector<std::string> header;
  std::vector<std::map<std::string, std::string>> rows;
  auto split = [](const std::string& s) {
    std::vector<std::string> out;
    std::string cell;
    std::istringstream ss(s);
    while (std::getline(ss, cell, ',')) out.push_back(cell);
    if (!s.empty() && s.back() == ',') out.emplace_back();
    return out;
  };
  if (std::getline(in, line)) header = split(line);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto cells = split(line);
    std::map<std::string, std::string> row;
    for (std::size_t i = 0; i < header.size() && i < cells.size(); ++i) row[header[i]] = cells[i];
    rows.push_back(std::move(row));
  }
  return rows;
}

std::vector<double> gt_counts(std::span<const SampledPatch> patches) {
  std::vector<double> c;
  c.reserve(patches.size());
  for (const auto& p : patches) c.push_back(p.patch.count);
  return c;
}

std::vector<const PredictionCache*> cache_ptrs(const std::vector<PredictionCache>& caches) {
  std::vector<const PredictionCache*> p;
  for (const auto& c : caches) p.push_back(&c);
  return p;
}

MethodRow routed_row(const TestSet& test, const std::vector<PredictionCache>& caches,
                     const std::vector<std::size_t>& choices, bool with_oracle) {
  const auto ptrs = cache_ptrs(caches);
  const RoutedEval e = evaluate_choices(test, ptrs, choices);
  MethodRow row;
  if (with_oracle) row.oracle_mae = cached_oracle_mae(test, ptrs);
  row.actual_mae = e.patch_mae;
  row.image_mae = e.image_mae;
  row.image_mse = e.image_mse;
  return row;
}

ClassifierNet load_any_classifier(const fs::path& dir) {
  const auto j = Json::parse(read_text(dir / "manifest.json"));
  if (j.at("architecture") == "constant") return ClassifierNet::constant(j.at("leaf_index").get<std::size_t>());
  return load_classifier(dir).net;
}

void save_any_classifier(const fs::path& dir, const ClassifierNet& net, const std::vector<std::string>& leaves,
                         double accuracy) {
  if (net.params.size() == 0) {
    Json m;
    m["architecture"] = "constant";
    m["leaf_addresses"] = leaves;
    m["leaf_index"] = net.class_to_leaf.front();
    write_text(dir / "manifest.json", m.dump(2) + "\n");
  } else {
    save_classifier(dir, net, leaves, accuracy);
  }
}

std::string leaf_name(const std::string& a) { return a.empty() ? "root" : a; }

}  // namespace

RunConfig::RunConfig() {
  data.regimes = default_regimes();
  growth.classifier.learning_rate = 3e-3;
}

void RunConfig::validate() const {
  data.validate();
  patch.validate();
  regressor.validate();
  growth.validate();
  moe.validate();
  double total = 0.0;
  for (double f : splits) {
    if (!(f >= 0.0)) throw std::invalid_argument("config key 'data.splits': fractions must be >= 0");
    total += f;
  }
  if (std::abs(total - 1.0) > 1e-9) throw std::invalid_argument("config key 'data.splits': fractions must sum to 1");
  if (splits[0] <= 0.0 || splits[1] <= 0.0 || splits[2] <= 0.0) {
    throw std::invalid_argument("config key 'data.splits': train, val and test must all be non-empty");
  }
  if (patches_per_scene == 0) throw std::invalid_argument("config key 'data.patches_per_scene' must be >= 1");
  if (pretrain.batch_size == 0 || pretrain.eval_every == 0 || pretrain.patience == 0) {
    throw std::invalid_argument("config keys 'pretrain.batch_size/eval_every/patience' must be >= 1");
  }
  if (!(pretrain.flip_probability >= 0.0 && pretrain.flip_probability <= 1.0)) {
    throw std::invalid_argument("config key 'pretrain.flip_probability' must lie in [0, 1]");
  }
  if (nway_k < 2) throw std::invalid_argument("config key 'nway.k' must be >= 2");
  if (out.empty()) throw std::invalid_argument("config key 'out' must not be empty");
}

Json RunConfig::to_json() const {
  Json j;
  j["seed"] = seed;
  j["out"] = out;
  Json regimes = Json::array();
  for (const auto& r : data.regimes) {
    regimes.push_back({{"name", r.name},
                       {"count_min", r.count_min},
                       {"count_max", r.count_max},
                       {"radius_min", r.radius_min},
                       {"radius_max", r.radius_max},
                       {"texture_seed_space", r.texture_seed_space}});
  }
  j["data"] = {{"regimes", regimes},
               {"scenes_per_regime", data.scenes_per_regime},
               {"rows", data.rows},
               {"cols", data.cols},
               {"region_rows", data.region_rows},
               {"region_cols", data.region_cols},
               {"sigma", data.sigma},
               {"splits", splits},
               {"patches_per_scene", patches_per_scene}};
  j["patch"] = {{"patch_h", patch.patch_h},
                {"patch_w", patch.patch_w},
                {"roi_h", patch.roi_h},
                {"roi_w", patch.roi_w},
                {"stride", patch.stride}};
  j["regressor"] = optim_json(regressor);
  j["pretrain"] = {{"batch_size", pretrain.batch_size},
                   {"eval_every", pretrain.eval_every},
                   {"patience", pretrain.patience},
                   {"max_steps", pretrain.max_steps},
                   {"flip_probability", pretrain.flip_probability}};
  j["growth"] = {{"max_tree_depth", growth.max_tree_depth},
                 {"fine_tune", optim_json(growth.fine_tune)},
                 {"lambda", growth.loss.lambda},
                 {"fine_tune_batch", growth.fine_tune_batch},
                 {"inner_patience", growth.inner_patience},
                 {"max_epochs", growth.max_epochs},
                 {"outer_patience", growth.outer_patience},
                 {"tie_epsilon", growth.tie_epsilon},
                 {"min_split_fraction", growth.min_split_fraction}};
  j["classifier"] = {{"optim", optim_json(growth.classifier)},
                     {"batch_size", growth.classifier_train.batch_size},
                     {"max_epochs", growth.classifier_train.max_epochs},
                     {"patience", growth.classifier_train.patience}};
  j["moe"] = {{"experts", moe.experts},
              {"batch_size", moe.batch_size},
              {"eval_every", moe.eval_every},
              {"patience", moe.patience},
              {"max_steps", moe.max_steps},
              {"optim", optim_json(moe.optim)}};
  j["nway"] = {{"k", nway_k}};
  return j;
}

RunConfig RunConfig::from_json(const Json& j) {
  RunConfig c;
  Section root(j, "");
  root.get("seed", c.seed);
  root.get("out", c.out);
  {
    Section d = root.sub("data");
    if (const Json* regimes = d.raw("regimes")) {
      if (!regimes->is_array()) throw std::invalid_argument("config key 'data.regimes': expected an array");
      c.data.regimes.clear();
      for (std::size_t i = 0; i < regimes->size(); ++i) {
        Section r((*regimes)[i], "data.regimes." + std::to_string(i));
        RegimeSpec spec;
        r.get("name", spec.name);
        r.get("count_min", spec.count_min);
        r.get("count_max", spec.count_max);
        r.get("radius_min", spec.radius_min);
        r.get("radius_max", spec.radius_max);
        r.get("texture_seed_space", spec.texture_seed_space);
        r.finish();
        c.data.regimes.push_back(spec);
      }
    }
    d.get("scenes_per_regime", c.data.scenes_per_regime);
    d.get("rows", c.data.rows);
    d.get("cols", c.data.cols);
    d.get("region_rows", c.data.region_rows);
    d.get("region_cols", c.data.region_cols);
    d.get("sigma", c.data.sigma);
    d.get("splits", c.splits);
    d.get("patches_per_scene", c.patches_per_scene);
    d.finish();
  }
  {
    Section p = root.sub("patch");
    p.get("patch_h", c.patch.patch_h);
    p.get("patch_w", c.patch.patch_w);
    p.get("roi_h", c.patch.roi_h);
    p.get("roi_w", c.patch.roi_w);
    p.get("stride", c.patch.stride);
    p.finish();
  }
  read_optim(root.sub("regressor"), c.regressor);
  {
    Section p = root.sub("pretrain");
    p.get("batch_size", c.pretrain.batch_size);
    p.get("eval_every", c.pretrain.eval_every);
    p.get("patience", c.pretrain.patience);
    p.get("max_steps", c.pretrain.max_steps);
    p.get("flip_probability", c.pretrain.flip_probability);
    p.finish();
  }
  {
    Section g = root.sub("growth");
    g.get("max_tree_depth", c.growth.max_tree_depth);
    read_optim(g.sub("fine_tune"), c.growth.fine_tune);
    g.get("lambda", c.growth.loss.lambda);
    g.get("fine_tune_batch", c.growth.fine_tune_batch);
    g.get("inner_patience", c.growth.inner_patience);
    g.get("max_epochs", c.growth.max_epochs);
    g.get("outer_patience", c.growth.outer_patience);
    g.get("tie_epsilon", c.growth.tie_epsilon);
    g.get("min_split_fraction", c.growth.min_split_fraction);
    g.finish();
  }
  {
    Section s = root.sub("classifier");
    read_optim(s.sub("optim"), c.growth.classifier);
    s.get("batch_size", c.growth.classifier_train.batch_size);
    s.get("max_epochs", c.growth.classifier_train.max_epochs);
    s.get("patience", c.growth.classifier_train.patience);
    s.finish();
  }
  {
    Section m = root.sub("moe");
    m.get("experts", c.moe.experts);
    m.get("batch_size", c.moe.batch_size);
    m.get("eval_every", c.moe.eval_every);
    m.get("patience", c.moe.patience);
    m.get("max_steps", c.moe.max_steps);
    read_optim(m.sub("optim"), c.moe.optim);
    m.finish();
  }
  {
    Section n = root.sub("nway");
    n.get("k", c.nway_k);
    n.finish();
  }
  root.finish();
  c.validate();
  return c;
}

void set_config_key(Json& j, const std::string& dotted, const std::string& value) {
  if (dotted.empty()) throw std::invalid_argument("empty config key");
  Json* node = &j;
  std::istringstream ss(dotted);
  std::string part;
  std::vector<std::string> parts;
  while (std::getline(ss, part, '.')) parts.push_back(part);
  for (std::size_t i = 0; i < parts.size(); ++i) {
    const auto& p = parts[i];
    if (node->is_object()) {
      if (!node->contains(p)) throw std::invalid_argument("unknown config key '" + dotted + "'");
      node = &(*node)[p];
    } else if (node->is_array()) {
      if (p.empty() || !std::all_of(p.begin(), p.end(), [](unsigned char ch) { return std::isdigit(ch); }) ||
          std::stoul(p) >= node->size()) {
        throw std::invalid_argument("unknown config key '" + dotted + "'");
      }
      node = &(*node)[std::stoul(p)];
    } else {
      throw std::invalid_argument("unknown config key '" + dotted + "'");
    }
  }
  Json parsed;
  try {
    parsed = Json::parse(value);
  } catch (const nlohmann::json::exception&) {
    parsed = value;
  }
  *node = parsed;
}

std::map<std::string, std::string> crowdtree_environment() {
  std::map<std::string, std::string> out;
  for (char** e = environ; e && *e; ++e) {
    const std::string kv = *e;
    if (kv.rfind("CROWDTREE_", 0) != 0) continue;
    const auto eq = kv.find('=');
    out[kv.substr(0, eq)] = eq == std::string::npos ? "" : kv.substr(eq + 1);
  }
  return out;
}

RunConfig resolve_config(const fs::path& file, const std::map<std::string, std::string>& env,
                         const std::vector<std::string>& overrides) {
  Json j = RunConfig().to_json();
  if (!file.empty()) {
    Json from_file;
    try {
      from_file = Json::parse(read_text(file));
    } catch (const nlohmann::json::parse_error& e) {
      throw std::invalid_argument("config file " + file.string() + ": " + e.what());
    }
    // Validate keys before merging so that errors name the file's key.
    RunConfig::from_json(from_file);
    j.merge_patch(from_file);
  }
  for (const auto& [name, value] : env) {
    std::string key = name.substr(std::string("CROWDTREE_").size());
    std::string dotted;
    for (std::size_t i = 0; i < key.size(); ++i) {
      if (key.compare(i, 2, "__") == 0) {
        dotted += '.';
        ++i;
      } else {
        dotted += static_cast<char>(std::tolower(static_cast<unsigned char>(key[i])));
      }
    }
    try {
      set_config_key(j, dotted, value);
    } catch (const std::invalid_argument& e) {
      throw std::invalid_argument(std::string(e.what()) + " (from environment variable " + name + ")");
    }
  }
  for (const auto& o : overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos) throw std::invalid_argument("override '" + o + "' must have the form key=value");
    set_config_key(j, o.substr(0, eq), o.substr(eq + 1));
  }
  return RunConfig::from_json(j);
}

std::string config_hash(const RunConfig& cfg) {
  Json j = cfg.to_json();
  j.erase("out");
  return hex(fnv1a(j.dump()));
}

PatchSets make_patch_sets(const LoadedDataset& data, const RunConfig& cfg) {
  PatchSets s;
  s.train = sample_patches(data.scenes, data.split.train, cfg.patches_per_scene, cfg.patch,
                           derive_seed(cfg.seed, "patches:train"));
  s.val = sample_patches(data.scenes, data.split.val, cfg.patches_per_scene, cfg.patch,
                         derive_seed(cfg.seed, "patches:val"));
  return s;
}

void stage_gen_data(const RunConfig& cfg, const Log& log) {
  SynthConfig sc = cfg.data;
  sc.seed = derive_seed(cfg.seed, "data");
  const auto scenes = generate_dataset(sc);
  const auto split = split_dataset(scenes, cfg.splits, derive_seed(cfg.seed, "split"));
  save_dataset(out_dir(cfg, "data"), sc, scenes, split);
  say(log, "gen-data: " + std::to_string(scenes.size()) + " scenes (" + std::to_string(split.train.size()) + " train, " +
               std::to_string(split.val.size()) + " val, " + std::to_string(split.test.size()) + " test)");
  write_stage(cfg, "data", "gen-data", {});
}

void stage_pretrain(const RunConfig& cfg, const Log& log) {
  require(cfg, "pretrain", "data");
  const Loaded in = load_inputs(cfg);
  PretrainConfig pc = cfg.pretrain;
  pc.seed = derive_seed(cfg.seed, "pretrain");
  const RegressorNet init = RegressorNet::initialize(derive_seed(cfg.seed, "init"));
  say(log, "pretrain: " + std::to_string(in.sets.train.size()) + " train patches, " +
               std::to_string(in.sets.val.size()) + " val patches");
  const PretrainResult r = pretrain(init, in.sets.train, in.sets.val, cfg.patch, cfg.regressor, pc);
  const auto dir = out_dir(cfg, "pretrain");
  save_regressor(dir, r.net, {"pretrain", r.best_step, r.best_val_mae});
  std::ostringstream curve;
  curve << "step,train_loss,val_mae\n";
  for (const auto& p : r.curve) curve << p.step << ',' << format_double(p.train_loss) << ',' << format_double(p.val_mae) << '\n';
  write_text(dir / "curve.csv", curve.str());
  say(log, "pretrain: best val mae " + format_double(r.best_val_mae) + " at step " + std::to_string(r.best_step));
  write_stage(cfg, "pretrain", "pretrain", {"data"}, {{"best_step", r.best_step}, {"best_val_mae", r.best_val_mae}});
}

void stage_grow(const RunConfig& cfg, const Log& log) {
  require(cfg, "grow", "data");
  require(cfg, "grow", "pretrain");
  const Loaded in = load_inputs(cfg);
  const RegressorNet root = load_regressor(out_dir(cfg, "pretrain"));
  const ExpertTree tree = grow(root, in.sets.train, in.sets.val, cfg.patch, growth_for(cfg), log);
  save_tree(out_dir(cfg, "tree"), tree, in.sets.train);
  write_stage(cfg, "tree", "grow", {"data", "pretrain"},
              {{"levels", tree.levels.size()}, {"best_level", tree.best_level}});
}

void stage_train_classifier(const RunConfig& cfg, const Log& log) {
  require(cfg, "train-classifier", "data");
  require(cfg, "train-classifier", "tree");
  const Loaded in = load_inputs(cfg);
  const ExpertTree tree = load_tree(out_dir(cfg, "tree"));
  const std::size_t level = tree.best_level;
  const auto& leaves = tree.levels.at(level).leaves;
  const GrowthConfig g = growth_for(cfg);
  ClassifierTrainResult r;
  if (leaves.size() == 1) {
    r.net = ClassifierNet::constant(0);
    r.accuracy = 100.0;
  } else {
    r = train_level_classifier(tree.experts(level), in.sets.train, in.sets.val, cfg.patch, g,
                               derive_seed(g.seed, "classifier:level" + std::to_string(level)));
  }
  for (const auto& w : r.warnings) say(log, "train-classifier: " + w);
  const auto dir = out_dir(cfg, "classifier");
  save_any_classifier(dir, r.net, leaves, r.accuracy);
  Json per_class = Json::array();
  for (std::size_t k = 0; k < r.per_class_accuracy.size(); ++k) {
    const double a = r.per_class_accuracy[k];
    per_class.push_back({{"leaf", leaf_name(leaves[k])}, {"accuracy", std::isfinite(a) ? Json(a) : Json(nullptr)}});
  }
  say(log, "train-classifier: level " + std::to_string(level) + ", " + std::to_string(leaves.size()) +
               " experts, validation accuracy " + format_double(r.accuracy));
  write_stage(cfg, "classifier", "train-classifier", {"data", "tree"},
              {{"level", level}, {"accuracy", r.accuracy}, {"per_class_accuracy", per_class}, {"unreachable", r.unreachable}});
}

void stage_baseline_moe(const RunConfig& cfg, const Log& log) {
  require(cfg, "baseline moe", "data");
  require(cfg, "baseline moe", "pretrain");
  const Loaded in = load_inputs(cfg);
  const RegressorNet base = load_regressor(out_dir(cfg, "pretrain"));
  MoEConfig mc = cfg.moe;
  mc.seed = derive_seed(cfg.seed, "moe");
  const MoETrainResult r = train_moe(base, in.sets.train, in.sets.val, cfg.patch, mc, log);
  save_moe(out_dir(cfg, "baseline_moe"), r.model, r.best_val_mae);
  write_stage(cfg, "baseline_moe", "baseline-moe", {"data", "pretrain"},
              {{"method", "moe-joint"}, {"best_step", r.best_step}, {"best_val_mae", r.best_val_mae}});
}

void stage_baseline_nway(const RunConfig& cfg, std::size_t k, const Log& log) {
  require(cfg, "baseline nway", "data");
  require(cfg, "baseline nway", "pretrain");
  if (k < 2) throw std::invalid_argument("baseline nway: --k must be >= 2");
  const Loaded in = load_inputs(cfg);
  const RegressorNet base = load_regressor(out_dir(cfg, "pretrain"));
  const NWayResult r = nway_differential_train(base, k, in.sets.train, in.sets.val, cfg.patch, growth_for(cfg), log);
  const std::string dir = "baseline_nway" + std::to_string(k);
  save_nway(out_dir(cfg, dir), r);
  say(log, "baseline nway" + std::to_string(k) + ": train oracle " + format_double(r.training.final_oracle) +
               ", classifier accuracy " + format_double(r.classifier.accuracy));
  write_stage(cfg, dir, "baseline-nway", {"data", "pretrain"}, {{"method", "nway-differential"}, {"k", k}});
}

void stage_evaluate(const RunConfig& cfg, const Log& log) {
  require(cfg, "evaluate", "data");
  require(cfg, "evaluate", "pretrain");
  require(cfg, "evaluate", "tree");
  require(cfg, "evaluate", "classifier");
  const LoadedDataset data = load_dataset(out_dir(cfg, "data"));
  const TestSet test = make_test_set(data.scenes, data.split.test, cfg.patch);
  const ExpertTree tree = load_tree(out_dir(cfg, "tree"));
  const auto dir = out_dir(cfg, "eval");
  say(log, "evaluate: " + std::to_string(test.images.size()) + " test images, " + std::to_string(test.patches.size()) +
               " sliding RoIs");

  std::map<std::string, PredictionCache> caches;
  for (const auto& lv : tree.levels) {
    for (const auto& a : lv.leaves) {
      if (!caches.count(a)) caches[a] = predict_all(tree.nodes.at(a).net, test.patches, cfg.patch);
    }
  }
  const std::vector<double> counts = gt_counts(test.patches);
  std::vector<LevelReport> reports;
  std::ostringstream image;
  image << "level,image_actual_mae,image_actual_mse_rmse_form,image_oracle_mae,image_oracle_mse_rmse_form\n";
  for (std::size_t l = 0; l < tree.levels.size(); ++l) {
    const auto& lv = tree.levels[l];
    std::vector<const PredictionCache*> ptrs;
    for (const auto& a : lv.leaves) ptrs.push_back(&caches.at(a));
    const auto routed = classifier_choices(lv.classifier, test.patches, cfg.patch);
    const auto oracle = oracle_choices(test, ptrs, cfg.growth.tie_epsilon);
    const RoutedEval actual = evaluate_choices(test, ptrs, routed);
    const RoutedEval best = evaluate_choices(test, ptrs, oracle);

    LevelReport r;
    r.level = l;
    r.n_experts = lv.leaves.size();
    r.leaves = lv.leaves;
    r.oracle_mae = cached_oracle_mae(test, ptrs);
    r.actual_mae = actual.patch_mae;
    std::size_t agree = 0;
    for (std::size_t i = 0; i < routed.size(); ++i) agree += routed[i] == oracle[i] ? 1 : 0;
    r.classifier_accuracy = 100.0 * static_cast<double>(agree) / static_cast<double>(routed.size());
    r.profile = specialty_profile(routed, counts, lv.leaves.size());
    for (const auto& p : r.profile) r.shares.push_back(p.share);
    r.check();
    reports.push_back(r);

    std::vector<std::string> names;
    for (const auto& a : lv.leaves) names.push_back(leaf_name(a));
    write_text(dir / ("fig5_level" + std::to_string(l) + "_classifier.csv"), profile_csv(r.profile, names));
    write_text(dir / ("fig5_level" + std::to_string(l) + "_oracle.csv"),
               profile_csv(specialty_profile(oracle, counts, lv.leaves.size()), names));
    image << l << ',' << format_double(actual.image_mae) << ',' << format_double(actual.image_mse) << ','
          << format_double(best.image_mae) << ',' << format_double(best.image_mse) << '\n';
    say(log, "evaluate: level " + std::to_string(l) + " oracle " + format_double(r.oracle_mae) + " actual " +
                 format_double(r.actual_mae) + " image mae " + format_double(actual.image_mae));
  }
  write_text(dir / "table4.csv", table4_csv(reports));
  write_text(dir / "image_metrics.csv", image.str());

  std::vector<MethodCandidate> methods;
  methods.push_back({"base", [&] {
                       const RegressorNet base = load_regressor(out_dir(cfg, "pretrain"));
                       std::vector<PredictionCache> c{predict_all(base, test.patches, cfg.patch)};
                       return routed_row(test, c, std::vector<std::size_t>(test.patches.size(), 0), false);
                     }});
  methods.push_back({"moe-joint", [&] {
                       const MoEModel moe = load_moe(out_dir(cfg, "baseline_moe"));
                       std::vector<PredictionCache> c(1, PredictionCache(test.patches.size()));
                       parallel_for(test.patches.size(),
                                    [&](std::size_t i) { c[0][i] = moe_predict(moe, test.patches[i].patch.pixels, cfg.patch); });
                       return routed_row(test, c, std::vector<std::size_t>(test.patches.size(), 0), false);
                     }});
  std::vector<std::size_t> ks;
  if (fs::exists(cfg.out)) {
    for (const auto& e : fs::directory_iterator(cfg.out)) {
      const auto name = e.path().filename().string();
      if (name.rfind("baseline_nway", 0) == 0 && fs::exists(e.path() / "stage.json")) {
        ks.push_back(std::stoul(name.substr(std::string("baseline_nway").size())));
      }
    }
  }
  std::sort(ks.begin(), ks.end());
  if (ks.empty()) ks.push_back(cfg.nway_k);
  for (std::size_t k : ks) {
    methods.push_back({"nway-" + std::to_string(k), [&, k] {
                         const LoadedNWay nw = load_nway(out_dir(cfg, "baseline_nway" + std::to_string(k)));
                         std::vector<PredictionCache> c;
                         for (const auto& e : nw.experts) c.push_back(predict_all(e, test.patches, cfg.patch));
                         return routed_row(test, c, classifier_choices(nw.classifier, test.patches, cfg.patch), true);
                       }});
  }
  methods.push_back({"crowdtree", [&] {
                       const ClassifierNet cls = load_any_classifier(out_dir(cfg, "classifier"));
                       std::vector<PredictionCache> c;
                       for (const auto& a : tree.levels.at(tree.best_level).leaves) c.push_back(caches.at(a));
                       return routed_row(test, c, classifier_choices(cls, test.patches, cfg.patch), true);
                     }});
  const Comparison cmp = compare_table(methods);
  for (const auto& o : cmp.omitted) say(log, "evaluate: omitted " + o);
  write_text(dir / "table5.csv", cmp.csv());
  write_stage(cfg, "eval", "evaluate", {"data", "pretrain", "tree", "classifier"},
              {{"test_images", test.images.size()}, {"test_rois", test.patches.size()}, {"omitted_methods", cmp.omitted}});
}

void stage_analyze(const RunConfig& cfg, const Log& log) {
  require(cfg, "analyze", "data");
  require(cfg, "analyze", "tree");
  require(cfg, "analyze", "eval");
  const Loaded in = load_inputs(cfg);
  const ExpertTree tree = load_tree(out_dir(cfg, "tree"));
  const auto dir = out_dir(cfg, "analysis");
  Json summary;

  Json levels = Json::array();
  for (std::size_t l = 0; l < tree.reports.size(); ++l) {
    const auto& r = tree.reports[l];
    Json row = {{"level", l},
                {"n_experts", r.n_experts},
                {"train_oracle_mae", r.train_oracle_mae},
                {"val_oracle_mae", r.oracle_mae},
                {"val_actual_mae", r.actual_mae},
                {"val_classifier_accuracy", r.classifier_accuracy}};
    if (l > 0) {
      row["train_oracle_relative_drop"] =
          (tree.reports[l - 1].train_oracle_mae - r.train_oracle_mae) / tree.reports[l - 1].train_oracle_mae;
    }
    // Specialty separation on test patches routed by the classifier.
    const auto fig = read_csv(out_dir(cfg, "eval") / ("fig5_level" + std::to_string(l) + "_classifier.csv"));
    std::vector<ExpertProfile> prof;
    for (const auto& f : fig) {
      ExpertProfile p;
      p.n = std::stoul(f.at("n"));
      p.mean = std::stod(f.at("mean"));
      p.std = std::stod(f.at("std"));
      p.share = std::stod(f.at("share"));
      p.empty = f.at("empty") == "1";
      prof.push_back(p);
    }
    if (prof.size() == 2) row["test_mean_separation"] = mean_separation(prof[0], prof[1]);
    levels.push_back(row);
  }
  summary["levels"] = levels;

  // Regime composition of each leaf's training subset at every level.
  std::ostringstream comp;
  comp << "level,leaf,regime,patches\n";
  for (std::size_t l = 0; l < tree.levels.size(); ++l) {
    const auto& lv = tree.levels[l];
    std::map<std::pair<std::size_t, std::string>, std::size_t> tally;
    for (std::size_t i = 0; i < lv.partition.size(); ++i) {
      ++tally[{lv.partition[i], in.data.scenes.at(in.sets.train[i].scene).regime_label}];
    }
    for (const auto& [key, n] : tally) comp << l << ',' << leaf_name(lv.leaves[key.first]) << ',' << key.second << ',' << n << '\n';
  }
  write_text(dir / "regime_composition.csv", comp.str());

  // Agreement of argmin labels with the growth partition at the best level.
  const auto& best = tree.levels.at(tree.best_level);
  if (best.leaves.size() > 1) {
    const auto labels = make_labels(count_error_matrix(tree.experts(tree.best_level), in.sets.train, cfg.patch),
                                    cfg.growth.tie_epsilon);
    std::size_t same = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) same += labels[i] == best.partition[i] ? 1 : 0;
    summary["best_level_label_partition_agreement"] = 100.0 * static_cast<double>(same) / static_cast<double>(labels.size());
  }
  summary["best_level"] = tree.best_level;
  write_text(dir / "summary.json", summary.dump(2) + "\n");
  say(log, "analyze: wrote " + (dir / "summary.json").string());
  write_stage(cfg, "analysis", "analyze", {"data", "tree", "eval"});
}

const std::vector<std::string>& stage_names() {
  static const std::vector<std::string> names{"gen-data",    "pretrain",     "grow",          "train-classifier",
                                              "baseline-moe", "baseline-nway", "evaluate",     "analyze"};
  return names;
}

void run_stage(const std::string& stage, const RunConfig& cfg, const Log& log) {
  if (stage == "gen-data") return stage_gen_data(cfg, log);
  if (stage == "pretrain") return stage_pretrain(cfg, log);
  if (stage == "grow") return stage_grow(cfg, log);
  if (stage == "train-classifier") return stage_train_classifier(cfg, log);
  if (stage == "baseline-moe") return stage_baseline_moe(cfg, log);
  if (stage == "baseline-nway") return stage_baseline_nway(cfg, cfg.nway_k, log);
  if (stage == "evaluate") return stage_evaluate(cfg, log);
  if (stage == "analyze") return stage_analyze(cfg, log);
  throw std::invalid_argument("unknown stage '" + stage + "'");
}

}  // namespace crowdtree
