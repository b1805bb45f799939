#pragma once

#include "crowdtree/baselines.hpp"
#include "crowdtree/synth.hpp"
#include "crowdtree/tree.hpp"

#include <json.hpp>

#include <array>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace crowdtree {

/// Everything a run needs. Stage seeds are derived from `seed` and the stage name.
struct RunConfig {
  std::uint64_t seed = 7;
  std::string out = "run";
  SynthConfig data;
  std::array<double, 3> splits{0.7, 0.15, 0.15};
  std::size_t patches_per_scene = 4;
  PatchSpec patch;
  OptimConfig regressor{1e-4, 0.9, 0.0};
  PretrainConfig pretrain;
  GrowthConfig growth;
  MoEConfig moe;
  std::size_t nway_k = 2;

  RunConfig();
  void validate() const;
  nlohmann::ordered_json to_json() const;
  /// Strict: every key must be known; missing keys keep their defaults.
  static RunConfig from_json(const nlohmann::ordered_json& j);
};

/// Config assembly with precedence defaults < file < environment < overrides.
/// Environment variables CROWDTREE_<SECTION>__<KEY> address nested keys
/// (e.g. CROWDTREE_GROWTH__MAX_TREE_DEPTH=1). Overrides are "dotted.key=value"
/// strings; values are parsed as JSON and fall back to plain strings.
RunConfig resolve_config(const std::filesystem::path& file, const std::map<std::string, std::string>& env,
                         const std::vector<std::string>& overrides);

/// CROWDTREE_* variables from the process environment.
std::map<std::string, std::string> crowdtree_environment();

/// Sets `dotted.key` in `j`; the key must already exist.
void set_config_key(nlohmann::ordered_json& j, const std::string& dotted, const std::string& value);

std::string config_hash(const RunConfig& cfg);

/// Training and validation patches, deterministic in the run seed.
struct PatchSets {
  std::vector<SampledPatch> train;
  std::vector<SampledPatch> val;
};
PatchSets make_patch_sets(const LoadedDataset& data, const RunConfig& cfg);

using Log = std::function<void(const std::string&)>;

void stage_gen_data(const RunConfig& cfg, const Log& log);
void stage_pretrain(const RunConfig& cfg, const Log& log);
void stage_grow(const RunConfig& cfg, const Log& log);
void stage_train_classifier(const RunConfig& cfg, const Log& log);
void stage_evaluate(const RunConfig& cfg, const Log& log);
void stage_baseline_moe(const RunConfig& cfg, const Log& log);
void stage_baseline_nway(const RunConfig& cfg, std::size_t k, const Log& log);
void stage_analyze(const RunConfig& cfg, const Log& log);

/// Stage names in pipeline order, as accepted by run_stage.
const std::vector<std::string>& stage_names();
void run_stage(const std::string& stage, const RunConfig& cfg, const Log& log);

}  // namespace crowdtree
