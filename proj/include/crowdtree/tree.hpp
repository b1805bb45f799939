#pragma once

#include "crowdtree/classifier.hpp"
#include "crowdtree/metrics.hpp"
#include "crowdtree/regressor.hpp"

#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

namespace crowdtree {

struct GrowthConfig {
  std::size_t max_tree_depth = 2;
  OptimConfig fine_tune{1e-6, 0.9, 0.0};
  LossConfig loss;
  std::size_t fine_tune_batch = 4;
  std::size_t inner_patience = 2;
  /// Hard cap on differential-training epochs per split.
  std::size_t max_epochs = 10;
  std::size_t outer_patience = 1;
  double tie_epsilon = 0.0;
  double min_split_fraction = 0.03;
  OptimConfig classifier{1e-2, 0.9, 0.0};
  ClassifierTrainConfig classifier_train;
  std::uint64_t seed = 0;

  void validate() const;
};

using ProgressFn = std::function<void(const std::string&)>;

struct DifferentialResult {
  std::vector<RegressorNet> experts;    // best-oracle checkpoint
  std::vector<std::size_t> assignment;  // expert per subset patch, at the checkpoint
  std::vector<std::size_t> val_assignment;
  double parent_mae = 0.0;      // parent on the subset
  double initial_oracle = 0.0;  // children before any update, same subset
  double final_oracle = 0.0;    // checkpoint, same subset
  double best_val_oracle = 0.0;
  std::size_t epochs = 0;
  std::size_t best_epoch = 0;
  std::vector<double> val_curve;
};

/// K-way differential training of copies of `parent` on `subset`: every epoch
/// assigns each patch to its best expert, then fine-tunes each expert with the
/// count loss on its own patches only. Stops when the validation Oracle MAE
/// stagnates. `address` keys the RNG stream (the root is "").
DifferentialResult differential_train(const RegressorNet& parent, std::size_t k, std::span<const SampledPatch> subset,
                                      std::span<const SampledPatch> val_subset, const PatchSpec& spec,
                                      const GrowthConfig& cfg, const std::string& address,
                                      const ProgressFn& progress = {});

struct TreeNode {
  RegressorNet net;
  std::vector<std::size_t> subset;  // training patch ids it was trained on (D_m)
};

struct SplitRecord {
  std::size_t level = 0;
  std::string address;
  std::size_t subset_size = 0;
  double parent_mae = 0.0;
  double initial_oracle = 0.0;
  double final_oracle = 0.0;
  double best_val_oracle = 0.0;
  std::size_t epochs = 0;
};

struct TreeLevel {
  std::vector<std::string> leaves;       // sorted
  std::vector<std::size_t> partition;    // training patch id -> leaf index (growth assignment)
  std::vector<std::size_t> labels;       // training patch id -> argmin leaf index
  ClassifierNet classifier;
};

struct ExpertTree {
  std::map<std::string, TreeNode> nodes;
  std::vector<TreeLevel> levels;
  std::vector<LevelReport> reports;
  std::vector<SplitRecord> splits;
  std::size_t best_level = 0;

  std::vector<const RegressorNet*> experts(std::size_t level) const;
};

/// Grows the tree level by level from a pretrained root. Training patch ids
/// are indices into `train`.
ExpertTree grow(const RegressorNet& root, std::span<const SampledPatch> train, std::span<const SampledPatch> val,
                const PatchSpec& spec, const GrowthConfig& cfg, const ProgressFn& progress = {});

/// Oracle MAE of a leaf set over patches.
double oracle_mae(std::span<const RegressorNet* const> leaves, std::span<const SampledPatch> patches,
                  const PatchSpec& spec);

/// Labels from the final leaf set, classifier trained on RoIs, validated on `val`.
ClassifierTrainResult train_level_classifier(std::span<const RegressorNet* const> leaves,
                                             std::span<const SampledPatch> train, std::span<const SampledPatch> val,
                                             const PatchSpec& spec, const GrowthConfig& cfg, std::uint64_t seed);

/// Directory layout: nodes/<address|root>/, classifiers/level_<l>/,
/// partition.csv (best level), partition_level_<l>.csv, reports.json,
/// table4.csv, splits.csv, tree.json.
void save_tree(const std::filesystem::path& dir, const ExpertTree& tree, std::span<const SampledPatch> train);
ExpertTree load_tree(const std::filesystem::path& dir);

std::string node_dirname(const std::string& address);

}  // namespace crowdtree
