#pragma once

#include "crowdtree/classifier.hpp"
#include "crowdtree/metrics.hpp"
#include "crowdtree/tree.hpp"

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

namespace crowdtree {

/// Soft mixture of experts: K regressors weighted per patch by a gating
/// network on the RoI.
struct MoEModel {
  std::vector<RegressorNet> experts;
  ClassifierNet gate;

  static MoEModel from_base(const RegressorNet& base, std::size_t k, std::uint64_t seed);
};

/// Mixture RoI map [N, 1, h, w] of a batch of patches [N, 1, H, W].
Var moe_forward(Tape& tape, MoEModel& model, Var patches, const PatchSpec& spec);
Var moe_forward(Tape& tape, const MoEModel& model, Var patches, const PatchSpec& spec);

DensityMap moe_predict(const MoEModel& model, const Image& patch, const PatchSpec& spec);
std::vector<double> moe_gate(const MoEModel& model, const Image& patch, const PatchSpec& spec);
double moe_patch_mae(const MoEModel& model, std::span<const SampledPatch> patches, const PatchSpec& spec);

struct MoEConfig {
  std::size_t experts = 4;
  std::size_t batch_size = 8;
  std::size_t eval_every = 25;
  std::size_t patience = 4;
  std::size_t max_steps = 300;
  OptimConfig optim{1e-4, 0.9, 0.0};
  std::uint64_t seed = 0;

  void validate() const;
};

struct MoETrainResult {
  MoEModel model;  // best-validation checkpoint
  std::vector<CurvePoint> curve;
  std::size_t best_step = 0;
  double best_val_mae = 0.0;
};

/// Joint end-to-end training of experts and gate with the l2 loss on the mixture.
MoETrainResult train_moe(const RegressorNet& base, std::span<const SampledPatch> train,
                         std::span<const SampledPatch> val, const PatchSpec& spec, const MoEConfig& cfg,
                         const ProgressFn& progress = {});

void save_moe(const std::filesystem::path& dir, const MoEModel& model, double val_mae);
MoEModel load_moe(const std::filesystem::path& dir);

struct NWayResult {
  DifferentialResult training;
  ClassifierTrainResult classifier;
};

/// Flat differential training of K copies of the base on the full training
/// set, then an expert classifier over the K experts.
NWayResult nway_differential_train(const RegressorNet& base, std::size_t k, std::span<const SampledPatch> train,
                                   std::span<const SampledPatch> val, const PatchSpec& spec, const GrowthConfig& cfg,
                                   const ProgressFn& progress = {});

void save_nway(const std::filesystem::path& dir, const NWayResult& result);
struct LoadedNWay {
  std::vector<RegressorNet> experts;
  ClassifierNet classifier;
};
LoadedNWay load_nway(const std::filesystem::path& dir);

/// A method to compare; `evaluate` may throw when its checkpoint is missing.
struct MethodCandidate {
  std::string method;
  std::function<MethodRow()> evaluate;
};
struct Comparison {
  std::vector<MethodRow> rows;
  std::vector<std::string> omitted;  // "method: reason"
  std::string csv() const { return table5_csv(rows); }
};
Comparison compare_table(const std::vector<MethodCandidate>& methods);

}  // namespace crowdtree
