#pragma once

#include "crowdtree/autograd.hpp"
#include "crowdtree/density.hpp"
#include "crowdtree/synth.hpp"

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace crowdtree {

/// Five-conv density regressor, conv(9x9,16) pool conv(7x7,32) pool
/// conv(7x7,16) conv(7x7,8) conv(1x1,1), ReLU after every conv. Output is at
/// 1/4 of the input resolution.
struct RegressorNet {
  ParamSet params;
  std::uint64_t seed = 0;

  static constexpr const char* kArchitecture =
      "conv9x9x16-relu-pool-conv7x7x32-relu-pool-conv7x7x16-relu-conv7x7x8-relu-conv1x1x1-relu";

  /// Uniform init scaled by fan-in, centered except for the nonnegative output
  /// layer; biases zero.
  static RegressorNet initialize(std::uint64_t seed);
};

Var regressor_forward(Tape& tape, ParamSet& params, Var input);
Var regressor_forward(Tape& tape, const ParamSet& params, Var input);

/// Stacks equally sized images into an [N, 1, H, W] tensor.
Tensor image_batch(std::span<const Image* const> images);

/// Crops the RoI of a full output map [N, 1, h, w].
Var crop_roi(Var full_map, const PatchSpec& spec);

/// RoI density at 1/4 scale. Patch extents must be divisible by 4.
DensityMap predict(const RegressorNet& net, const Image& patch, const PatchSpec& spec);
std::vector<DensityMap> predict_batch(const RegressorNet& net, std::span<const Image* const> patches,
                                      const PatchSpec& spec);
double predict_count(const RegressorNet& net, const Image& patch, const PatchSpec& spec);

struct LossConfig {
  double lambda = 1e-2;
  void validate() const;
};

/// (1/2N) sum ||M_i - M_i^GT||^2.
double l2_loss(std::span<const DensityMap> predictions, std::span<const DensityMap> ground_truths);
/// (lambda/2N) sum (C_i - C_i^GT)^2 with C_i the sum of the predicted map.
double count_loss(std::span<const DensityMap> predictions, std::span<const DensityMap> ground_truths,
                  const LossConfig& cfg);

struct PretrainConfig {
  std::size_t batch_size = 8;
  std::size_t eval_every = 50;
  std::size_t patience = 6;
  std::size_t max_steps = 2000;
  double flip_probability = 0.5;
  std::uint64_t seed = 0;
};

struct CurvePoint {
  std::size_t step = 0;
  double train_loss = 0.0;  // mean l2 loss since the previous evaluation
  double val_mae = 0.0;
};

struct PretrainResult {
  RegressorNet net;  // best-validation checkpoint
  std::vector<CurvePoint> curve;
  std::size_t best_step = 0;
  double best_val_mae = 0.0;
};

/// Patch-level count MAE of one regressor.
double patch_mae(const RegressorNet& net, std::span<const SampledPatch> patches, const PatchSpec& spec);

/// One SGD step on the mean l2 loss of the given patches. Returns the loss.
double l2_step(RegressorNet& net, std::span<const Patch* const> batch, const std::vector<bool>& flips,
               const PatchSpec& spec, const OptimConfig& optim);
/// One SGD step on the count loss of the given patches. Returns the loss.
double count_step(RegressorNet& net, std::span<const Patch* const> batch, const PatchSpec& spec,
                  const OptimConfig& optim, const LossConfig& loss);

/// Minimizes the l2 loss with SGD + momentum on random flip-augmented
/// minibatches; stops when validation MAE stagnates for `patience` evaluations.
PretrainResult pretrain(const RegressorNet& init, std::span<const SampledPatch> train,
                        std::span<const SampledPatch> val, const PatchSpec& spec, const OptimConfig& optim,
                        const PretrainConfig& cfg);

struct RegressorCheckpointInfo {
  std::string method = "regressor";
  std::size_t step = 0;
  double val_mae = 0.0;
};
void save_regressor(const std::filesystem::path& dir, const RegressorNet& net, const RegressorCheckpointInfo& info);
RegressorNet load_regressor(const std::filesystem::path& dir);

}  // namespace crowdtree
