#pragma once

#include "crowdtree/classifier.hpp"
#include "crowdtree/synth.hpp"

#include <span>
#include <vector>

namespace crowdtree {

/// Sliding-window RoIs of a set of test images, grouped by image in
/// slide order.
struct TestSet {
  std::vector<SampledPatch> patches;
  std::vector<std::size_t> images;        // scene indices
  std::vector<std::size_t> first_patch;   // per image, offset into patches; size images+1
  std::vector<double> image_counts;       // ground-truth counts
  std::size_t rows = 0;
  std::size_t cols = 0;
};

TestSet make_test_set(const std::vector<Scene>& scenes, const std::vector<std::size_t>& indices, const PatchSpec& spec);

/// One expert's RoI density maps on every test patch.
using PredictionCache = std::vector<DensityMap>;
PredictionCache predict_all(const RegressorNet& net, std::span<const SampledPatch> patches, const PatchSpec& spec);

struct RoutedEval {
  double patch_mae = 0.0;
  double image_mae = 0.0;
  double image_mse = 0.0;  // RMSE form
  std::vector<double> image_predictions;
};

/// Evaluates a fixed per-patch expert choice from cached predictions:
/// patch-level count MAE and image-level stitched MAE/MSE.
RoutedEval evaluate_choices(const TestSet& test, std::span<const PredictionCache* const> experts,
                            const std::vector<std::size_t>& choices);

/// Per-patch argmin expert (ties to the lowest index) from cached predictions.
std::vector<std::size_t> oracle_choices(const TestSet& test, std::span<const PredictionCache* const> experts,
                                        double tie_epsilon = 0.0);
/// Patch-level oracle MAE from cached predictions.
double cached_oracle_mae(const TestSet& test, std::span<const PredictionCache* const> experts);

std::vector<std::size_t> classifier_choices(const ClassifierNet& net, std::span<const SampledPatch> patches,
                                            const PatchSpec& spec);

}  // namespace crowdtree
