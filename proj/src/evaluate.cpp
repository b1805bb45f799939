#include "crowdtree/evaluate.hpp"

#include "crowdtree/metrics.hpp"
#include "crowdtree/parallel.hpp"
#include "crowdtree/selection.hpp"

#include <stdexcept>

namespace crowdtree {

TestSet make_test_set(const std::vector<Scene>& scenes, const std::vector<std::size_t>& indices, const PatchSpec& spec) {
  if (indices.empty()) throw std::invalid_argument("make_test_set: no test images");
  TestSet t;
  t.rows = static_cast<std::size_t>(scenes.at(indices.front()).image.rows());
  t.cols = static_cast<std::size_t>(scenes.at(indices.front()).image.cols());
  for (std::size_t s : indices) {
    const auto& scene = scenes.at(s);
    if (static_cast<std::size_t>(scene.image.rows()) != t.rows || static_cast<std::size_t>(scene.image.cols()) != t.cols) {
      throw std::invalid_argument("make_test_set: scene " + std::to_string(s) + " has a different size");
    }
    t.images.push_back(s);
    t.first_patch.push_back(t.patches.size());
    t.image_counts.push_back(scene.density.sum());
    auto patches = sliding_patches(scenes, {s}, spec);
    for (auto& p : patches) t.patches.push_back(std::move(p));
  }
  t.first_patch.push_back(t.patches.size());
  return t;
}

PredictionCache predict_all(const RegressorNet& net, std::span<const SampledPatch> patches, const PatchSpec& spec) {
  PredictionCache out(patches.size());
  parallel_for(patches.size(), [&](std::size_t i) { out[i] = predict(net, patches[i].patch.pixels, spec); });
  return out;
}

RoutedEval evaluate_choices(const TestSet& test, std::span<const PredictionCache* const> experts,
                            const std::vector<std::size_t>& choices) {
  if (experts.empty()) throw std::invalid_argument("evaluate_choices: no experts");
  if (choices.size() != test.patches.size()) throw std::invalid_argument("evaluate_choices: choice count mismatch");
  RoutedEval r;
  double total = 0.0;
  for (std::size_t i = 0; i < choices.size(); ++i) {
    if (choices[i] >= experts.size()) throw std::out_of_range("evaluate_choices: choice outside the expert set");
    total += count_error((*experts[choices[i]])[i].sum(), test.patches[i].patch.count);
  }
  r.patch_mae = total / static_cast<double>(choices.size());

  r.image_predictions.resize(test.images.size());
  parallel_for(test.images.size(), [&](std::size_t m) {
    std::vector<PlacedPrediction> placed;
    for (std::size_t i = test.first_patch[m]; i < test.first_patch[m + 1]; ++i) {
      const auto& roi = test.patches[i].roi;
      placed.push_back({roi.top / kDownscale, roi.left / kDownscale, (*experts[choices[i]])[i]});
    }
    r.image_predictions[m] = stitch_predictions(placed, test.rows / kDownscale, test.cols / kDownscale).sum();
  });
  r.image_mae = mae(r.image_predictions, test.image_counts);
  r.image_mse = mse(r.image_predictions, test.image_counts);
  return r;
}

namespace {

ErrorMatrix cached_errors(const TestSet& test, std::span<const PredictionCache* const> experts) {
  ErrorMatrix e(test.patches.size(), std::vector<double>(experts.size()));
  for (std::size_t i = 0; i < test.patches.size(); ++i) {
    for (std::size_t k = 0; k < experts.size(); ++k) {
      e[i][k] = count_error((*experts[k])[i].sum(), test.patches[i].patch.count);
    }
  }
  return e;
}

}  // namespace

std::vector<std::size_t> oracle_choices(const TestSet& test, std::span<const PredictionCache* const> experts,
                                        double tie_epsilon) {
  return make_labels(cached_errors(test, experts), tie_epsilon);
}

double cached_oracle_mae(const TestSet& test, std::span<const PredictionCache* const> experts) {
  return oracle_mae(cached_errors(test, experts));
}

std::vector<std::size_t> classifier_choices(const ClassifierNet& net, std::span<const SampledPatch> patches,
                                            const PatchSpec& spec) {
  std::vector<std::size_t> out(patches.size());
  parallel_for(patches.size(), [&](std::size_t i) { out[i] = route_leaf(net, roi_pixels(patches[i].patch.pixels, spec)); });
  return out;
}

}  // namespace crowdtree
