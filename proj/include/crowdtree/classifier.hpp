#pragma once

#include "crowdtree/autograd.hpp"
#include "crowdtree/density.hpp"
#include "crowdtree/regressor.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace crowdtree {

/// Expert classifier over RoI pixels: conv(5x5,16) pool conv(3x3,32) pool
/// conv(3x3,32) global-average-pool FC(32) FC(K) softmax.
struct ClassifierNet {
  ParamSet params;
  std::size_t num_classes = 1;
  std::uint64_t seed = 0;
  /// Class index -> leaf index in the expert list it was trained for.
  std::vector<std::size_t> class_to_leaf;

  static constexpr const char* kArchitecture =
      "conv5x5x16-relu-pool-conv3x3x32-relu-pool-conv3x3x32-relu-gap-fc32-relu-fcK-softmax";

  static ClassifierNet initialize(std::size_t num_classes, std::uint64_t seed);
  /// A single-class classifier that always selects `leaf`; it has no parameters.
  static ClassifierNet constant(std::size_t leaf);
};

Var classifier_logits(Tape& tape, ParamSet& params, Var rois);
Var classifier_logits(Tape& tape, const ParamSet& params, Var rois);

/// RoI crop of a patch (the classifier never sees the context margin).
Image roi_pixels(const Image& patch, const PatchSpec& spec);

/// Softmax class probabilities of one RoI (length K, sums to 1).
std::vector<double> classify_probabilities(const ClassifierNet& net, const Image& roi);
/// Selected leaf index for one RoI (argmax class, ties to the lower class).
std::size_t route_leaf(const ClassifierNet& net, const Image& roi);

/// errors[i][k]: count error of expert k on patch i.
using ErrorMatrix = std::vector<std::vector<double>>;

/// Count error of every expert on every patch.
ErrorMatrix count_error_matrix(std::span<const RegressorNet* const> experts, std::span<const SampledPatch> patches,
                               const PatchSpec& spec);

struct LabeledRoi {
  Image roi;
  std::size_t label = 0;   // leaf index
  std::size_t source = 0;  // index of the originating patch
  double weight = 1.0;
};

/// Label of each patch = expert with the least count error; ties (within
/// `tie_epsilon`) go to the lowest index, i.e. the smallest leaf address.
std::vector<std::size_t> make_labels(const ErrorMatrix& errors, double tie_epsilon = 0.0);
std::vector<LabeledRoi> make_labeled_rois(std::span<const SampledPatch> patches, const std::vector<std::size_t>& labels,
                                          const PatchSpec& spec);

struct BalancedSet {
  std::vector<LabeledRoi> samples;
  std::vector<std::size_t> class_counts;   // before balancing, per leaf index
  std::vector<std::size_t> unreachable;    // leaves with no samples
  std::vector<std::string> warnings;
};

/// Oversamples minority classes by cyclic repetition up to the majority count.
BalancedSet balance(const std::vector<LabeledRoi>& labeled, std::size_t num_leaves);

struct ClassifierTrainConfig {
  std::size_t batch_size = 16;
  std::size_t max_epochs = 12;
  std::size_t patience = 3;
  std::uint64_t seed = 0;
};

struct ClassifierTrainResult {
  ClassifierNet net;
  double accuracy = 0.0;                 // percent, on the validation set
  std::vector<double> per_class_accuracy;  // percent per leaf index; NaN when a leaf has no validation samples
  std::vector<double> accuracy_curve;
  std::vector<std::size_t> unreachable;
  std::vector<std::string> warnings;
};

/// Softmax cross-entropy training on balanced RoIs with early stopping on
/// validation accuracy. With one reachable class a constant router is returned.
ClassifierTrainResult train_classifier(const std::vector<LabeledRoi>& labeled, const std::vector<LabeledRoi>& val,
                                       std::size_t num_leaves, const OptimConfig& optim,
                                       const ClassifierTrainConfig& cfg);

/// Percent of samples whose routed leaf equals their label.
double routing_accuracy(const ClassifierNet& net, const std::vector<LabeledRoi>& samples);

/// Picks an expert for the RoI at `placement` given its patch pixels.
using Router = std::function<std::size_t(const Image& patch, RoiPlacement placement)>;
Router classifier_router(const ClassifierNet& net, const PatchSpec& spec);

struct RoutedImage {
  DensityMap map;  // 1/4 scale
  double count = 0.0;
  std::vector<RoiPlacement> placements;
  std::vector<std::size_t> choices;
};

/// Slides the RoI over the image, predicts each RoI with the routed expert and
/// averages overlaps. Image extents must be divisible by 4.
RoutedImage route_and_count(const Router& router, std::span<const RegressorNet* const> experts, const Image& image,
                            const PatchSpec& spec);

void save_classifier(const std::filesystem::path& dir, const ClassifierNet& net,
                     const std::vector<std::string>& leaf_addresses, double accuracy);
struct LoadedClassifier {
  ClassifierNet net;
  std::vector<std::string> leaf_addresses;
};
LoadedClassifier load_classifier(const std::filesystem::path& dir);

}  // namespace crowdtree
