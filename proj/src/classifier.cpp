#include "crowdtree/classifier.hpp"

#include "crowdtree/checkpoint.hpp"
#include "crowdtree/parallel.hpp"
#include "crowdtree/random.hpp"
#include "crowdtree/selection.hpp"
#include "crowdtree/stagnation.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <stdexcept>

namespace crowdtree {

namespace {

constexpr std::size_t kHidden = 32;

void add_uniform(ParamSet& params, Rng& rng, const std::string& name, Shape dims, std::size_t fan_in) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  Tensor w(std::move(dims));
  for (double& v : w.values()) v = rng.uniform(-bound, bound);
  params.add(name + ".weight", std::move(w));
}

template <typename Params>
Var logits_impl(Tape& tape, Params& params, Var x) {
  auto p = [&](const char* name) { return tape.param(params.at(name)); };
  Var h = relu(conv2d(x, p("conv1.weight"), p("conv1.bias")));
  h = maxpool2(h);
  h = relu(conv2d(h, p("conv2.weight"), p("conv2.bias")));
  h = maxpool2(h);
  h = relu(conv2d(h, p("conv3.weight"), p("conv3.bias")));
  h = global_avg_pool(h);
  h = relu(fully_connected(h, p("fc1.weight"), p("fc1.bias")));
  return fully_connected(h, p("fc2.weight"), p("fc2.bias"));
}

std::size_t argmax_first(std::span<const double> v) {
  std::size_t best = 0;
  for (std::size_t k = 1; k < v.size(); ++k) {
    if (v[k] > v[best]) best = k;
  }
  return best;
}

}  // namespace

ClassifierNet ClassifierNet::initialize(std::size_t num_classes, std::uint64_t seed) {
  if (num_classes == 0) throw std::invalid_argument("classifier: zero classes");
  ClassifierNet net;
  net.num_classes = num_classes;
  net.seed = seed;
  net.class_to_leaf.resize(num_classes);
  for (std::size_t k = 0; k < num_classes; ++k) net.class_to_leaf[k] = k;
  Rng rng(derive_seed(seed, "classifier-init"));
  add_uniform(net.params, rng, "conv1", {16, 1, 5, 5}, 25);
  net.params.add("conv1.bias", Tensor({16}));
  add_uniform(net.params, rng, "conv2", {32, 16, 3, 3}, 16 * 9);
  net.params.add("conv2.bias", Tensor({32}));
  add_uniform(net.params, rng, "conv3", {32, 32, 3, 3}, 32 * 9);
  net.params.add("conv3.bias", Tensor({32}));
  add_uniform(net.params, rng, "fc1", {kHidden, 32}, 32);
  net.params.add("fc1.bias", Tensor({kHidden}));
  add_uniform(net.params, rng, "fc2", {num_classes, kHidden}, kHidden);
  net.params.add("fc2.bias", Tensor({num_classes}));
  return net;
}

ClassifierNet ClassifierNet::constant(std::size_t leaf) {
  ClassifierNet net;
  net.num_classes = 1;
  net.class_to_leaf = {leaf};
  return net;
}

Var classifier_logits(Tape& tape, ParamSet& params, Var rois) { return logits_impl(tape, params, rois); }
Var classifier_logits(Tape& tape, const ParamSet& params, Var rois) { return logits_impl(tape, params, rois); }

Image roi_pixels(const Image& patch, const PatchSpec& spec) {
  return patch.block(static_cast<Eigen::Index>(spec.roi_offset_y()), static_cast<Eigen::Index>(spec.roi_offset_x()),
                     static_cast<Eigen::Index>(spec.roi_h), static_cast<Eigen::Index>(spec.roi_w));
}

std::vector<double> classify_probabilities(const ClassifierNet& net, const Image& roi) {
  if (net.num_classes == 1) return {1.0};
  Tape tape(false);
  const Image* p = &roi;
  Var x = tape.constant(image_batch(std::span<const Image* const>(&p, 1)));
  Var probs = softmax(classifier_logits(tape, net.params, x));
  const auto values = probs.value().values();
  return {values.begin(), values.end()};
}

std::size_t route_leaf(const ClassifierNet& net, const Image& roi) {
  if (net.num_classes == 1) return net.class_to_leaf.front();
  return net.class_to_leaf.at(argmax_first(classify_probabilities(net, roi)));
}

ErrorMatrix count_error_matrix(std::span<const RegressorNet* const> experts, std::span<const SampledPatch> patches,
                               const PatchSpec& spec) {
  ErrorMatrix errors(patches.size(), std::vector<double>(experts.size()));
  parallel_for(patches.size() * experts.size(), [&](std::size_t job) {
    const std::size_t i = job / experts.size();
    const std::size_t k = job % experts.size();
    errors[i][k] = count_error(predict_count(*experts[k], patches[i].patch.pixels, spec), patches[i].patch.count);
  });
  return errors;
}

std::vector<std::size_t> make_labels(const ErrorMatrix& errors, double tie_epsilon) {
  std::vector<std::size_t> labels;
  labels.reserve(errors.size());
  for (const auto& row : errors) labels.push_back(select_best(row, tie_epsilon));
  return labels;
}

std::vector<LabeledRoi> make_labeled_rois(std::span<const SampledPatch> patches, const std::vector<std::size_t>& labels,
                                          const PatchSpec& spec) {
  if (labels.size() != patches.size()) throw std::invalid_argument("make_labeled_rois: label count mismatch");
  std::vector<LabeledRoi> out;
  out.reserve(patches.size());
  for (std::size_t i = 0; i < patches.size(); ++i) {
    out.push_back({roi_pixels(patches[i].patch.pixels, spec), labels[i], i, 1.0});
  }
  return out;
}

BalancedSet balance(const std::vector<LabeledRoi>& labeled, std::size_t num_leaves) {
  BalancedSet out;
  out.class_counts.assign(num_leaves, 0);
  std::vector<std::vector<std::size_t>> members(num_leaves);
  for (std::size_t i = 0; i < labeled.size(); ++i) {
    if (labeled[i].label >= num_leaves) throw std::invalid_argument("balance: label outside the leaf set");
    members[labeled[i].label].push_back(i);
    ++out.class_counts[labeled[i].label];
  }
  std::size_t majority = 0;
  std::size_t reachable = 0;
  for (std::size_t k = 0; k < num_leaves; ++k) {
    majority = std::max(majority, members[k].size());
    if (members[k].empty()) {
      out.unreachable.push_back(k);
      out.warnings.push_back("expert " + std::to_string(k) + " has no samples; excluded from routing");
    } else {
      ++reachable;
    }
  }
  if (reachable == 1) out.warnings.push_back("single class; balancing is a no-op");
  out.samples = labeled;
  for (std::size_t k = 0; k < num_leaves; ++k) {
    const auto& m = members[k];
    for (std::size_t j = 0; !m.empty() && m.size() + j < majority; ++j) out.samples.push_back(labeled[m[j % m.size()]]);
  }
  return out;
}

double routing_accuracy(const ClassifierNet& net, const std::vector<LabeledRoi>& samples) {
  if (samples.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::vector<char> hit(samples.size());
  parallel_for(samples.size(), [&](std::size_t i) { hit[i] = route_leaf(net, samples[i].roi) == samples[i].label; });
  std::size_t correct = 0;
  for (char h : hit) correct += h ? 1 : 0;
  return 100.0 * static_cast<double>(correct) / static_cast<double>(samples.size());
}

ClassifierTrainResult train_classifier(const std::vector<LabeledRoi>& labeled, const std::vector<LabeledRoi>& val,
                                       std::size_t num_leaves, const OptimConfig& optim,
                                       const ClassifierTrainConfig& cfg) {
  if (labeled.empty()) throw std::invalid_argument("train_classifier: empty labeled set");
  optim.validate();
  BalancedSet balanced = balance(labeled, num_leaves);
  ClassifierTrainResult result;
  result.unreachable = balanced.unreachable;
  result.warnings = balanced.warnings;

  std::vector<std::size_t> class_to_leaf;
  std::vector<std::size_t> leaf_to_class(num_leaves, std::numeric_limits<std::size_t>::max());
  for (std::size_t k = 0; k < num_leaves; ++k) {
    if (balanced.class_counts[k] > 0) {
      leaf_to_class[k] = class_to_leaf.size();
      class_to_leaf.push_back(k);
    }
  }
  const auto& eval_set = val.empty() ? labeled : val;
  auto per_class = [&](const ClassifierNet& net) {
    std::vector<double> acc(num_leaves, std::numeric_limits<double>::quiet_NaN());
    std::vector<std::size_t> total(num_leaves, 0), correct(num_leaves, 0);
    for (const auto& s : eval_set) {
      ++total[s.label];
      correct[s.label] += route_leaf(net, s.roi) == s.label ? 1 : 0;
    }
    for (std::size_t k = 0; k < num_leaves; ++k) {
      if (total[k]) acc[k] = 100.0 * static_cast<double>(correct[k]) / static_cast<double>(total[k]);
    }
    return acc;
  };

  if (class_to_leaf.size() == 1) {
    result.net = ClassifierNet::constant(class_to_leaf.front());
    result.accuracy = routing_accuracy(result.net, eval_set);
    result.per_class_accuracy = per_class(result.net);
    result.accuracy_curve = {result.accuracy};
    return result;
  }

  ClassifierNet net = ClassifierNet::initialize(class_to_leaf.size(), derive_seed(cfg.seed, "classifier"));
  net.class_to_leaf = class_to_leaf;
  result.net = net;
  result.accuracy = routing_accuracy(net, eval_set);
  result.accuracy_curve.push_back(result.accuracy);
  Stagnation stagnation(cfg.patience);
  stagnation.observe(-result.accuracy);

  Rng rng(derive_seed(cfg.seed, "classifier-order"));
  std::vector<std::size_t> order(balanced.samples.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  for (std::size_t epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    rng.shuffle(order);
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      std::vector<const Image*> rois;
      std::vector<std::size_t> classes;
      for (std::size_t j = start; j < end; ++j) {
        const auto& s = balanced.samples[order[j]];
        rois.push_back(&s.roi);
        classes.push_back(leaf_to_class[s.label]);
      }
      Tape tape;
      Var x = tape.constant(image_batch(rois));
      Var loss = softmax_cross_entropy(classifier_logits(tape, net.params, x), classes);
      if (!std::isfinite(loss.value()[0])) {
        std::ostringstream os;
        os << "train_classifier: loss diverged in epoch " << epoch << " (lr " << optim.learning_rate << ")";
        throw std::runtime_error(os.str());
      }
      tape.backward(loss);
      sgd_step(net.params, optim);
    }
    const double acc = routing_accuracy(net, eval_set);
    result.accuracy_curve.push_back(acc);
    if (stagnation.observe(-acc)) {
      result.net = net;
      result.accuracy = acc;
    }
    if (stagnation.stalled()) break;
  }
  result.net.params.zero_grad();
  result.net.params.reset_velocity();
  result.per_class_accuracy = per_class(result.net);
  return result;
}

Router classifier_router(const ClassifierNet& net, const PatchSpec& spec) {
  return [&net, spec](const Image& patch, RoiPlacement) { return route_leaf(net, roi_pixels(patch, spec)); };
}

RoutedImage route_and_count(const Router& router, std::span<const RegressorNet* const> experts, const Image& image,
                            const PatchSpec& spec) {
  if (experts.empty()) throw std::invalid_argument("route_and_count: no experts");
  spec.validate();
  const auto rows = static_cast<std::size_t>(image.rows());
  const auto cols = static_cast<std::size_t>(image.cols());
  if (rows % kDownscale || cols % kDownscale) {
    throw std::invalid_argument("route_and_count: image extents must be divisible by 4");
  }
  RoutedImage out;
  out.placements = slide_rois(rows, cols, spec);
  out.choices.resize(out.placements.size());
  std::vector<PlacedPrediction> preds(out.placements.size());
  parallel_for(out.placements.size(), [&](std::size_t i) {
    const Image patch = extract_patch_pixels(image, out.placements[i], spec);
    const std::size_t k = router(patch, out.placements[i]);
    if (k >= experts.size()) throw std::out_of_range("route_and_count: router chose a missing expert");
    out.choices[i] = k;
    preds[i] = {out.placements[i].top / kDownscale, out.placements[i].left / kDownscale,
                predict(*experts[k], patch, spec)};
  });
  out.map = stitch_predictions(preds, rows / kDownscale, cols / kDownscale);
  out.count = out.map.sum();
  return out;
}

void save_classifier(const std::filesystem::path& dir, const ClassifierNet& net,
                     const std::vector<std::string>& leaf_addresses, double accuracy) {
  nlohmann::ordered_json manifest;
  manifest["architecture"] = ClassifierNet::kArchitecture;
  manifest["num_classes"] = net.num_classes;
  manifest["seed"] = net.seed;
  manifest["accuracy"] = accuracy;
  manifest["leaf_addresses"] = leaf_addresses;
  nlohmann::ordered_json mapping = nlohmann::ordered_json::array();
  for (std::size_t c = 0; c < net.class_to_leaf.size(); ++c) {
    mapping.push_back({{"class", c},
                       {"leaf_index", net.class_to_leaf[c]},
                       {"leaf_address", leaf_addresses.at(net.class_to_leaf[c])}});
  }
  manifest["class_mapping"] = mapping;
  save_params(dir, net.params, manifest);
}

LoadedClassifier load_classifier(const std::filesystem::path& dir) {
  auto loaded = load_params(dir);
  if (loaded.manifest.value("architecture", std::string{}) != ClassifierNet::kArchitecture) {
    throw std::runtime_error("classifier checkpoint " + dir.string() + ": architecture mismatch");
  }
  LoadedClassifier out;
  out.net.params = std::move(loaded.params);
  out.net.num_classes = loaded.manifest.at("num_classes").get<std::size_t>();
  out.net.seed = loaded.manifest.at("seed").get<std::uint64_t>();
  out.leaf_addresses = loaded.manifest.at("leaf_addresses").get<std::vector<std::string>>();
  for (const auto& m : loaded.manifest.at("class_mapping")) out.net.class_to_leaf.push_back(m.at("leaf_index").get<std::size_t>());
  return out;
}

}  // namespace crowdtree
