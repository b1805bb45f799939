#include "crowdtree/regressor.hpp"

#include "crowdtree/checkpoint.hpp"
#include "crowdtree/parallel.hpp"
#include "crowdtree/random.hpp"
#include "crowdtree/stagnation.hpp"

#include <array>
#include <cmath>
#include <sstream>
#include <stdexcept>

namespace crowdtree {

namespace {

struct ConvLayer {
  const char* name;
  std::size_t in, out, kernel;
};

constexpr std::array<ConvLayer, 5> kLayers = {{
    {"conv1", 1, 16, 9},
    {"conv2", 16, 32, 7},
    {"conv3", 32, 16, 7},
    {"conv4", 16, 8, 7},
    {"conv5", 8, 1, 1},
}};

template <typename Params>
Var forward_impl(Tape& tape, Params& params, Var input) {
  auto conv = [&](Var h, const ConvLayer& layer) {
    const std::string name = layer.name;
    return relu(conv2d(h, tape.param(params.at(name + ".weight")), tape.param(params.at(name + ".bias"))));
  };
  Var h = conv(input, kLayers[0]);
  h = maxpool2(h);
  h = conv(h, kLayers[1]);
  h = maxpool2(h);
  h = conv(h, kLayers[2]);
  h = conv(h, kLayers[3]);
  return conv(h, kLayers[4]);
}

void check_patch(const Image& patch, const PatchSpec& spec) {
  if (patch.rows() % 4 || patch.cols() % 4) {
    throw std::invalid_argument("regressor: patch extents must be divisible by 4, got " +
                                std::to_string(patch.rows()) + "x" + std::to_string(patch.cols()));
  }
  if (static_cast<std::size_t>(patch.rows()) != spec.patch_h || static_cast<std::size_t>(patch.cols()) != spec.patch_w) {
    throw std::invalid_argument("regressor: patch is " + std::to_string(patch.rows()) + "x" +
                                std::to_string(patch.cols()) + ", spec expects " + std::to_string(spec.patch_h) +
                                "x" + std::to_string(spec.patch_w));
  }
}

DensityMap to_map(const Tensor& t, std::size_t sample) {
  const std::size_t h = t.dim(2), w = t.dim(3);
  return Eigen::Map<const DensityMap>(t.data() + sample * h * w, static_cast<Eigen::Index>(h),
                                      static_cast<Eigen::Index>(w));
}

Tensor map_batch(std::span<const DensityMap* const> maps) {
  const auto h = static_cast<std::size_t>(maps.front()->rows());
  const auto w = static_cast<std::size_t>(maps.front()->cols());
  Tensor out({maps.size(), 1, h, w});
  for (std::size_t s = 0; s < maps.size(); ++s) {
    std::copy(maps[s]->data(), maps[s]->data() + h * w, out.data() + s * h * w);
  }
  return out;
}

}  // namespace

RegressorNet RegressorNet::initialize(std::uint64_t seed) {
  RegressorNet net;
  net.seed = seed;
  Rng rng(derive_seed(seed, "regressor-init"));
  for (const auto& layer : kLayers) {
    const std::size_t fan_in = layer.in * layer.kernel * layer.kernel;
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    // The output layer reads ReLU features; a nonnegative draw keeps it alive at init.
    const double lo = &layer == &kLayers.back() ? 0.0 : -bound;
    Tensor w({layer.out, layer.in, layer.kernel, layer.kernel});
    for (double& v : w.values()) v = rng.uniform(lo, bound);
    net.params.add(std::string(layer.name) + ".weight", std::move(w));
    net.params.add(std::string(layer.name) + ".bias", Tensor({layer.out}));
  }
  return net;
}

Var regressor_forward(Tape& tape, ParamSet& params, Var input) { return forward_impl(tape, params, input); }
Var regressor_forward(Tape& tape, const ParamSet& params, Var input) { return forward_impl(tape, params, input); }

Tensor image_batch(std::span<const Image* const> images) {
  if (images.empty()) throw std::invalid_argument("image_batch: empty batch");
  const auto h = static_cast<std::size_t>(images.front()->rows());
  const auto w = static_cast<std::size_t>(images.front()->cols());
  Tensor out({images.size(), 1, h, w});
  for (std::size_t s = 0; s < images.size(); ++s) {
    if (static_cast<std::size_t>(images[s]->rows()) != h || static_cast<std::size_t>(images[s]->cols()) != w) {
      throw std::invalid_argument("image_batch: images differ in shape");
    }
    std::copy(images[s]->data(), images[s]->data() + h * w, out.data() + s * h * w);
  }
  return out;
}

Var crop_roi(Var full_map, const PatchSpec& spec) {
  return crop(full_map, spec.roi_offset_y() / kDownscale, spec.roi_offset_x() / kDownscale,
              spec.roi_h / kDownscale, spec.roi_w / kDownscale);
}

std::vector<DensityMap> predict_batch(const RegressorNet& net, std::span<const Image* const> patches,
                                      const PatchSpec& spec) {
  for (const Image* p : patches) check_patch(*p, spec);
  Tape tape(false);
  Var x = tape.constant(image_batch(patches));
  Var roi = crop_roi(regressor_forward(tape, net.params, x), spec);
  std::vector<DensityMap> out;
  out.reserve(patches.size());
  for (std::size_t s = 0; s < patches.size(); ++s) out.push_back(to_map(roi.value(), s));
  return out;
}

DensityMap predict(const RegressorNet& net, const Image& patch, const PatchSpec& spec) {
  const Image* p = &patch;
  return predict_batch(net, std::span<const Image* const>(&p, 1), spec).front();
}

double predict_count(const RegressorNet& net, const Image& patch, const PatchSpec& spec) {
  return predict(net, patch, spec).sum();
}

void LossConfig::validate() const {
  if (!(lambda > 0.0)) throw std::invalid_argument("loss: lambda must be > 0");
}

namespace {
void check_pairs(std::span<const DensityMap> a, std::span<const DensityMap> b, const char* op) {
  if (a.size() != b.size() || a.empty()) {
    throw std::invalid_argument(std::string(op) + ": " + std::to_string(a.size()) + " predictions vs " +
                                std::to_string(b.size()) + " ground truths");
  }
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].rows() != b[i].rows() || a[i].cols() != b[i].cols()) {
      throw std::invalid_argument(std::string(op) + ": shape mismatch at sample " + std::to_string(i));
    }
  }
}
}  // namespace

double l2_loss(std::span<const DensityMap> predictions, std::span<const DensityMap> ground_truths) {
  check_pairs(predictions, ground_truths, "l2_loss");
  double total = 0.0;
  for (std::size_t i = 0; i < predictions.size(); ++i) total += (predictions[i] - ground_truths[i]).squaredNorm();
  return total / (2.0 * static_cast<double>(predictions.size()));
}

double count_loss(std::span<const DensityMap> predictions, std::span<const DensityMap> ground_truths,
                  const LossConfig& cfg) {
  cfg.validate();
  check_pairs(predictions, ground_truths, "count_loss");
  double total = 0.0;
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    const double d = predictions[i].sum() - ground_truths[i].sum();
    total += d * d;
  }
  return cfg.lambda * total / (2.0 * static_cast<double>(predictions.size()));
}

double patch_mae(const RegressorNet& net, std::span<const SampledPatch> patches, const PatchSpec& spec) {
  if (patches.empty()) throw std::invalid_argument("patch_mae: empty patch set");
  std::vector<double> err(patches.size());
  parallel_for(patches.size(), [&](std::size_t i) {
    err[i] = std::abs(predict_count(net, patches[i].patch.pixels, spec) - patches[i].patch.count);
  });
  double total = 0.0;
  for (double e : err) total += e;
  return total / static_cast<double>(patches.size());
}

double l2_step(RegressorNet& net, std::span<const Patch* const> batch, const std::vector<bool>& flips,
               const PatchSpec& spec, const OptimConfig& optim) {
  std::vector<Image> images;
  std::vector<DensityMap> gts;
  images.reserve(batch.size());
  gts.reserve(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) {
    check_patch(batch[i]->pixels, spec);
    if (!flips.empty() && flips[i]) {
      auto f = flip_augment(batch[i]->pixels, batch[i]->roi_gt);
      images.push_back(std::move(f.patch));
      gts.push_back(std::move(f.gt));
    } else {
      images.push_back(batch[i]->pixels);
      gts.push_back(batch[i]->roi_gt);
    }
  }
  std::vector<const Image*> image_ptrs;
  std::vector<const DensityMap*> gt_ptrs;
  for (std::size_t i = 0; i < images.size(); ++i) {
    image_ptrs.push_back(&images[i]);
    gt_ptrs.push_back(&gts[i]);
  }
  Tape tape;
  Var x = tape.constant(image_batch(image_ptrs));
  Var roi = crop_roi(regressor_forward(tape, net.params, x), spec);
  Var loss = crowdtree::l2_loss(roi, map_batch(gt_ptrs));
  const double value = loss.value()[0];
  tape.backward(loss);
  sgd_step(net.params, optim);
  return value;
}

double count_step(RegressorNet& net, std::span<const Patch* const> batch, const PatchSpec& spec,
                  const OptimConfig& optim, const LossConfig& loss_cfg) {
  std::vector<const Image*> image_ptrs;
  std::vector<double> counts;
  for (const Patch* p : batch) {
    check_patch(p->pixels, spec);
    image_ptrs.push_back(&p->pixels);
    counts.push_back(p->count);
  }
  Tape tape;
  Var x = tape.constant(image_batch(image_ptrs));
  Var roi = crop_roi(regressor_forward(tape, net.params, x), spec);
  Var loss = crowdtree::count_loss(roi, counts, loss_cfg.lambda);
  const double value = loss.value()[0];
  tape.backward(loss);
  sgd_step(net.params, optim);
  return value;
}

PretrainResult pretrain(const RegressorNet& init, std::span<const SampledPatch> train,
                        std::span<const SampledPatch> val, const PatchSpec& spec, const OptimConfig& optim,
                        const PretrainConfig& cfg) {
  if (train.empty()) throw std::invalid_argument("pretrain: empty training set");
  optim.validate();
  if (val.empty()) val = train;
  RegressorNet net = init;
  net.params.zero_grad();
  net.params.reset_velocity();

  PretrainResult result;
  result.net = net;
  result.best_val_mae = patch_mae(net, val, spec);
  result.curve.push_back({0, 0.0, result.best_val_mae});
  Stagnation stagnation(cfg.patience);
  stagnation.observe(result.best_val_mae);

  Rng rng(derive_seed(cfg.seed, "pretrain"));
  double loss_sum = 0.0;
  std::size_t loss_n = 0;
  std::vector<const Patch*> batch(cfg.batch_size);
  std::vector<bool> flips(cfg.batch_size);
  for (std::size_t step = 1; step <= cfg.max_steps; ++step) {
    for (std::size_t b = 0; b < cfg.batch_size; ++b) {
      batch[b] = &train[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(train.size()) - 1))].patch;
      flips[b] = rng.bernoulli(cfg.flip_probability);
    }
    const double loss = l2_step(net, batch, flips, spec, optim);
    if (!std::isfinite(loss) || !net.params.all_finite()) {
      std::ostringstream os;
      os << "pretrain: loss diverged at step " << step << " (loss " << loss << ", lr " << optim.learning_rate << ")";
      throw std::runtime_error(os.str());
    }
    loss_sum += loss;
    ++loss_n;
    if (step % cfg.eval_every == 0 || step == cfg.max_steps) {
      const double val_mae = patch_mae(net, val, spec);
      result.curve.push_back({step, loss_sum / static_cast<double>(loss_n), val_mae});
      loss_sum = 0.0;
      loss_n = 0;
      if (stagnation.observe(val_mae)) {
        result.net = net;
        result.best_step = step;
        result.best_val_mae = val_mae;
      }
      if (stagnation.stalled()) break;
    }
  }
  result.net.params.zero_grad();
  result.net.params.reset_velocity();
  return result;
}

void save_regressor(const std::filesystem::path& dir, const RegressorNet& net, const RegressorCheckpointInfo& info) {
  nlohmann::ordered_json manifest;
  manifest["architecture"] = RegressorNet::kArchitecture;
  manifest["method"] = info.method;
  manifest["seed"] = net.seed;
  manifest["step"] = info.step;
  manifest["val_mae"] = info.val_mae;
  save_params(dir, net.params, manifest);
}

RegressorNet load_regressor(const std::filesystem::path& dir) {
  auto loaded = load_params(dir);
  if (loaded.manifest.value("architecture", std::string{}) != RegressorNet::kArchitecture) {
    throw std::runtime_error("regressor checkpoint " + dir.string() + ": architecture mismatch");
  }
  RegressorNet net;
  net.params = std::move(loaded.params);
  net.seed = loaded.manifest.at("seed").get<std::uint64_t>();
  return net;
}

}  // namespace crowdtree
