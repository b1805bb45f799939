#pragma once

#include "crowdtree/optim.hpp"
#include "crowdtree/tensor.hpp"

#include <cstddef>
#include <deque>
#include <functional>
#include <span>
#include <vector>

namespace crowdtree {

class Tape;

/// Handle to a value recorded on a Tape.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  const Tensor& value() const;
  const Shape& dims() const { return value().dims(); }

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Reverse-mode tape, rebuilt for every forward pass. A tape created with
/// `record = false` keeps no backward closures and is used for inference.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, Var self)>;

  explicit Tape(bool record = true) : record_(record) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return record_; }

  Var constant(Tensor value);
  /// Trainable leaf. Its gradient is added to `entry.grad` by backward().
  Var param(ParamEntry& entry);
  /// Frozen leaf referencing `entry.value` without copying; no gradient.
  Var param(const ParamEntry& entry);

  const Tensor& value(Var v) const;
  /// Gradient buffer of a node, allocated (zeroed) on first use.
  Tensor& grad(Var v);
  bool has_grad(Var v) const;

  /// Accumulates d(loss)/d(param) into every trainable leaf reachable from `loss`.
  void backward(Var loss);

  Var push(Tensor value, BackwardFn fn);

 private:
  struct Node {
    Tensor owned;
    const Tensor* ref = nullptr;
    ParamEntry* sink = nullptr;
    Tensor grad;
    BackwardFn backward;
  };

  bool record_;
  std::deque<Node> nodes_;
};

// Forward ops. Layout is NCHW for images, [N, F] for feature rows.
Var conv2d(Var input, Var weights, Var bias);
Var maxpool2(Var input);
Var relu(Var input);
Var fully_connected(Var input, Var weights, Var bias);
Var global_avg_pool(Var input);
Var softmax(Var input);
/// Spatial crop [y0, y0+h) x [x0, x0+w) of every channel.
Var crop(Var input, std::size_t y0, std::size_t x0, std::size_t h, std::size_t w);
/// Horizontal mirror of every channel.
Var flip_horizontal(Var input);
/// Per-sample sum over C, H, W: [N, ...] -> [N].
Var sum_per_sample(Var input);
Var sum(Var input);
/// Inner product with a constant tensor of equal shape.
Var dot_constant(Var input, const Tensor& weights);
/// out[n] = sum_k gate[n, k] * experts[k][n]; every expert map has the same dims.
Var mix(std::span<const Var> experts, Var gate);

// Losses (scalars).
/// (1/2N) sum_i ||pred_i - gt_i||^2, N = leading extent.
Var l2_loss(Var pred, const Tensor& gt);
/// (lambda/2N) sum_i (sum(pred_i) - gt_count_i)^2.
Var count_loss(Var pred, std::span<const double> gt_counts, double lambda);
/// Mean softmax cross-entropy of logits [N, K] against class labels.
Var softmax_cross_entropy(Var logits, std::span<const std::size_t> labels);

}  // namespace crowdtree
