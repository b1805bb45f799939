#pragma once

#include "crowdtree/tensor.hpp"

#include <map>
#include <string>
#include <vector>

namespace crowdtree {

struct ParamEntry {
  Tensor value;
  Tensor grad;
  Tensor velocity;

  explicit ParamEntry(Tensor init)
      : value(std::move(init)), grad(Tensor::zeros_like(value)), velocity(Tensor::zeros_like(value)) {}
};

/// Named trainable parameters. Copying a ParamSet deep-copies every entry.
class ParamSet {
 public:
  using Map = std::map<std::string, ParamEntry>;

  ParamEntry& add(const std::string& name, Tensor init);
  ParamEntry& at(const std::string& name);
  const ParamEntry& at(const std::string& name) const;
  bool contains(const std::string& name) const { return entries_.count(name) != 0; }

  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  std::size_t parameter_count() const;

  Map::iterator begin() { return entries_.begin(); }
  Map::iterator end() { return entries_.end(); }
  Map::const_iterator begin() const { return entries_.begin(); }
  Map::const_iterator end() const { return entries_.end(); }

  void zero_grad();
  void reset_velocity();
  bool values_equal(const ParamSet& other) const;
  bool all_finite() const;

 private:
  Map entries_;
};

struct OptimConfig {
  double learning_rate = 1e-4;
  double momentum = 0.9;
  double weight_decay = 0.0;

  void validate() const;
};

/// v <- momentum * v + (grad + weight_decay * value); value <- value - lr * v.
/// Gradients are zeroed afterwards.
void sgd_step(ParamSet& params, const OptimConfig& cfg);

}  // namespace crowdtree
