#include "crowdtree/optim.hpp"

#include <stdexcept>

namespace crowdtree {

ParamEntry& ParamSet::add(const std::string& name, Tensor init) {
  auto [it, inserted] = entries_.emplace(name, ParamEntry(std::move(init)));
  if (!inserted) throw std::invalid_argument("param set: duplicate entry '" + name + "'");
  return it->second;
}

ParamEntry& ParamSet::at(const std::string& name) {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw std::out_of_range("param set: no entry '" + name + "'");
  return it->second;
}

const ParamEntry& ParamSet::at(const std::string& name) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw std::out_of_range("param set: no entry '" + name + "'");
  return it->second;
}

std::size_t ParamSet::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [_, e] : entries_) n += e.value.size();
  return n;
}

void ParamSet::zero_grad() {
  for (auto& [_, e] : entries_) e.grad.vec().setZero();
}

void ParamSet::reset_velocity() {
  for (auto& [_, e] : entries_) e.velocity.vec().setZero();
}

bool ParamSet::values_equal(const ParamSet& other) const {
  if (entries_.size() != other.entries_.size()) return false;
  auto a = entries_.begin();
  auto b = other.entries_.begin();
  for (; a != entries_.end(); ++a, ++b) {
    if (a->first != b->first || !(a->second.value == b->second.value)) return false;
  }
  return true;
}

bool ParamSet::all_finite() const {
  for (const auto& [_, e] : entries_) {
    if (!e.value.all_finite()) return false;
  }
  return true;
}

void OptimConfig::validate() const {
  if (!(learning_rate > 0.0)) throw std::invalid_argument("optim: learning_rate must be > 0");
  if (!(momentum >= 0.0 && momentum < 1.0)) {
    throw std::invalid_argument("optim: momentum must be in [0, 1)");
  }
  if (!(weight_decay >= 0.0)) throw std::invalid_argument("optim: weight_decay must be >= 0");
}

void sgd_step(ParamSet& params, const OptimConfig& cfg) {
  for (auto& [_, e] : params) {
    auto& v = e.velocity.vec();
    if (cfg.weight_decay > 0.0) {
      v = cfg.momentum * v + e.grad.vec() + cfg.weight_decay * e.value.vec();
    } else {
      v = cfg.momentum * v + e.grad.vec();
    }
    e.value.vec() -= cfg.learning_rate * v;
    e.grad.vec().setZero();
  }
}

}  // namespace crowdtree
