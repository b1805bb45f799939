#pragma once

#include <cmath>
#include <cstddef>
#include <limits>

namespace crowdtree {

/// Tracks a minimized metric. A value counts as progress only when it beats
/// the best so far by more than `rel_tol` (relative); `stalled()` turns true
/// after `patience` consecutive observations without progress.
class Stagnation {
 public:
  explicit Stagnation(std::size_t patience, double rel_tol = 0.005) : patience_(patience), rel_tol_(rel_tol) {}

  /// Returns true when `value` is a new strict minimum.
  bool observe(double value) {
    const bool progress = !seen_ || value < best_ - rel_tol_ * std::abs(best_);
    const bool new_best = !seen_ || value < best_;
    if (new_best) best_ = value;
    seen_ = true;
    since_progress_ = progress ? 0 : since_progress_ + 1;
    return new_best;
  }

  bool stalled() const { return since_progress_ >= patience_; }
  double best() const { return best_; }
  std::size_t since_progress() const { return since_progress_; }

 private:
  std::size_t patience_;
  double rel_tol_;
  bool seen_ = false;
  double best_ = std::numeric_limits<double>::infinity();
  std::size_t since_progress_ = 0;
};

}  // namespace crowdtree
