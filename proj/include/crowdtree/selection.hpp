#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace crowdtree {

/// |predicted - ground truth|.
inline double count_error(double predicted, double ground_truth) {
  const double d = predicted - ground_truth;
  return d < 0.0 ? -d : d;
}

/// Index of the best expert: the lowest index whose error is within
/// `tie_epsilon` of the minimum, so exact ties go to the first expert.
std::size_t select_best(std::span<const double> errors, double tie_epsilon = 0.0);
inline std::size_t select_best(double e0, double e1, double tie_epsilon = 0.0) {
  const double pair[2] = {e0, e1};
  return select_best(std::span<const double>(pair, 2), tie_epsilon);
}

/// Mean over rows of the row minimum. Rows are patches, columns experts.
double oracle_mae(const std::vector<std::vector<double>>& errors);

}  // namespace crowdtree
