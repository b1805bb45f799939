#include "crowdtree/selection.hpp"

#include <algorithm>
#include <stdexcept>

namespace crowdtree {

std::size_t select_best(std::span<const double> errors, double tie_epsilon) {
  if (errors.empty()) throw std::invalid_argument("select_best: no candidates");
  const double best = *std::min_element(errors.begin(), errors.end());
  for (std::size_t k = 0; k < errors.size(); ++k) {
    if (errors[k] <= best + tie_epsilon) return k;
  }
  return 0;
}

double oracle_mae(const std::vector<std::vector<double>>& errors) {
  if (errors.empty()) throw std::invalid_argument("oracle_mae: empty patch set");
  double total = 0.0;
  for (const auto& row : errors) {
    if (row.empty()) throw std::invalid_argument("oracle_mae: no experts");
    total += *std::min_element(row.begin(), row.end());
  }
  return total / static_cast<double>(errors.size());
}

}  // namespace crowdtree
