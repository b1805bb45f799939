#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace crowdtree {

/// Mean absolute count error.
double mae(std::span<const double> predicted, std::span<const double> ground_truth);
/// Root of the mean squared count error (reported under the name MSE).
double mse(std::span<const double> predicted, std::span<const double> ground_truth);

struct ExpertProfile {
  double mean = 0.0;
  double std = 0.0;  // population standard deviation
  double share = 0.0;
  std::size_t n = 0;
  bool empty = false;  // no patches assigned: mean and std are NaN
};

/// Per-expert mean/std of ground-truth counts over the patches assigned to it.
std::vector<ExpertProfile> specialty_profile(std::span<const std::size_t> assignment,
                                             std::span<const double> gt_counts, std::size_t num_experts);

/// |mean_a - mean_b| / pooled population std. Infinite when both groups are constant.
double mean_separation(const ExpertProfile& a, const ExpertProfile& b);

struct LevelReport {
  std::size_t level = 0;
  std::size_t n_experts = 1;
  double oracle_mae = 0.0;
  double actual_mae = 0.0;
  double classifier_accuracy = 100.0;  // percent
  double train_oracle_mae = 0.0;
  std::vector<std::string> leaves;
  std::vector<double> shares;
  std::vector<ExpertProfile> profile;

  /// Throws std::logic_error unless oracle <= actual and shares sum to 1.
  void check() const;
  double min_share() const;
};

std::string table4_csv(const std::vector<LevelReport>& reports);

struct MethodRow {
  std::string method;
  std::optional<double> oracle_mae;  // undefined for soft mixtures
  double actual_mae = 0.0;
  double image_mae = 0.0;
  double image_mse = 0.0;
  /// Throws std::logic_error when image_mse < image_mae (beyond rounding).
  void check() const;
};
std::string table5_csv(const std::vector<MethodRow>& rows);

std::string profile_csv(const std::vector<ExpertProfile>& profile, const std::vector<std::string>& experts);

/// Shortest round-trip decimal form of a double.
std::string format_double(double v);

}  // namespace crowdtree
