#include "crowdtree/metrics.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <limits>
#include <sstream>
#include <stdexcept>

namespace crowdtree {

namespace {

void check_pair(std::span<const double> p, std::span<const double> g, const char* name) {
  if (p.empty()) throw std::invalid_argument(std::string(name) + ": empty input");
  if (p.size() != g.size()) {
    throw std::invalid_argument(std::string(name) + ": " + std::to_string(p.size()) + " predictions vs " +
                                std::to_string(g.size()) + " ground truths");
  }
}

}  // namespace

double mae(std::span<const double> predicted, std::span<const double> ground_truth) {
  check_pair(predicted, ground_truth, "mae");
  double s = 0.0;
  for (std::size_t i = 0; i < predicted.size(); ++i) s += std::abs(predicted[i] - ground_truth[i]);
  return s / static_cast<double>(predicted.size());
}

double mse(std::span<const double> predicted, std::span<const double> ground_truth) {
  check_pair(predicted, ground_truth, "mse");
  double s = 0.0;
  for (std::size_t i = 0; i < predicted.size(); ++i) {
    const double d = predicted[i] - ground_truth[i];
    s += d * d;
  }
  return std::sqrt(s / static_cast<double>(predicted.size()));
}

std::vector<ExpertProfile> specialty_profile(std::span<const std::size_t> assignment,
                                             std::span<const double> gt_counts, std::size_t num_experts) {
  if (assignment.empty()) throw std::invalid_argument("specialty_profile: empty assignment");
  if (assignment.size() != gt_counts.size()) throw std::invalid_argument("specialty_profile: length mismatch");
  std::vector<ExpertProfile> out(num_experts);
  std::vector<double> sum(num_experts, 0.0);
  for (std::size_t i = 0; i < assignment.size(); ++i) {
    if (assignment[i] >= num_experts) {
      throw std::invalid_argument("specialty_profile: expert " + std::to_string(assignment[i]) + " out of range");
    }
    ++out[assignment[i]].n;
    sum[assignment[i]] += gt_counts[i];
  }
  for (std::size_t k = 0; k < num_experts; ++k) {
    if (out[k].n == 0) {
      out[k].mean = out[k].std = std::numeric_limits<double>::quiet_NaN();
      out[k].empty = true;
    } else {
      out[k].mean = sum[k] / static_cast<double>(out[k].n);
    }
    out[k].share = static_cast<double>(out[k].n) / static_cast<double>(assignment.size());
  }
  std::vector<double> sq(num_experts, 0.0);
  for (std::size_t i = 0; i < assignment.size(); ++i) {
    const double d = gt_counts[i] - out[assignment[i]].mean;
    sq[assignment[i]] += d * d;
  }
  for (std::size_t k = 0; k < num_experts; ++k) {
    if (out[k].n) out[k].std = std::sqrt(sq[k] / static_cast<double>(out[k].n));
  }
  return out;
}

double mean_separation(const ExpertProfile& a, const ExpertProfile& b) {
  if (a.empty || b.empty) return std::numeric_limits<double>::quiet_NaN();
  const double na = static_cast<double>(a.n), nb = static_cast<double>(b.n);
  const double pooled = std::sqrt((na * a.std * a.std + nb * b.std * b.std) / (na + nb));
  const double gap = std::abs(a.mean - b.mean);
  if (pooled == 0.0) return gap == 0.0 ? 0.0 : std::numeric_limits<double>::infinity();
  return gap / pooled;
}

void LevelReport::check() const {
  if (!(oracle_mae <= actual_mae)) {
    std::ostringstream os;
    os << "level " << level << " report: oracle MAE " << format_double(oracle_mae) << " exceeds actual MAE "
       << format_double(actual_mae);
    throw std::logic_error(os.str());
  }
  double total = 0.0;
  for (double s : shares) total += s;
  if (!shares.empty() && std::abs(total - 1.0) > 1e-9) {
    throw std::logic_error("level " + std::to_string(level) + " report: shares sum to " + format_double(total));
  }
}

double LevelReport::min_share() const {
  double m = 1.0;
  for (double s : shares) m = std::min(m, s);
  return m;
}

std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return {buf, res.ptr};
}

std::string table4_csv(const std::vector<LevelReport>& reports) {
  std::ostringstream os;
  os << "level,n_experts,oracle_mae,actual_mae,classifier_accuracy,min_leaf_share\n";
  for (const auto& r : reports) {
    os << r.level << ',' << r.n_experts << ',' << format_double(r.oracle_mae) << ',' << format_double(r.actual_mae)
       << ',' << format_double(r.classifier_accuracy) << ',' << format_double(r.min_share()) << '\n';
  }
  return os.str();
}

void MethodRow::check() const {
  if (image_mse < image_mae * (1.0 - 1e-12)) {
    throw std::logic_error("method " + method + ": image MSE " + format_double(image_mse) + " below image MAE " +
                           format_double(image_mae));
  }
}

std::string table5_csv(const std::vector<MethodRow>& rows) {
  std::ostringstream os;
  os << "method,oracle_mae,actual_mae,image_mae,image_mse\n";
  for (const auto& r : rows) {
    r.check();
    os << r.method << ',' << (r.oracle_mae ? format_double(*r.oracle_mae) : std::string{}) << ','
       << format_double(r.actual_mae) << ',' << format_double(r.image_mae) << ',' << format_double(r.image_mse)
       << '\n';
  }
  return os.str();
}

std::string profile_csv(const std::vector<ExpertProfile>& profile, const std::vector<std::string>& experts) {
  if (experts.size() != profile.size()) throw std::invalid_argument("profile_csv: name count mismatch");
  std::ostringstream os;
  os << "expert,n,mean,std,share,empty\n";
  for (std::size_t k = 0; k < profile.size(); ++k) {
    const auto& p = profile[k];
    os << (experts[k].empty() ? "root" : experts[k]) << ',' << p.n << ',' << format_double(p.mean) << ','
       << format_double(p.std) << ',' << format_double(p.share) << ',' << (p.empty ? 1 : 0) << '\n';
  }
  return os.str();
}

}  // namespace crowdtree
