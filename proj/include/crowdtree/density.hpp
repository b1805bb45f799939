#pragma once

#include "crowdtree/tensor.hpp"

#include <Eigen/Core>

#include <cstddef>
#include <filesystem>
#include <vector>

namespace crowdtree {

template <typename Scalar>
using Grid = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Grayscale image, row-major, intensities in [0, 1].
using Image = Grid<double>;
/// Non-negative per-cell person mass; its sum is the count of the region.
using DensityMap = Grid<double>;

struct HeadPoint {
  double x = 0.0;  // column coordinate, pixel units
  double y = 0.0;  // row coordinate, pixel units
  friend bool operator==(const HeadPoint&, const HeadPoint&) = default;
};
using HeadPoints = std::vector<HeadPoint>;

/// Bridges between 2-d grids and [rows, cols] tensors (archive format).
Tensor grid_to_tensor(const Grid<double>& grid);
Grid<double> tensor_to_grid(const Tensor& t);

/// Output maps of the regressors are at 1/4 of the input resolution.
inline constexpr std::size_t kDownscale = 4;

/// Sum of a truncated Gaussian (4 sigma, renormalized to unit in-image mass)
/// placed at every head point. Pixel (r, c) has its center at (c + 0.5, r + 0.5).
DensityMap make_density_map(const HeadPoints& points, std::size_t rows, std::size_t cols, double sigma);

/// Sums non-overlapping factor x factor blocks; extents must be divisible.
template <typename Derived>
Grid<typename Derived::Scalar> block_sum(const Eigen::MatrixBase<Derived>& map, std::size_t factor) {
  using Scalar = typename Derived::Scalar;
  const auto f = static_cast<Eigen::Index>(factor);
  Grid<Scalar> out = Grid<Scalar>::Zero(map.rows() / f, map.cols() / f);
  for (Eigen::Index r = 0; r < out.rows(); ++r) {
    for (Eigen::Index c = 0; c < out.cols(); ++c) {
      out(r, c) = map.block(r * f, c * f, f, f).sum();
    }
  }
  return out;
}

struct PatchSpec {
  std::size_t patch_w = 64;
  std::size_t patch_h = 64;
  std::size_t roi_w = 32;
  std::size_t roi_h = 32;
  std::size_t stride = 16;

  void validate() const;
  /// Offset of the RoI inside its patch, pixels.
  std::size_t roi_offset_y() const { return (patch_h - roi_h) / 2; }
  std::size_t roi_offset_x() const { return (patch_w - roi_w) / 2; }
};

/// Top-left corner of an RoI in image pixel coordinates.
struct RoiPlacement {
  std::size_t top = 0;
  std::size_t left = 0;
  friend bool operator==(const RoiPlacement&, const RoiPlacement&) = default;
};

struct Patch {
  Image pixels;         // patch_h x patch_w, zero outside the image
  DensityMap roi_gt;    // (roi_h/4) x (roi_w/4), block-summed ground truth
  double count = 0.0;   // ground-truth count inside the RoI
};

Patch extract_patch(const Image& image, const DensityMap& gt, RoiPlacement roi, const PatchSpec& spec);

/// Patch pixels only (used at test time where no ground truth is consulted).
Image extract_patch_pixels(const Image& image, RoiPlacement roi, const PatchSpec& spec);

/// RoI placements sliding over the image with `spec.stride`; the last row and
/// column are clamped flush with the border so every pixel is covered.
std::vector<RoiPlacement> slide_rois(std::size_t rows, std::size_t cols, const PatchSpec& spec);

struct PlacedPrediction {
  std::size_t top = 0;   // map cells
  std::size_t left = 0;  // map cells
  DensityMap map;
};

/// Cellwise mean of all predictions covering each cell.
DensityMap stitch_predictions(const std::vector<PlacedPrediction>& predictions, std::size_t rows,
                              std::size_t cols);

struct FlippedPair {
  Image patch;
  DensityMap gt;
};
FlippedPair flip_augment(const Image& patch, const DensityMap& gt);

/// CSV with header "x,y" and 3-decimal coordinates.
void save_points_csv(const std::filesystem::path& path, const HeadPoints& points);
HeadPoints load_points_csv(const std::filesystem::path& path);

}  // namespace crowdtree
