#include "crowdtree/density.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <stdexcept>
#include <string>

namespace crowdtree {

Tensor grid_to_tensor(const Grid<double>& grid) {
  return Tensor({static_cast<std::size_t>(grid.rows()), static_cast<std::size_t>(grid.cols())},
                std::span<const double>(grid.data(), static_cast<std::size_t>(grid.size())));
}

Grid<double> tensor_to_grid(const Tensor& t) {
  if (t.ndim() != 2) throw std::invalid_argument("expected a 2-d tensor, got " + shape_string(t.dims()));
  return Eigen::Map<const Grid<double>>(t.data(), static_cast<Eigen::Index>(t.dim(0)),
                                        static_cast<Eigen::Index>(t.dim(1)));
}

DensityMap make_density_map(const HeadPoints& points, std::size_t rows, std::size_t cols, double sigma) {
  if (!(sigma > 0.0)) throw std::invalid_argument("density map: sigma must be > 0");
  if (rows == 0 || cols == 0) throw std::invalid_argument("density map: empty shape");
  DensityMap map = DensityMap::Zero(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
  const double radius = 4.0 * sigma;
  const double inv_two_var = 1.0 / (2.0 * sigma * sigma);
  const auto h = static_cast<double>(rows);
  const auto w = static_cast<double>(cols);

  for (std::size_t i = 0; i < points.size(); ++i) {
    const auto [px, py] = points[i];
    if (!(px >= 0.0 && px <= w && py >= 0.0 && py <= h)) {
      std::ostringstream os;
      os << "density map: point " << i << " (" << px << ", " << py << ") outside " << cols << "x" << rows;
      throw std::invalid_argument(os.str());
    }
    const auto r0 = static_cast<Eigen::Index>(std::max(0.0, std::floor(py - radius - 0.5)));
    const auto r1 = static_cast<Eigen::Index>(std::min(h - 1.0, std::ceil(py + radius - 0.5)));
    const auto c0 = static_cast<Eigen::Index>(std::max(0.0, std::floor(px - radius - 0.5)));
    const auto c1 = static_cast<Eigen::Index>(std::min(w - 1.0, std::ceil(px + radius - 0.5)));

    DensityMap kernel = DensityMap::Zero(r1 - r0 + 1, c1 - c0 + 1);
    for (Eigen::Index r = r0; r <= r1; ++r) {
      const double dy = static_cast<double>(r) + 0.5 - py;
      for (Eigen::Index c = c0; c <= c1; ++c) {
        const double dx = static_cast<double>(c) + 0.5 - px;
        const double d2 = dx * dx + dy * dy;
        if (d2 <= radius * radius) kernel(r - r0, c - c0) = std::exp(-d2 * inv_two_var);
      }
    }
    const double mass = kernel.sum();
    if (mass > 0.0) {
      map.block(r0, c0, kernel.rows(), kernel.cols()) += kernel / mass;
    } else {
      const auto r = std::min<Eigen::Index>(static_cast<Eigen::Index>(py), map.rows() - 1);
      const auto c = std::min<Eigen::Index>(static_cast<Eigen::Index>(px), map.cols() - 1);
      map(r, c) += 1.0;
    }
  }
  return map;
}

void PatchSpec::validate() const {
  auto fail = [](const std::string& what) { throw std::invalid_argument("patch spec: " + what); };
  if (patch_w == 0 || patch_h == 0 || roi_w == 0 || roi_h == 0) fail("zero extent");
  if (roi_w > patch_w || roi_h > patch_h) fail("roi larger than patch");
  if (stride == 0 || stride > roi_w || stride > roi_h) fail("stride must be in (0, roi extent]");
  if (patch_w % kDownscale || patch_h % kDownscale || roi_w % kDownscale || roi_h % kDownscale) {
    fail("patch and roi extents must be divisible by 4");
  }
  if ((patch_w - roi_w) % (2 * kDownscale) || (patch_h - roi_h) % (2 * kDownscale)) {
    fail("roi offset inside the patch must be divisible by 4");
  }
  if (stride % kDownscale) fail("stride must be divisible by 4");
}

namespace {

void check_roi_inside(std::size_t rows, std::size_t cols, RoiPlacement roi, const PatchSpec& spec) {
  if (roi.top + spec.roi_h > rows || roi.left + spec.roi_w > cols) {
    throw std::invalid_argument("extract_patch: roi at (" + std::to_string(roi.top) + ", " +
                                std::to_string(roi.left) + ") not inside " + std::to_string(rows) +
                                "x" + std::to_string(cols) + " image");
  }
}

}  // namespace

Image extract_patch_pixels(const Image& image, RoiPlacement roi, const PatchSpec& spec) {
  const auto rows = static_cast<std::size_t>(image.rows());
  const auto cols = static_cast<std::size_t>(image.cols());
  check_roi_inside(rows, cols, roi, spec);
  const auto top = static_cast<std::ptrdiff_t>(roi.top) - static_cast<std::ptrdiff_t>(spec.roi_offset_y());
  const auto left = static_cast<std::ptrdiff_t>(roi.left) - static_cast<std::ptrdiff_t>(spec.roi_offset_x());
  Image patch = Image::Zero(static_cast<Eigen::Index>(spec.patch_h), static_cast<Eigen::Index>(spec.patch_w));
  // Intersection of the patch window with the image.
  const std::ptrdiff_t y0 = std::max<std::ptrdiff_t>(0, top);
  const std::ptrdiff_t x0 = std::max<std::ptrdiff_t>(0, left);
  const std::ptrdiff_t y1 = std::min<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(rows), top + static_cast<std::ptrdiff_t>(spec.patch_h));
  const std::ptrdiff_t x1 = std::min<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(cols), left + static_cast<std::ptrdiff_t>(spec.patch_w));
  if (y1 > y0 && x1 > x0) {
    patch.block(y0 - top, x0 - left, y1 - y0, x1 - x0) = image.block(y0, x0, y1 - y0, x1 - x0);
  }
  return patch;
}

Patch extract_patch(const Image& image, const DensityMap& gt, RoiPlacement roi, const PatchSpec& spec) {
  if (gt.rows() != image.rows() || gt.cols() != image.cols()) {
    throw std::invalid_argument("extract_patch: ground truth and image shapes differ");
  }
  Patch out;
  out.pixels = extract_patch_pixels(image, roi, spec);
  const auto roi_map = gt.block(static_cast<Eigen::Index>(roi.top), static_cast<Eigen::Index>(roi.left),
                                static_cast<Eigen::Index>(spec.roi_h), static_cast<Eigen::Index>(spec.roi_w));
  out.roi_gt = block_sum(roi_map, kDownscale);
  out.count = out.roi_gt.sum();
  return out;
}

std::vector<RoiPlacement> slide_rois(std::size_t rows, std::size_t cols, const PatchSpec& spec) {
  if (spec.roi_h > rows || spec.roi_w > cols) {
    throw std::invalid_argument("slide_rois: roi larger than image");
  }
  auto positions = [&](std::size_t extent, std::size_t roi) {
    std::vector<std::size_t> p;
    for (std::size_t v = 0; v + roi <= extent; v += spec.stride) p.push_back(v);
    if (p.back() + roi < extent) p.push_back(extent - roi);
    return p;
  };
  std::vector<RoiPlacement> out;
  for (std::size_t y : positions(rows, spec.roi_h)) {
    for (std::size_t x : positions(cols, spec.roi_w)) out.push_back({y, x});
  }
  return out;
}

DensityMap stitch_predictions(const std::vector<PlacedPrediction>& predictions, std::size_t rows,
                              std::size_t cols) {
  DensityMap total = DensityMap::Zero(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
  Grid<double> hits = Grid<double>::Zero(total.rows(), total.cols());
  for (const auto& p : predictions) {
    if (p.top + static_cast<std::size_t>(p.map.rows()) > rows ||
        p.left + static_cast<std::size_t>(p.map.cols()) > cols) {
      throw std::invalid_argument("stitch: prediction extends past the image");
    }
    const auto t = static_cast<Eigen::Index>(p.top);
    const auto l = static_cast<Eigen::Index>(p.left);
    total.block(t, l, p.map.rows(), p.map.cols()) += p.map;
    hits.block(t, l, p.map.rows(), p.map.cols()).array() += 1.0;
  }
  for (Eigen::Index r = 0; r < total.rows(); ++r) {
    for (Eigen::Index c = 0; c < total.cols(); ++c) {
      if (hits(r, c) == 0.0) {
        throw std::invalid_argument("stitch: cell (" + std::to_string(r) + ", " + std::to_string(c) +
                                    ") not covered by any roi");
      }
    }
  }
  return (total.array() / hits.array()).matrix();
}

FlippedPair flip_augment(const Image& patch, const DensityMap& gt) {
  return {patch.rowwise().reverse(), gt.rowwise().reverse()};
}

void save_points_csv(const std::filesystem::path& path, const HeadPoints& points) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "x,y\n" << std::fixed << std::setprecision(3);
  for (const auto& p : points) out << p.x << ',' << p.y << '\n';
}

HeadPoints load_points_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != "x,y") {
    throw std::runtime_error(path.string() + ": expected header 'x,y'");
  }
  HeadPoints points;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto comma = line.find(',');
    if (comma == std::string::npos) throw std::runtime_error(path.string() + ": malformed row '" + line + "'");
    points.push_back({std::stod(line.substr(0, comma)), std::stod(line.substr(comma + 1))});
  }
  return points;
}

}  // namespace crowdtree
