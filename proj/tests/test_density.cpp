#include "support/fixtures.hpp"

#include "crowdtree/density.hpp"
#include "crowdtree/random.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace crowdtree;

TEST(DensityMap, EmptyPointsGiveZeroMap) {
  const DensityMap m = make_density_map({}, 16, 16, 2.0);
  EXPECT_EQ(m.sum(), 0.0);
}

TEST(DensityMap, SinglePointSumsToOne) {
  const DensityMap m = make_density_map({{32.0, 32.0}}, 64, 64, 2.0);
  EXPECT_NEAR(m.sum(), 1.0, 1e-6);
  EXPECT_GE(m.minCoeff(), 0.0);
  Eigen::Index r, c;
  m.maxCoeff(&r, &c);
  EXPECT_TRUE((r == 31 || r == 32) && (c == 31 || c == 32));
}

TEST(DensityMap, CornerPointsRenormalized) {
  const HeadPoints pts{{0.0, 0.0}, {63.9, 63.9}, {0.2, 63.5}, {10, 10}, {20, 40}, {50, 5}, {32, 32}};
  const DensityMap m = make_density_map(pts, 64, 64, 2.0);
  EXPECT_NEAR(m.sum(), 7.0, 7e-6);
}

TEST(DensityMap, RandomSetsConserveMass) {
  Rng rng(17);
  for (int t = 0; t < 100; ++t) {
    HeadPoints pts(static_cast<std::size_t>(rng.uniform_int(1, 40)));
    for (auto& p : pts) p = {rng.uniform(0.0, 48.0), rng.uniform(0.0, 32.0)};
    const DensityMap m = make_density_map(pts, 32, 48, rng.uniform(0.5, 4.0));
    EXPECT_LE(std::abs(m.sum() - static_cast<double>(pts.size())), 1e-6 * static_cast<double>(pts.size()));
  }
}

TEST(DensityMap, RejectsBadInput) {
  EXPECT_THROW(make_density_map({{1, 1}}, 8, 8, 0.0), std::invalid_argument);
  EXPECT_THROW(make_density_map({{9, 1}}, 8, 8, 1.0), std::invalid_argument);
  EXPECT_THROW(make_density_map({{std::nan(""), 1}}, 8, 8, 1.0), std::invalid_argument);
}

TEST(BlockSum, PreservesTotal) {
  Rng rng(2);
  DensityMap m(8, 12);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform();
  const DensityMap b = block_sum(m, 4);
  EXPECT_EQ(b.rows(), 2);
  EXPECT_EQ(b.cols(), 3);
  EXPECT_NEAR(b.sum(), m.sum(), 1e-12);
  EXPECT_DOUBLE_EQ(b(1, 2), m.block(4, 8, 4, 4).sum());
}

TEST(ExtractPatch, EmptyRegionHasZeroCount) {
  const DensityMap gt = make_density_map({{100.0, 100.0}}, 128, 128, 2.0);
  const Patch p = extract_patch(Image::Zero(128, 128), gt, {0, 0}, PatchSpec{});
  EXPECT_EQ(p.count, 0.0);
}

TEST(ExtractPatch, UniformMapCount) {
  const double v = 0.0137;
  const DensityMap gt = DensityMap::Constant(128, 128, v);
  const Patch p = extract_patch(Image::Zero(128, 128), gt, {16, 48}, PatchSpec{});
  EXPECT_NEAR(p.count, 1024.0 * v, 1e-12);
  EXPECT_EQ(p.roi_gt.rows(), 8);
  EXPECT_EQ(p.roi_gt.cols(), 8);
}

TEST(ExtractPatch, BlockSummedEqualsRoiSum) {
  const auto scenes = testkit::tiny_scenes(1);
  const Scene& s = scenes.back();
  const PatchSpec spec;
  const RoiPlacement roi{40, 24};
  const Patch p = extract_patch(s.image, s.density, roi, spec);
  EXPECT_EQ(p.count, p.roi_gt.sum());
  EXPECT_NEAR(p.count, s.density.block(40, 24, 32, 32).sum(), 1e-12);
}

TEST(ExtractPatch, ContextOutsideImageIsZero) {
  const Image img = Image::Ones(128, 128);
  const PatchSpec spec;
  const Image px = extract_patch_pixels(img, {0, 0}, spec);
  EXPECT_EQ(px.rows(), 64);
  EXPECT_EQ(px(0, 0), 0.0);
  EXPECT_EQ(px(15, 15), 0.0);
  EXPECT_EQ(px(16, 16), 1.0);
  EXPECT_THROW(extract_patch_pixels(img, {100, 0}, spec), std::invalid_argument);
}

TEST(SlideRois, CoversImageWithClampedBorder) {
  const PatchSpec spec;
  const auto rois = slide_rois(72, 128, spec);
  EXPECT_EQ(rois.front(), (RoiPlacement{0, 0}));
  EXPECT_EQ(rois.back(), (RoiPlacement{40, 96}));
  EXPECT_EQ(rois.size(), 4u * 7u);
}

TEST(Stitch, NonOverlappingTilingIsConcatenation) {
  Rng rng(4);
  std::vector<PlacedPrediction> preds;
  DensityMap expected(4, 6);
  for (std::size_t r = 0; r < 2; ++r) {
    for (std::size_t c = 0; c < 3; ++c) {
      DensityMap m(2, 2);
      for (Eigen::Index i = 0; i < 4; ++i) m.data()[i] = rng.uniform();
      expected.block(2 * static_cast<Eigen::Index>(r), 2 * static_cast<Eigen::Index>(c), 2, 2) = m;
      preds.push_back({2 * r, 2 * c, m});
    }
  }
  EXPECT_EQ(stitch_predictions(preds, 4, 6), expected);
}

TEST(Stitch, OverlapsAverage) {
  const DensityMap p = DensityMap::Constant(3, 3, 1.0);
  const DensityMap q = DensityMap::Constant(3, 3, 4.0);
  EXPECT_EQ(stitch_predictions({{0, 0, p}, {0, 0, p}}, 3, 3), p);
  EXPECT_EQ(stitch_predictions({{0, 0, p}, {0, 0, q}}, 3, 3), DensityMap::Constant(3, 3, 2.5));
}

TEST(Stitch, UncoveredCellThrows) {
  EXPECT_THROW(stitch_predictions({{0, 0, DensityMap::Ones(2, 2)}}, 3, 3), std::invalid_argument);
}

TEST(Flip, InvolutionAndCount) {
  Rng rng(8);
  Image img(6, 5);
  DensityMap gt = DensityMap::Zero(6, 5);
  for (Eigen::Index i = 0; i < img.size(); ++i) img.data()[i] = rng.uniform();
  gt(2, 1) = 1.0;
  const FlippedPair f = flip_augment(img, gt);
  EXPECT_EQ(f.gt(2, 5 - 1 - 1), 1.0);
  EXPECT_EQ(f.gt.sum(), gt.sum());
  const FlippedPair back = flip_augment(f.patch, f.gt);
  EXPECT_EQ(back.patch, img);
  EXPECT_EQ(back.gt, gt);
}

TEST(PointsCsv, RoundTripAtThreeDecimals) {
  const auto dir = testkit::scratch_dir("points");
  const HeadPoints pts{{1.2344, 5.0}, {0.0, 127.9996}};
  save_points_csv(dir / "p.csv", pts);
  const HeadPoints back = load_points_csv(dir / "p.csv");
  ASSERT_EQ(back.size(), 2u);
  EXPECT_NEAR(back[0].x, 1.234, 1e-12);
  EXPECT_NEAR(back[1].y, 128.0, 1e-12);
}
