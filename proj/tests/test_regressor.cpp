#include "support/fixtures.hpp"

#include "crowdtree/regressor.hpp"

#include <gtest/gtest.h>

using namespace crowdtree;

namespace {

const PatchSpec kSpec;

std::vector<SampledPatch> some_patches(std::size_t per_scene = 2) {
  static const auto scenes = testkit::tiny_scenes(2);
  return sample_patches(scenes, testkit::all_indices(scenes.size()), per_scene, kSpec, 13);
}

}  // namespace

TEST(Regressor, OutputShapeAndNonNegative) {
  const auto net = RegressorNet::initialize(1);
  const auto patches = some_patches(1);
  for (const auto& p : patches) {
    const DensityMap m = predict(net, p.patch.pixels, kSpec);
    EXPECT_EQ(m.rows(), 8);
    EXPECT_EQ(m.cols(), 8);
    EXPECT_GE(m.minCoeff(), 0.0);
  }
  Tape tape(false);
  const Image& px = patches[0].patch.pixels;
  const Image* ptr = &px;
  const Var full = regressor_forward(tape, net.params, tape.constant(image_batch(std::span(&ptr, 1))));
  EXPECT_EQ(full.dims(), (Shape{1, 1, 16, 16}));
}

TEST(Regressor, ZeroFinalLayerPredictsNothing) {
  auto net = RegressorNet::initialize(1);
  for (double& v : net.params.at("conv5.weight").value.values()) v = 0.0;
  const auto patches = some_patches(1);
  EXPECT_EQ(predict_count(net, patches[0].patch.pixels, kSpec), 0.0);
}

TEST(Regressor, InitializationAliveAcrossSeeds) {
  const auto patches = some_patches(1);
  for (std::uint64_t seed = 0; seed < 8; ++seed) {
    const auto net = RegressorNet::initialize(seed);
    double positive = 0.0;
    for (const auto& p : patches) positive += predict_count(net, p.patch.pixels, kSpec) > 0.0;
    EXPECT_GT(positive, 0.0) << "seed " << seed;
  }
}

TEST(Regressor, RejectsWrongPatchSize) {
  const auto net = RegressorNet::initialize(1);
  EXPECT_THROW(predict(net, Image::Zero(62, 64), kSpec), std::invalid_argument);
  EXPECT_THROW(predict(net, Image::Zero(32, 32), kSpec), std::invalid_argument);
}

TEST(Regressor, BatchEqualsSinglePrediction) {
  const auto net = RegressorNet::initialize(2);
  const auto patches = some_patches(1);
  std::vector<const Image*> ptrs;
  for (const auto& p : patches) ptrs.push_back(&p.patch.pixels);
  const auto batch = predict_batch(net, ptrs, kSpec);
  for (std::size_t i = 0; i < patches.size(); ++i) EXPECT_EQ(batch[i], predict(net, patches[i].patch.pixels, kSpec));
}

TEST(Losses, L2Fixtures) {
  DensityMap pred = DensityMap::Zero(2, 2);
  DensityMap gt = DensityMap::Zero(2, 2);
  gt(1, 0) = 2.0;
  EXPECT_DOUBLE_EQ(l2_loss(std::span(&pred, 1), std::span(&gt, 1)), 2.0);
  EXPECT_EQ(l2_loss(std::span(&gt, 1), std::span(&gt, 1)), 0.0);
  DensityMap twice = 2.0 * gt;
  DensityMap zero = DensityMap::Zero(2, 2);
  EXPECT_DOUBLE_EQ(l2_loss(std::span(&twice, 1), std::span(&zero, 1)), 4.0 * l2_loss(std::span(&gt, 1), std::span(&zero, 1)));
}

TEST(Losses, CountFixtures) {
  DensityMap pred = DensityMap::Constant(2, 5, 1.0);  // count 10
  DensityMap gt = DensityMap::Zero(2, 5);
  gt(0, 0) = 8.0;
  EXPECT_NEAR(count_loss(std::span(&pred, 1), std::span(&gt, 1), {1e-2}), 0.02, 1e-15);
  EXPECT_NEAR(count_loss(std::span(&pred, 1), std::span(&gt, 1), {3e-2}), 0.06, 1e-15);
  DensityMap moved = DensityMap::Zero(2, 5);
  moved(1, 4) = 10.0;
  EXPECT_EQ(count_loss(std::span(&pred, 1), std::span(&moved, 1), {1e-2}), 0.0);
  EXPECT_THROW(count_loss(std::span(&pred, 1), std::span(&gt, 1), {0.0}), std::invalid_argument);
}

TEST(Losses, MapLossesMatchTapeLosses) {
  const auto net = RegressorNet::initialize(3);
  const auto patches = some_patches(1);
  std::vector<DensityMap> preds, gts;
  std::vector<const Image*> ptrs;
  std::vector<double> counts;
  Tensor gt_tensor({patches.size(), 1, 8, 8});
  for (std::size_t i = 0; i < patches.size(); ++i) {
    preds.push_back(predict(net, patches[i].patch.pixels, kSpec));
    gts.push_back(patches[i].patch.roi_gt);
    ptrs.push_back(&patches[i].patch.pixels);
    counts.push_back(patches[i].patch.count);
    std::copy(gts.back().data(), gts.back().data() + 64, gt_tensor.data() + i * 64);
  }
  Tape tape(false);
  const Var roi = crop_roi(regressor_forward(tape, net.params, tape.constant(image_batch(ptrs))), kSpec);
  EXPECT_NEAR(l2_loss(roi, gt_tensor).value()[0], l2_loss(preds, gts), 1e-10);
  EXPECT_NEAR(count_loss(roi, counts, 1e-2).value()[0], count_loss(preds, gts, {1e-2}), 1e-10);
}

TEST(Pretrain, OverfitsSinglePatch) {
  const auto all = some_patches(1);
  const auto it = std::max_element(all.begin(), all.end(), [](auto& a, auto& b) { return a.patch.count < b.patch.count; });
  const std::vector<SampledPatch> one{*it};
  const auto init = RegressorNet::initialize(4);
  auto loss_of = [&](const RegressorNet& net) {
    const DensityMap p = predict(net, one[0].patch.pixels, kSpec);
    return l2_loss(std::span(&p, 1), std::span(&one[0].patch.roi_gt, 1));
  };
  PretrainConfig pc;
  pc.batch_size = 1;
  pc.eval_every = 20;
  pc.patience = 100;
  pc.max_steps = 300;
  pc.flip_probability = 0.0;
  const auto r = pretrain(init, one, one, kSpec, {1e-4, 0.9, 0.0}, pc);
  EXPECT_LT(loss_of(r.net), 0.1 * loss_of(init));
}

TEST(Pretrain, BestCheckpointAndDeterminism) {
  const auto patches = some_patches(2);
  const std::span<const SampledPatch> train(patches.data(), 6), val(patches.data() + 6, 2);
  PretrainConfig pc;
  pc.batch_size = 2;
  pc.eval_every = 3;
  pc.patience = 3;
  pc.max_steps = 12;
  pc.seed = 5;
  const auto init = RegressorNet::initialize(6);
  const auto a = pretrain(init, train, val, kSpec, {1e-4, 0.9, 0.0}, pc);
  const auto b = pretrain(init, train, val, kSpec, {1e-4, 0.9, 0.0}, pc);
  for (const auto& c : a.curve) EXPECT_LE(a.best_val_mae, c.val_mae);
  EXPECT_DOUBLE_EQ(patch_mae(a.net, val, kSpec), a.best_val_mae);
  ASSERT_EQ(a.curve.size(), b.curve.size());
  for (std::size_t i = 0; i < a.curve.size(); ++i) {
    EXPECT_EQ(a.curve[i].train_loss, b.curve[i].train_loss);
    EXPECT_EQ(a.curve[i].val_mae, b.curve[i].val_mae);
  }
  EXPECT_TRUE(a.net.params.values_equal(b.net.params));
}

TEST(Pretrain, DivergenceIsReported) {
  const auto patches = some_patches(1);
  PretrainConfig pc;
  pc.batch_size = 2;
  pc.max_steps = 50;
  pc.eval_every = 50;
  auto net = RegressorNet::initialize(1);
  net.params.at("conv5.bias").value[0] = 1e200;  // squared error overflows
  EXPECT_THROW(pretrain(net, patches, patches, kSpec, {1e-4, 0.9, 0.0}, pc), std::runtime_error);
}

TEST(CountStep, ReducesCountErrorOnHeldBatch) {
  const auto patches = some_patches(1);
  std::vector<const Patch*> batch;
  for (const auto& p : patches) batch.push_back(&p.patch);
  auto net = RegressorNet::initialize(8);
  auto count_mae = [&] {
    double e = 0.0;
    for (const Patch* p : batch) e += std::abs(predict_count(net, p->pixels, kSpec) - p->count);
    return e / static_cast<double>(batch.size());
  };
  const double before = count_mae();
  for (int i = 0; i < 5; ++i) count_step(net, batch, kSpec, {1e-6, 0.9, 0.0}, {1e-2});
  EXPECT_LT(count_mae(), before);
}

TEST(Checkpoint, SaveLoadBitwise) {
  const auto net = RegressorNet::initialize(9);
  const auto dir = testkit::scratch_dir("regressor");
  save_regressor(dir, net, {"unit", 3, 1.5});
  const auto back = load_regressor(dir);
  EXPECT_TRUE(back.params.values_equal(net.params));
  EXPECT_EQ(back.seed, net.seed);
}

TEST(Checkpoint, MissingDirectoryNamesPath) {
  try {
    load_regressor("/nonexistent/ckpt");
    FAIL();
  } catch (const std::exception& e) {
    EXPECT_NE(std::string(e.what()).find("/nonexistent/ckpt"), std::string::npos);
  }
}
