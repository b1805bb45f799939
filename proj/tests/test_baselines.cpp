#include "support/fixtures.hpp"

#include "crowdtree/baselines.hpp"

#include <gtest/gtest.h>

using namespace crowdtree;

namespace {

const PatchSpec kSpec;

struct Data {
  std::vector<SampledPatch> train, val;
};

const Data& data() {
  static const Data d = [] {
    const auto scenes = testkit::tiny_scenes(2, 8);
    Data out;
    out.train = sample_patches(scenes, {0, 1, 2, 3}, 3, kSpec, 1);
    out.val = sample_patches(scenes, {0, 1, 2, 3}, 1, kSpec, 2);
    return out;
  }();
  return d;
}

GrowthConfig quick_growth() {
  GrowthConfig g;
  g.fine_tune = {3e-5, 0.9, 0.0};
  g.max_epochs = 2;
  g.min_split_fraction = 0.0;
  g.classifier_train.max_epochs = 1;
  g.seed = 12;
  return g;
}

void set_gate(MoEModel& m, const std::vector<double>& bias) {
  for (double& v : m.gate.params.at("fc2.weight").value.values()) v = 0.0;
  auto& b = m.gate.params.at("fc2.bias").value;
  for (std::size_t k = 0; k < bias.size(); ++k) b[k] = bias[k];
}

}  // namespace

TEST(MoE, OneHotGateSelectsExpert) {
  auto m = MoEModel::from_base(RegressorNet::initialize(1), 3, 5);
  m.experts[2] = RegressorNet::initialize(2);
  set_gate(m, {0.0, 0.0, 1000.0});
  const Image& px = data().train[0].patch.pixels;
  EXPECT_EQ(moe_predict(m, px, kSpec), predict(m.experts[2], px, kSpec));
  const auto g = moe_gate(m, px, kSpec);
  EXPECT_EQ(g[2], 1.0);
}

TEST(MoE, UniformGateIdenticalExpertsGiveCommonMap) {
  const auto base = RegressorNet::initialize(1);
  auto m = MoEModel::from_base(base, 4, 5);
  set_gate(m, {0.0, 0.0, 0.0, 0.0});
  const Image& px = data().train[1].patch.pixels;
  const DensityMap common = predict(base, px, kSpec);
  EXPECT_LT((moe_predict(m, px, kSpec) - common).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(MoE, MixtureCountIsGateWeightedSum) {
  auto m = MoEModel::from_base(RegressorNet::initialize(1), 2, 5);
  m.experts[1] = RegressorNet::initialize(9);
  const Image& px = data().train[2].patch.pixels;
  const auto g = moe_gate(m, px, kSpec);
  const double expected = g[0] * predict_count(m.experts[0], px, kSpec) + g[1] * predict_count(m.experts[1], px, kSpec);
  EXPECT_NEAR(moe_predict(m, px, kSpec).sum(), expected, 1e-10);
}

TEST(MoE, TrainingKeepsBestCheckpointAndRoundTrips) {
  MoEConfig cfg;
  cfg.experts = 2;
  cfg.batch_size = 2;
  cfg.eval_every = 2;
  cfg.max_steps = 4;
  cfg.patience = 2;
  cfg.seed = 3;
  const auto r = train_moe(RegressorNet::initialize(1), data().train, data().val, kSpec, cfg);
  for (const auto& c : r.curve) EXPECT_LE(r.best_val_mae, c.val_mae);
  EXPECT_DOUBLE_EQ(moe_patch_mae(r.model, data().val, kSpec), r.best_val_mae);
  const auto dir = testkit::scratch_dir("moe");
  save_moe(dir, r.model, r.best_val_mae);
  const auto back = load_moe(dir);
  ASSERT_EQ(back.experts.size(), 2u);
  EXPECT_TRUE(back.gate.params.values_equal(r.model.gate.params));
  EXPECT_EQ(moe_predict(back, data().val[0].patch.pixels, kSpec), moe_predict(r.model, data().val[0].patch.pixels, kSpec));
}

TEST(NWay, TwoWayEqualsTreeLevelOneBitwise) {
  const auto base = RegressorNet::initialize(4);
  auto cfg = quick_growth();
  cfg.max_tree_depth = 1;
  const auto tree = grow(base, data().train, data().val, kSpec, cfg);
  const auto nway = nway_differential_train(base, 2, data().train, data().val, kSpec, cfg);
  ASSERT_EQ(tree.levels.size(), 2u);
  EXPECT_TRUE(nway.training.experts[0].params.values_equal(tree.nodes.at("0").net.params));
  EXPECT_TRUE(nway.training.experts[1].params.values_equal(tree.nodes.at("1").net.params));
  EXPECT_EQ(nway.training.assignment, tree.levels[1].partition);
}

TEST(NWay, InitialOracleIsBaseAndSupersetDominates) {
  const auto base = RegressorNet::initialize(4);
  const auto r = nway_differential_train(base, 3, data().train, data().val, kSpec, quick_growth());
  EXPECT_EQ(r.training.initial_oracle, patch_mae(base, data().train, kSpec));
  std::vector<const RegressorNet*> all;
  for (const auto& e : r.training.experts) all.push_back(&e);
  const double full = oracle_mae(all, data().train, kSpec);
  for (std::size_t drop = 0; drop < 3; ++drop) {
    std::vector<const RegressorNet*> sub;
    for (std::size_t k = 0; k < 3; ++k) {
      if (k != drop) sub.push_back(all[k]);
    }
    EXPECT_LE(full, oracle_mae(sub, data().train, kSpec));
  }
  const auto dir = testkit::scratch_dir("nway");
  save_nway(dir, r);
  const auto back = load_nway(dir);
  ASSERT_EQ(back.experts.size(), 3u);
  EXPECT_TRUE(back.experts[2].params.values_equal(r.training.experts[2].params));
}

TEST(Compare, SoftMixtureHasNoOracleAndFailuresAreOmitted) {
  const auto c = compare_table({
      {"moe-joint", [] { return MethodRow{"moe-joint", std::nullopt, 2.0, 3.0, 4.0}; }},
      {"broken", []() -> MethodRow { throw std::runtime_error("missing checkpoint"); }},
      {"nway-2", [] { return MethodRow{"nway-2", 1.0, 1.5, 2.5, 3.5}; }},
  });
  ASSERT_EQ(c.rows.size(), 2u);
  ASSERT_EQ(c.omitted.size(), 1u);
  EXPECT_NE(c.omitted[0].find("broken"), std::string::npos);
  const std::string csv = c.csv();
  EXPECT_NE(csv.find("moe-joint,,2,3,4"), std::string::npos);
  EXPECT_NE(csv.find("nway-2,1,1.5,2.5,3.5"), std::string::npos);
}
