#include "support/gradcheck.hpp"

#include "crowdtree/parallel.hpp"
#include "crowdtree/stagnation.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

using namespace crowdtree;

TEST(Tensor, RejectsZeroExtentAndBadValueCount) {
  EXPECT_THROW(Tensor({2, 0}), std::invalid_argument);
  EXPECT_THROW(Tensor({2, 2}, {1.0, 2.0, 3.0}), std::invalid_argument);
  EXPECT_THROW(Tensor({2, 3}).reshaped({4}), std::invalid_argument);
}

TEST(Tensor, RowMajorAccess) {
  Tensor t({2, 3}, {0, 1, 2, 3, 4, 5});
  EXPECT_EQ(t.at(1, 2), 5.0);
  EXPECT_EQ(t.matrix(2)(1, 0), 3.0);
  Tensor u({1, 2, 2, 2}, {0, 1, 2, 3, 4, 5, 6, 7});
  EXPECT_EQ(u.at(0, 1, 0, 1), 5.0);
}

TEST(Tensor, ArchiveRoundTripIsBitwise) {
  Rng rng(1);
  Tensor t = testkit::random_tensor(rng, {3, 1, 4, 5});
  t[0] = -0.0;
  t[1] = 1e-310;
  std::stringstream buf;
  write_tensor(buf, t);
  const Tensor back = read_tensor(buf);
  EXPECT_EQ(back.dims(), t.dims());
  EXPECT_EQ(std::memcmp(back.data(), t.data(), t.size() * sizeof(double)), 0);
}

TEST(Tensor, ArchiveRejectsBadMagic) {
  std::stringstream buf("XXXX\x01\x01");
  EXPECT_THROW(read_tensor(buf), std::runtime_error);
}

TEST(Ops, ReluDefinition) {
  Tape tape(false);
  const Var y = relu(tape.constant(Tensor({3}, {-1.0, 0.0, 2.0})));
  EXPECT_EQ(y.value(), Tensor({3}, {0.0, 0.0, 2.0}));
}

TEST(Ops, SoftmaxSymmetric) {
  Tape tape(false);
  const Var y = softmax(tape.constant(Tensor({1, 2}, {0.0, 0.0})));
  EXPECT_DOUBLE_EQ(y.value()[0], 0.5);
  EXPECT_DOUBLE_EQ(y.value()[1], 0.5);
}

TEST(Ops, SoftmaxStableForLargeLogits) {
  Tape tape(false);
  const Var y = softmax(tape.constant(Tensor({1, 3}, {1000.0, 1000.0, -1000.0})));
  EXPECT_TRUE(y.value().all_finite());
  EXPECT_NEAR(y.value()[0], 0.5, 1e-15);
}

TEST(Ops, ConvSamePaddingOnes) {
  Tape tape(false);
  const Var y = conv2d(tape.constant(Tensor({1, 1, 3, 3}, 1.0)), tape.constant(Tensor({1, 1, 3, 3}, 1.0)),
                       tape.constant(Tensor({1})));
  EXPECT_EQ(y.value().at(0, 0, 1, 1), 9.0);
  EXPECT_EQ(y.value().at(0, 0, 0, 0), 4.0);
  EXPECT_EQ(y.value().at(0, 0, 2, 2), 4.0);
  EXPECT_EQ(y.value().at(0, 0, 0, 1), 6.0);
}

TEST(Ops, ConvRejectsEvenKernelAndChannelMismatch) {
  Tape tape(false);
  const Var x = tape.constant(Tensor({1, 2, 4, 4}));
  EXPECT_THROW(conv2d(x, tape.constant(Tensor({1, 2, 2, 2})), tape.constant(Tensor({1}))), std::invalid_argument);
  EXPECT_THROW(conv2d(x, tape.constant(Tensor({1, 3, 3, 3})), tape.constant(Tensor({1}))), std::invalid_argument);
}

TEST(Ops, MaxpoolPicksBlockMaximum) {
  Tape tape(false);
  const Var y = maxpool2(tape.constant(Tensor({1, 1, 2, 4}, {1, 5, 2, 0, 3, 4, 7, 1})));
  EXPECT_EQ(y.value(), Tensor({1, 1, 1, 2}, {5, 7}));
}

TEST(Backward, ReluSubgradient) {
  ParamEntry w(Tensor({2}, {1.0, -1.0}));
  Tape tape;
  tape.backward(sum(relu(tape.param(w))));
  EXPECT_EQ(w.grad, Tensor({2}, {1.0, 0.0}));
}

TEST(Backward, CrossEntropyAtUniformPoint) {
  ParamEntry logits(Tensor({1, 4}));
  const std::size_t label = 2;
  Tape tape;
  tape.backward(softmax_cross_entropy(tape.param(logits), std::span(&label, 1)));
  for (std::size_t k = 0; k < 4; ++k) EXPECT_NEAR(logits.grad[k], 0.25 - (k == label ? 1.0 : 0.0), 1e-15);
}

TEST(Backward, AccumulatesAcrossPasses) {
  ParamEntry w(Tensor({2}, {1.0, 2.0}));
  for (int i = 0; i < 2; ++i) {
    Tape tape;
    tape.backward(sum(tape.param(w)));
  }
  EXPECT_EQ(w.grad, Tensor({2}, 2.0));
}

TEST(Backward, FrozenLeafGetsNoGradient) {
  ParamEntry w(Tensor({1, 2}, 1.0));
  ParamEntry frozen(Tensor({1, 2}, 3.0));
  Tape tape;
  const Var a = tape.param(w);
  const Var b = tape.param(static_cast<const ParamEntry&>(frozen));
  tape.backward(sum(mix(std::vector<Var>{a, b}, tape.constant(Tensor({1, 2}, {0.5, 0.5})))));
  EXPECT_EQ(frozen.grad, Tensor({1, 2}));
  EXPECT_EQ(w.grad, Tensor({1, 2}, 0.5));
}

TEST(GradCheck, EveryOpAgainstCentralDifferences) {
  const auto results = testkit::gradient_suite(2024, 7);
  EXPECT_GE(results.size(), 100u);
  for (const auto& r : results) EXPECT_LT(r.rel_error, 1e-4) << r.name;
}

TEST(Sgd, PlainStep) {
  ParamSet p;
  auto& e = p.add("w", Tensor({1}));
  e.grad[0] = 1.0;
  sgd_step(p, {0.1, 0.0, 0.0});
  EXPECT_DOUBLE_EQ(e.value[0], -0.1);
  EXPECT_EQ(e.grad[0], 0.0);
}

TEST(Sgd, MomentumTwoSteps) {
  ParamSet p;
  auto& e = p.add("w", Tensor({1}));
  for (int i = 0; i < 2; ++i) {
    e.grad[0] = 1.0;
    sgd_step(p, {0.1, 0.9, 0.0});
  }
  EXPECT_NEAR(e.value[0], -0.29, 1e-15);
}

TEST(Sgd, ZeroGradientIsFixedPoint) {
  ParamSet p;
  auto& e = p.add("w", Tensor({2}, {0.5, -3.0}));
  sgd_step(p, {0.1, 0.9, 0.0});
  EXPECT_EQ(e.value, Tensor({2}, {0.5, -3.0}));
}

TEST(Sgd, RejectsInvalidConfig) {
  EXPECT_THROW((OptimConfig{-1.0, 0.9, 0.0}.validate()), std::invalid_argument);
  EXPECT_THROW((OptimConfig{0.1, 1.0, 0.0}.validate()), std::invalid_argument);
}

TEST(ParamSet, CopyIsDeep) {
  ParamSet a;
  a.add("w", Tensor({2}, 1.0));
  ParamSet b = a;
  b.at("w").value[0] = 5.0;
  EXPECT_EQ(a.at("w").value[0], 1.0);
  EXPECT_FALSE(a.values_equal(b));
  EXPECT_THROW(a.at("missing"), std::out_of_range);
}

TEST(Stagnation, ProgressNeedsRelativeImprovement) {
  Stagnation s(2);
  EXPECT_TRUE(s.observe(10.0));
  EXPECT_TRUE(s.observe(9.99));  // new best, below the 0.5% progress bar
  EXPECT_EQ(s.since_progress(), 1u);
  EXPECT_FALSE(s.observe(11.0));
  EXPECT_TRUE(s.stalled());
  EXPECT_DOUBLE_EQ(s.best(), 9.99);
}

TEST(Random, DerivedSeedsDiffer) {
  EXPECT_NE(derive_seed(7, "data"), derive_seed(7, "split"));
  EXPECT_NE(derive_seed(7, "data"), derive_seed(8, "data"));
  EXPECT_EQ(derive_seed(7, "data"), derive_seed(7, "data"));
  EXPECT_NE(derive_seed(7, std::uint64_t{0}), derive_seed(7, std::uint64_t{1}));
}

TEST(Random, UniformIntCoversRange) {
  Rng rng(5);
  std::array<int, 3> seen{};
  for (int i = 0; i < 300; ++i) ++seen.at(static_cast<std::size_t>(rng.uniform_int(-1, 1) + 1));
  for (int c : seen) EXPECT_GT(c, 50);
}

TEST(Parallel, ResultIndependentOfThreadCount) {
  auto run = [](std::size_t threads) {
    set_num_threads(threads);
    std::vector<double> out(1000);
    parallel_for(out.size(), [&](std::size_t i) { out[i] = std::sin(static_cast<double>(i)) * 3.0; });
    return out;
  };
  const auto one = run(1);
  EXPECT_EQ(run(4), one);
  EXPECT_EQ(run(7), one);
  set_num_threads(1);
}

TEST(Parallel, PropagatesExceptions) {
  set_num_threads(3);
  EXPECT_THROW(parallel_for(10, [](std::size_t i) {
                 if (i == 7) throw std::runtime_error("boom");
               }),
               std::runtime_error);
  set_num_threads(1);
}
