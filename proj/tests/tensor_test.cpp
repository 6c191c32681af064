#include <gtest/gtest.h>

#include <cmath>

#include "mamba3/tensor.hpp"

using namespace mamba3;

TEST(Matmul, IdentityLeavesInputUnchanged) {
  Rng rng(1);
  const Tensor x = rand_normal(rng, {3, 5}, 0.0, 1.0);
  const Tensor y = matmul(Tensor::identity(3), x);
  EXPECT_EQ(max_abs_diff(x, y), 0.0);
}

TEST(Matmul, OneByOneIsScalarProduct) {
  const Tensor y = matmul(Tensor({1, 1}, {2.0}), Tensor({1, 1}, {3.0}));
  EXPECT_DOUBLE_EQ(y[0], 6.0);
}

TEST(Matmul, MatchesTripleLoopReference) {
  Rng rng(7);
  const Tensor a = rand_normal(rng, {4, 5}, 0.0, 1.0);
  const Tensor b = rand_normal(rng, {5, 3}, 0.0, 1.0);
  const Tensor c = matmul(a, b);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 3; ++j) {
      double acc = 0.0;
      for (std::size_t k = 0; k < 5; ++k) acc += a.at2(i, k) * b.at2(k, j);
      EXPECT_NEAR(c.at2(i, j), acc, 1e-12);
    }
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  try {
    matmul(Tensor({2, 3}), Tensor({4, 2}));
    FAIL() << "expected dimension_error";
  } catch (const dimension_error& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2x3]"), std::string::npos);
    EXPECT_NE(msg.find("[4x2]"), std::string::npos);
  }
}

TEST(Matmul, AssociativeWithinRelativeTolerance) {
  Rng rng(11);
  const Tensor a = rand_normal(rng, {6, 4}, 0.0, 1.0);
  const Tensor b = rand_normal(rng, {4, 7}, 0.0, 1.0);
  const Tensor c = rand_normal(rng, {7, 5}, 0.0, 1.0);
  const Tensor lhs = matmul(matmul(a, b), c);
  const Tensor rhs = matmul(a, matmul(b, c));
  double scale = 1.0;
  for (std::size_t i = 0; i < lhs.numel(); ++i) scale = std::max(scale, std::abs(lhs[i]));
  EXPECT_LT(max_abs_diff(lhs, rhs) / scale, 1e-10);
}

TEST(Elementwise, KnownPoints) {
  EXPECT_DOUBLE_EQ(sigmoid_scalar(0.0), 0.5);
  EXPECT_DOUBLE_EQ(silu_scalar(0.0), 0.0);
  EXPECT_NEAR(softplus_scalar(50.0), 50.0, 1e-12);
  EXPECT_NEAR(softplus_scalar(0.0), std::log(2.0), 1e-15);
}

TEST(Elementwise, ScalarBroadcastAndShapeError) {
  const Tensor a({2, 2}, {1.0, 2.0, 3.0, 4.0});
  const Tensor y = add(a, Tensor::scalar(10.0));
  EXPECT_DOUBLE_EQ(y[3], 14.0);
  EXPECT_THROW(add(a, Tensor({3, 1})), dimension_error);
}

TEST(Elementwise, CommutesWithReshape) {
  Rng rng(3);
  const Tensor a = rand_normal(rng, {3, 4}, 0.0, 2.0);
  const Tensor lhs = mamba3::exp(a).reshaped({4, 3});
  const Tensor rhs = mamba3::exp(a.reshaped({4, 3}));
  EXPECT_EQ(max_abs_diff(lhs, rhs), 0.0);
}

TEST(Rng, SameSeedGivesIdenticalTensors) {
  Rng r1(42), r2(42);
  const Tensor a = rand_normal(r1, {16}, 0.0, 1.0);
  const Tensor b = rand_normal(r2, {16}, 0.0, 1.0);
  EXPECT_EQ(max_abs_diff(a, b), 0.0);
}

TEST(Rng, StreamIsPlatformPinned) {
  // first three splitmix64 outputs for seed 0, frozen as a portability check
  Rng r(0);
  EXPECT_EQ(r.next_u64(), 0xE220A8397B1DCDAFull);
  EXPECT_EQ(r.next_u64(), 0x6E789E6AA1B965F4ull);
  EXPECT_EQ(r.next_u64(), 0x06C45D188009454Full);
}

TEST(Rng, UniformMeanAndNormalVariance) {
  Rng r(123);
  double mean = 0.0;
  const int n = 100000;
  for (int i = 0; i < n; ++i) mean += r.uniform(0.0, 1.0);
  mean /= n;
  EXPECT_NEAR(mean, 0.5, 0.01);

  Rng r2(456);
  double s = 0.0, s2 = 0.0;
  for (int i = 0; i < n; ++i) {
    const double v = r2.normal(0.0, 1.0);
    s += v;
    s2 += v * v;
  }
  const double var = s2 / n - (s / n) * (s / n);
  EXPECT_NEAR(var, 1.0, 0.05);
}

TEST(Rng, InvalidRangesThrow) {
  Rng r(1);
  EXPECT_THROW(r.uniform(1.0, 1.0), parameter_error);
  EXPECT_THROW(r.normal(0.0, 0.0), parameter_error);
}

TEST(Rng, SubstreamsAreIndependentOfTrialCount) {
  Rng a = Rng::substream(9, 4, 0);
  Rng b = Rng::substream(9, 4, 0);
  EXPECT_EQ(a.next_u64(), b.next_u64());
  Rng c = Rng::substream(9, 5, 0);
  EXPECT_NE(Rng::substream(9, 4, 0).next_u64(), c.next_u64());
}
