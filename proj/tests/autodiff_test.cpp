#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <vector>

#include "mamba3/autodiff.hpp"

using namespace mamba3;
using ad::Tape;
using ad::Value;

namespace {

// Builds the loss from leaf tensors; returns the scalar loss node and the
// leaf handles so gradients can be read back.
using Builder = std::function<Value(Tape&, std::vector<Value>&)>;

// central finite differences (h = 1e-5) against the tape gradient, sampling
// every coordinate of every input
void grad_check(const std::vector<Tensor>& inputs, const Builder& build, double tol = 1e-5) {
  Tape tape;
  std::vector<Value> leaves;
  for (const Tensor& in : inputs) leaves.push_back(tape.param(in));
  std::vector<Value> leaves_copy = leaves;
  const Value loss = build(tape, leaves_copy);
  tape.backward(loss);

  const double h = 1e-5;
  for (std::size_t li = 0; li < inputs.size(); ++li) {
    const Tensor& analytic = tape.grad(leaves[li]);
    ASSERT_EQ(analytic.numel(), inputs[li].numel());
    for (std::size_t j = 0; j < inputs[li].numel(); ++j) {
      auto eval = [&](double delta) {
        Tape t2;
        std::vector<Value> l2;
        for (std::size_t k = 0; k < inputs.size(); ++k) {
          Tensor v = inputs[k];
          if (k == li) v[j] += delta;
          l2.push_back(t2.param(v));
        }
        std::vector<Value> l2_copy = l2;
        return t2.value(build(t2, l2_copy))[0];
      };
      const double fd = (eval(h) - eval(-h)) / (2.0 * h);
      const double an = analytic[j];
      const double denom = std::max({1.0, std::abs(fd), std::abs(an)});
      EXPECT_LT(std::abs(fd - an) / denom, tol)
          << "input " << li << " coord " << j << " fd=" << fd << " an=" << an;
    }
  }
}

Tensor randn(Rng& rng, Shape s, double sigma = 1.0) { return rand_normal(rng, s, 0.0, sigma); }

}  // namespace

TEST(Backward, LinearMapGradientIsOuterPattern) {
  Rng rng(50);
  Tape t;
  const Value W = t.param(randn(rng, {3, 4}));
  const Value x = t.param(randn(rng, {4, 2}));
  const Value loss = ad::sum_all(ad::matmul(W, x));
  t.backward(loss);
  // d/dW = ones * x^T
  const Tensor& g = t.grad(W);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t k = 0; k < 4; ++k) {
      double expect = 0.0;
      for (std::size_t j = 0; j < 2; ++j) expect += t.value(x).at2(k, j);
      EXPECT_NEAR(g.at2(i, k), expect, 1e-12);
    }
}

TEST(Backward, SigmoidGradAtZero) {
  Tape t;
  const Value x = t.param(Tensor({1}, {0.0}));
  const Value loss = ad::sum_all(ad::sigmoid(x));
  t.backward(loss);
  EXPECT_DOUBLE_EQ(t.grad(x)[0], 0.25);
}

TEST(Backward, NonScalarLossThrows) {
  Tape t;
  const Value x = t.param(Tensor({2}, {1.0, 2.0}));
  EXPECT_THROW(t.backward(x), parameter_error);
}

TEST(Backward, SharedSubexpressionAccumulates) {
  Rng rng(51);
  const Tensor xv = randn(rng, {4});
  // shared: s = x*x used twice
  Tape t1;
  const Value x1 = t1.param(xv);
  const Value s = ad::mul(x1, x1);
  t1.backward(ad::sum_all(ad::add(s, s)));
  // expanded tree
  Tape t2;
  const Value x2 = t2.param(xv);
  t2.backward(ad::sum_all(ad::add(ad::mul(x2, x2), ad::mul(x2, x2))));
  EXPECT_LT(max_abs_diff(t1.grad(x1), t2.grad(x2)), 1e-14);
}

TEST(GradCheck, ElementwiseOps) {
  for (std::uint64_t seed : {1ull, 2ull, 3ull}) {
    Rng rng(seed);
    const Tensor a = randn(rng, {3, 4});
    const Tensor b = randn(rng, {3, 4});
    grad_check({a, b}, [](Tape& t, std::vector<Value>& l) {
      Value v = ad::mul(ad::add(l[0], l[1]), ad::sub(l[0], l[1]));
      v = ad::add(ad::silu(v), ad::sigmoid(l[0]));
      v = ad::add(v, ad::softplus(l[1]));
      v = ad::add(v, ad::exp(ad::scale(l[0], 0.3)));
      v = ad::add_const(ad::neg(v), 2.0);
      return ad::sum_all(v);
    });
  }
}

TEST(GradCheck, MatmulAndRowBias) {
  for (std::uint64_t seed : {4ull, 5ull, 6ull}) {
    Rng rng(seed);
    const Tensor a = randn(rng, {3, 5});
    const Tensor b = randn(rng, {5, 2});
    const Tensor v = randn(rng, {2});
    grad_check({a, b, v}, [](Tape& t, std::vector<Value>& l) {
      return ad::sum_all(ad::silu(ad::add_rowvec(ad::matmul(l[0], l[1]), l[2])));
    });
  }
}

TEST(GradCheck, ShapeOps) {
  Rng rng(52);
  const Tensor a = randn(rng, {3, 4});
  const Tensor h = randn(rng, {3, 2});
  grad_check({a, h}, [](Tape& t, std::vector<Value>& l) {
    const Value tiled = ad::tile_cols(l[0], 2);          // 3 x 8
    const Value expanded = ad::expand_cols(l[1], 4);     // 3 x 8
    const Value prod = ad::mul(tiled, expanded);
    return ad::sum_all(ad::silu(ad::sum_groups(prod, 2)));
  });
}

TEST(GradCheck, GatherRows) {
  Rng rng(53);
  const Tensor table = randn(rng, {6, 3});
  grad_check({table}, [](Tape& t, std::vector<Value>& l) {
    const Value g = ad::gather_rows(l[0], {0, 2, 2, 5});
    return ad::sum_all(ad::mul(g, g));
  });
}

TEST(GradCheck, RmsNormGroups) {
  for (std::uint64_t seed : {7ull, 8ull, 9ull}) {
    Rng rng(seed);
    const Tensor x = randn(rng, {4, 6});
    const Tensor gamma = randn(rng, {6}, 0.5);
    grad_check({x, gamma}, [](Tape& t, std::vector<Value>& l) {
      return ad::sum_all(ad::silu(ad::rms_norm_groups(l[0], l[1], 3, 1e-5)));
    });
  }
}

TEST(GradCheck, CumsumAndRope) {
  for (std::uint64_t seed : {10ull, 11ull, 12ull}) {
    Rng rng(seed);
    const std::size_t Bsz = 2, T = 5;
    const Tensor v = randn(rng, {Bsz * T, 4});
    const Tensor raw_ang = randn(rng, {Bsz * T, 2});
    grad_check({v, raw_ang}, [Bsz, T](Tape& t, std::vector<Value>& l) {
      const Value cum = ad::cumsum_time(l[1], Bsz, T);
      const Value rotated = ad::rope_pairs(l[0], cum, -1);
      return ad::sum_all(ad::silu(rotated));
    });
  }
}

TEST(GradCheck, CausalConv) {
  Rng rng(54);
  const Tensor x = randn(rng, {2 * 6, 3});
  const Tensor k = randn(rng, {3, 4});
  grad_check({x, k}, [](Tape& t, std::vector<Value>& l) {
    return ad::sum_all(ad::silu(ad::conv1d_causal(l[0], l[1], 2, 6)));
  });
}

TEST(GradCheck, CrossEntropy) {
  Rng rng(55);
  const Tensor logits = randn(rng, {5, 4});
  grad_check({logits}, [](Tape& t, std::vector<Value>& l) {
    return ad::cross_entropy(l[0], {0, 3, 1, 1, 2});
  });
}

TEST(ScanAdjoint, PrefixSumJacobian) {
  const std::size_t T = 6;
  Tape t;
  const Value alpha = t.leaf(Tensor({T, 1}, 1.0));
  const Value beta = t.leaf(Tensor({T, 1}, 0.0));
  const Value gamma = t.leaf(Tensor({T, 1}, 1.0));
  const Value B = t.leaf(Tensor({T, 1}, 1.0));
  const Value C = t.leaf(Tensor({T, 1}, 1.0));
  Value X = t.param(Tensor({T, 1}, 0.5));
  const Value y = ad::scan3(alpha, beta, gamma, B, C, X, 1, T, 1, 1, 1);
  // loss = y_{T-1}
  const Value last = ad::gather_rows(y, {T - 1});
  t.backward(ad::sum_all(last));
  for (std::size_t s = 0; s < T; ++s) EXPECT_NEAR(t.grad(X)[s], 1.0, 1e-13) << "s=" << s;
}

TEST(ScanAdjoint, CausalityOfGradient) {
  Rng rng(56);
  const std::size_t T = 8;
  Tape t;
  const Value alpha = t.leaf(rand_uniform(rng, {T, 1}, 0.3, 0.9));
  const Value beta = t.leaf(rand_uniform(rng, {T, 1}, 0.0, 0.3));
  const Value gamma = t.leaf(rand_uniform(rng, {T, 1}, 0.3, 1.0));
  const Value B = t.leaf(randn(rng, {T, 2}));
  const Value C = t.leaf(randn(rng, {T, 2}));
  Value X = t.param(randn(rng, {T, 1}));
  const Value y = ad::scan3(alpha, beta, gamma, B, C, X, 1, T, 1, 2, 1);
  const std::size_t tcut = 3;
  t.backward(ad::sum_all(ad::gather_rows(y, {tcut})));
  for (std::size_t s = tcut + 1; s < T; ++s) EXPECT_EQ(t.grad(X)[s], 0.0) << "s=" << s;
}

TEST(GradCheck, FusedScanAllInputs) {
  for (std::uint64_t seed : {13ull, 14ull, 15ull}) {
    Rng rng(seed);
    const std::size_t Bsz = 2, T = 20, H = 2, N = 3, P = 2;  // T crosses a checkpoint boundary
    const Tensor alpha = rand_uniform(rng, {Bsz * T, H}, 0.3, 0.95);
    const Tensor beta = rand_uniform(rng, {Bsz * T, H}, 0.0, 0.3);
    const Tensor gamma = rand_uniform(rng, {Bsz * T, H}, 0.2, 1.0);
    const Tensor B = randn(rng, {Bsz * T, H * N});
    const Tensor C = randn(rng, {Bsz * T, H * N});
    const Tensor X = randn(rng, {Bsz * T, H * P});
    grad_check({alpha, beta, gamma, B, C, X}, [=](Tape& t, std::vector<Value>& l) {
      const Value y = ad::scan3(l[0], l[1], l[2], l[3], l[4], l[5], Bsz, T, H, N, P);
      return ad::sum_all(ad::silu(y));
    }, 2e-5);
  }
}

TEST(GradCheck, RotatedScanThetaChain) {
  Rng rng(57);
  const std::size_t Bsz = 1, T = 10, H = 1, N = 4, P = 2;
  const Tensor theta = randn(rng, {Bsz * T, H * N / 2});
  const Tensor delta = rand_uniform(rng, {Bsz * T, H}, 0.2, 1.0);
  const Tensor B = randn(rng, {Bsz * T, H * N});
  const Tensor C = randn(rng, {Bsz * T, H * N});
  const Tensor X = randn(rng, {Bsz * T, H * P});
  grad_check({theta, delta, B, C, X}, [=](Tape& t, std::vector<Value>& l) {
    const Value ang = ad::mul(ad::expand_cols(l[1], N / 2), l[0]);
    const Value cum = ad::cumsum_time(ang, Bsz, T);
    const Value Brot = ad::rope_pairs(l[2], cum, -1);
    const Value Crot = ad::rope_pairs(l[3], cum, -1);
    const Value a = t.leaf(Tensor({Bsz * T, H}, 0.8));
    const Value bz = t.leaf(Tensor({Bsz * T, H}, 0.0));
    const Value y = ad::scan3(a, bz, l[1], Brot, Crot, l[4], Bsz, T, H, N, P);
    return ad::sum_all(ad::silu(y));
  }, 2e-5);
}

TEST(Adam, ZeroGradientLeavesParamsUnchanged) {
  Tensor p({3}, {1.0, -2.0, 0.5});
  const Tensor before = p;
  ad::AdamState st;
  ad::adam_step({&p}, {Tensor({3})}, st, 1e-2);
  EXPECT_EQ(max_abs_diff(p, before), 0.0);
}

TEST(Adam, FirstStepMagnitudeIsLearningRate) {
  Tensor p({2}, {0.0, 0.0});
  ad::AdamState st;
  ad::adam_step({&p}, {Tensor({2}, {3.0, -0.2})}, st, 1e-2);
  EXPECT_NEAR(std::abs(p[0]), 1e-2, 1e-6);
  EXPECT_NEAR(std::abs(p[1]), 1e-2, 1e-6);
  EXPECT_LT(p[0], 0.0);
  EXPECT_GT(p[1], 0.0);
}

TEST(Adam, QuadraticBowlConverges) {
  Tensor p({2}, {4.0, -3.0});
  ad::AdamState st;
  for (int i = 0; i < 5000; ++i) {
    Tensor g({2}, {2.0 * p[0], 2.0 * p[1]});
    ad::adam_step({&p}, {g}, st, 1e-2);
    if (std::abs(p[0]) < 1e-7 && std::abs(p[1]) < 1e-7) break;
  }
  EXPECT_LT(std::abs(p[0]), 1e-6);
  EXPECT_LT(std::abs(p[1]), 1e-6);
}
