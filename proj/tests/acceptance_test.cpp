// End-to-end acceptance gate: one test per exit criterion, each printing a
// single PASS/FAIL line with its measured quantity at the stated tolerance.
// The training criteria rerun the full curriculum protocol and take hours on
// one CPU core; everything else finishes in seconds.

#include <gtest/gtest.h>

#include <cmath>
#include <cstdio>
#include <vector>

#include "mamba3/discretize.hpp"
#include "mamba3/mimo.hpp"
#include "mamba3/ssd.hpp"
#include "mamba3/tasks.hpp"
#include "mamba3/verify.hpp"

using namespace mamba3;

namespace {

constexpr std::uint64_t kSeed = 42;

void report(int criterion, const std::string& name, bool pass, double measured) {
  std::printf("[ACCEPTANCE] criterion-%d %s: %s (measured=%.6g)\n", criterion, name.c_str(),
              pass ? "PASS" : "FAIL", measured);
  std::fflush(stdout);
}

void report_suite(int criterion, const SuiteReport& rep) {
  for (const CheckResult& c : rep.checks) {
    report(criterion, rep.suite + "/" + c.name, c.pass, c.max_err);
    EXPECT_TRUE(c.pass) << rep.suite << "/" << c.name << " max_err=" << c.max_err;
  }
}

}  // namespace

TEST(Acceptance, Criterion1FormEquivalence) {
  report_suite(1, suite_equivalence(kSeed, 50, 1e-10));
}

TEST(Acceptance, Criterion2RotationEquivalence) {
  report_suite(2, suite_rope(kSeed, 50, 1e-10));
}

TEST(Acceptance, Criterion3MaskFactorization) {
  report_suite(3, suite_mask(kSeed, 50, 1e-12));
}

TEST(Acceptance, Criterion4DiscretizationOrder) {
  const ScalarTestSystem sys = standard_smooth_system();
  const std::vector<double> deltas = halving_deltas(0.2, 6);

  const double s1 = convergence_order(exp_euler, sys, deltas).fitted_slope;
  const bool p1 = s1 >= 0.8 && s1 <= 1.2;
  report(4, "exp-euler-slope", p1, s1);
  EXPECT_TRUE(p1);

  const double s2 = convergence_order(exp_trapezoidal, sys, deltas, 0.5).fitted_slope;
  const bool p2 = s2 >= 1.8 && s2 <= 2.2;
  report(4, "exp-trapezoidal-slope", p2, s2);
  EXPECT_TRUE(p2);

  const ScalarTestSystem constant = constant_input_system(0.8);
  double zoh_err = 0.0;
  for (double d : {0.25, 0.1, 0.05}) {
    const double got = integrate_scalar(constant, zoh, d);
    const double ref = reference_terminal_state(constant, d / 512.0);
    zoh_err = std::max(zoh_err, std::abs(got - ref));
  }
  const bool p3 = zoh_err < 1e-12;
  report(4, "zoh-exact-on-constants", p3, zoh_err);
  EXPECT_TRUE(p3);
}

TEST(Acceptance, Criterion5MimoDecomposition) {
  report_suite(5, suite_mimo(kSeed, 50, 1e-10));
}

TEST(Acceptance, Criterion6FlopAndIntensityModel) {
  // instrumented counters vs the analytic model, exact integer equality
  {
    Rng rng(kSeed);
    bool exact = true;
    for (const bool three_term : {false, true})
      for (const std::size_t chunk : {std::size_t{4}, std::size_t{16}, std::size_t{64}}) {
        const std::size_t T = 64, N = 8, P = 4;
        std::vector<DiscreteCoeffs> cs(T);
        for (std::size_t t = 0; t < T; ++t) {
          const ContinuousStep s{rng.uniform(0.05, 1.0), rng.uniform(-2.0, -0.05),
                                 rng.uniform(0.0, 1.0)};
          cs[t] = three_term ? exp_trapezoidal(s) : exp_euler(s);
        }
        FlopCounter counter;
        chunked_forward(cs, rand_normal(rng, {T, N}, 0, 1), rand_normal(rng, {T, N}, 0, 1),
                        rand_normal(rng, {T, P}, 0, 1), chunk, &counter);
        const FlopReport model = flop_count_siso(T, chunk, N, P);
        exact = exact && counter.intra == model.intra && counter.inter == model.inter;
      }
    for (const std::size_t R : {std::size_t{1}, std::size_t{2}, std::size_t{4}}) {
      Rng mr = Rng::substream(kSeed, 0x6163, R);
      const MimoHeadParams params = random_mimo_params(mr, 32, 6, 5, R, R % 2 == 0);
      FlopCounter counter;
      mimo_chunked_forward(params, 8, &counter);
      const FlopReport model = flop_count_mimo(32, 8, 6, 5, R);
      exact = exact && counter.intra == model.intra && counter.inter == model.inter;
    }
    report(6, "instrumented-counters-integer-equal", exact, exact ? 0.0 : 1.0);
    EXPECT_TRUE(exact);
  }

  // vector-state intensity approaches 2.5 at N=P=512 with 2-byte elements
  {
    const double i512 = arithmetic_intensity_siso(512, 512, 2).intensity;
    const bool pass = i512 >= 2.45 && i512 <= 2.5;
    report(6, "siso-intensity-512", pass, i512);
    EXPECT_TRUE(pass);
  }

  // matrix-state over vector-state intensity ratio vs rank at N=P=128.
  // R=4 sits 20.5% below 4: the ratio's large-N limit is (4R+1)/5 = 3.4,
  // itself 15% under R, so the 15% band is unreachable at finite N.
  {
    const double base = arithmetic_intensity_siso(128, 128, 2).intensity;
    for (const std::size_t R : {std::size_t{2}, std::size_t{4}}) {
      const double ratio = arithmetic_intensity_mimo(128, 128, R, 2).intensity / base;
      const double rel = std::abs(ratio - static_cast<double>(R)) / static_cast<double>(R);
      const bool pass = rel <= 0.15;
      report(6, "intensity-ratio-rank-" + std::to_string(R), pass, ratio);
      EXPECT_TRUE(pass) << "ratio " << ratio << " deviates " << rel * 100 << "% from R=" << R;
    }
  }

  // closed-form totals at matched sizes
  {
    bool exact = true;
    for (const std::size_t T : {std::size_t{256}, std::size_t{1024}})
      for (const std::size_t N : {std::size_t{32}, std::size_t{64}}) {
        exact = exact && flop_count_siso(T, N, N, N).leading_total() == 8 * T * N * N;
        for (const std::size_t R : {std::size_t{2}, std::size_t{4}})
          exact = exact && flop_count_mimo(T, mimo_chunk_size(N, R), N, N, R).leading_total() ==
                               8 * T * R * N * N;
      }
    report(6, "matched-size-totals-exact", exact, exact ? 0.0 : 1.0);
    EXPECT_TRUE(exact);
  }
}

TEST(Acceptance, Criterion7GradientCorrectness) {
  // 67 sampled entries per seed x 3 seeds: 201 finite-difference probes
  report_suite(7, suite_grad(kSeed, 67, 1e-4, 3));
}

namespace {

std::vector<double> lr_grid() {
  std::vector<double> out;
  for (int i = 0; i < 8; ++i) out.push_back(std::pow(10.0, -4.0 + 2.0 * i / 7.0));
  return out;
}

ModelConfig tracking_model(std::size_t layers, bool rope, bool mamba2_style) {
  ModelConfig mc;
  mc.n_layers = layers;
  mc.block.d_model = 32;
  mc.block.state = 64;
  mc.block.n_heads = 1;
  mc.block.head_dim = 64;
  mc.block.rank = 1;
  mc.block.expand = 2;
  mc.block.use_rope = rope;
  if (mamba2_style) {
    mc.block.use_rope = false;
    mc.block.use_trapezoidal = false;
    mc.block.use_bc_bias = false;
    mc.block.use_pre_gate_norm = true;
  }
  return mc;
}

Curriculum tracking_curriculum() {
  Curriculum cur;
  cur.min_len = 3;
  cur.max_len_schedule = {40, 80, 160};
  cur.eval_len = 256;
  cur.steps_per_stage = 2000;
  cur.batch_size = 64;
  cur.eval_every = 250;
  cur.eval_instances = 256;
  cur.final_eval_instances = 1024;
  return cur;
}

// Positive direction: best-of-sweep >= target, so the sweep may stop at the
// first learning rate that reaches the target (later points cannot lower the
// best). Rates are visited from the middle of the log grid outward.
double sweep_best_positive(const ModelConfig& mc, const Task& task, double target) {
  const std::vector<double> grid = lr_grid();
  const std::size_t order[] = {4, 5, 3, 6, 2, 7, 1, 0};
  double best = 0.0;
  for (std::size_t idx : order) {
    Curriculum cur = tracking_curriculum();
    cur.lr = grid[idx];
    cur.early_stop_target = target;
    std::printf("  [sweep+] lr=%.3e ...\n", cur.lr);
    std::fflush(stdout);
    const CurriculumResult res = run_curriculum(mc, task, cur, kSeed + idx);
    std::printf("  [sweep+] lr=%.3e final=%.4f steps=%zu%s\n", cur.lr, res.final_scaled_acc,
                res.steps_run, res.diverged ? " diverged" : "");
    std::fflush(stdout);
    best = std::max(best, res.final_scaled_acc);
    if (best >= target) break;
  }
  return best;
}

// Negative direction: the claim is about the best over the whole sweep, so
// every learning rate runs its full budget.
double sweep_best_full(const ModelConfig& mc, const Task& task) {
  double best = 0.0;
  for (std::size_t idx = 0; idx < 8; ++idx) {
    Curriculum cur = tracking_curriculum();
    cur.lr = lr_grid()[idx];
    std::printf("  [sweep-] lr=%.3e ...\n", cur.lr);
    std::fflush(stdout);
    const CurriculumResult res = run_curriculum(mc, task, cur, kSeed + idx);
    std::printf("  [sweep-] lr=%.3e final=%.4f%s\n", cur.lr, res.final_scaled_acc,
                res.diverged ? " diverged" : "");
    std::fflush(stdout);
    best = std::max(best, res.final_scaled_acc);
  }
  return best;
}

}  // namespace

TEST(Acceptance, Criterion8StateTracking) {
  const Task parity = task_by_name("parity");

  const double pos = sweep_best_positive(tracking_model(1, true, false), parity, 0.95);
  report(8, "parity-rope-on", pos >= 0.95, pos);
  EXPECT_GE(pos, 0.95);

  const double no_rope = sweep_best_full(tracking_model(1, false, false), parity);
  report(8, "parity-rope-off", no_rope <= 0.10, no_rope);
  EXPECT_LE(no_rope, 0.10);

  const double m2 = sweep_best_full(tracking_model(1, false, true), parity);
  report(8, "parity-two-term-style", m2 <= 0.10, m2);
  EXPECT_LE(m2, 0.10);

  const double mod = sweep_best_positive(tracking_model(3, true, false),
                                         task_by_name("mod-arith"), 0.70);
  report(8, "mod-arith-rope-on", mod >= 0.70, mod);
  EXPECT_GE(mod, 0.70);
}

TEST(Acceptance, Criterion9AblationStability) {
  const std::vector<int> corpus = gen_smoke_corpus(kSeed, 1000000);
  struct Ablation {
    const char* name;
    bool bc_bias, trapezoidal, conv;
  };
  const Ablation configs[] = {{"minus-bias-minus-trap", false, false, false},
                              {"minus-bias", false, true, false},
                              {"default", true, true, false},
                              {"plus-conv", true, true, true}};
  for (const Ablation& ab : configs) {
    Mamba3BlockConfig cfg;
    cfg.d_model = 32;
    cfg.state = 64;
    cfg.n_heads = 1;
    cfg.head_dim = 64;
    cfg.rank = 1;
    cfg.expand = 2;
    cfg.use_bc_bias = ab.bc_bias;
    cfg.use_trapezoidal = ab.trapezoidal;
    cfg.use_short_conv = ab.conv;
    std::vector<double> losses;
    bool finite = true;
    try {
      losses = run_lm_smoke(cfg, corpus, 500, 8, 64, 1e-3, kSeed);
      for (double l : losses) finite = finite && std::isfinite(l);
    } catch (const numerical_error&) {
      finite = false;
    }
    // stability: 100-step window means strictly decreasing over 500 steps
    bool decreasing = finite && losses.size() == 500;
    double prev_mean = 1e300;
    if (decreasing)
      for (std::size_t w = 0; w < 5; ++w) {
        double mean = 0.0;
        for (std::size_t i = 0; i < 100; ++i) mean += losses[w * 100 + i];
        mean /= 100.0;
        decreasing = decreasing && mean < prev_mean;
        prev_mean = mean;
      }
    const bool pass = finite && decreasing;
    report(9, std::string("ablation-") + ab.name, pass, losses.empty() ? -1.0 : losses.back());
    EXPECT_TRUE(pass) << ab.name;
  }
}
