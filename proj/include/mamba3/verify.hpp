#pragma once

// Named verification suites behind the `verify` subcommand: each runs seeded
// random trials against an independent oracle and reports per-check max
// error. The mask suite exposes a corruption hook used as a negative control
// by the CLI tests.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "mamba3/block.hpp"
#include "mamba3/mimo.hpp"
#include "mamba3/ssd.hpp"
#include "mamba3/ssm.hpp"

namespace mamba3 {

struct CheckResult {
  std::string name;
  double max_err = 0.0;
  bool pass = true;
};

struct SuiteReport {
  std::string suite;
  std::vector<CheckResult> checks;
  bool all_pass() const {
    for (const CheckResult& c : checks)
      if (!c.pass) return false;
    return true;
  }
};

// Test hook: added to one dense-mask entry inside the mask suite so the
// negative-control path (corrupt -> verification failure) is exercisable.
inline double& mask_corruption() {
  static double v = 0.0;
  return v;
}

namespace detail {

inline std::vector<DiscreteCoeffs> random_coeffs(Rng& rng, std::size_t T, bool three_term) {
  std::vector<DiscreteCoeffs> cs(T);
  for (std::size_t t = 0; t < T; ++t) {
    const ContinuousStep s{rng.uniform(0.05, 1.0), rng.uniform(-2.0, -0.05),
                           rng.uniform(0.0, 1.0)};
    cs[t] = three_term ? exp_trapezoidal(s) : exp_euler(s);
  }
  return cs;
}

inline Tensor scan_reference(const std::vector<DiscreteCoeffs>& cs, const Tensor& B,
                             const Tensor& C, const Tensor& X) {
  const std::size_t T = B.extent(0), N = B.extent(1), P = X.extent(1);
  std::vector<std::vector<double>> Bv(T, std::vector<double>(N)), Cv(T, std::vector<double>(N));
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t n = 0; n < N; ++n) {
      Bv[t][n] = B.at2(t, n);
      Cv[t][n] = C.at2(t, n);
    }
  Tensor Y({T, P});
  for (std::size_t p = 0; p < P; ++p) {
    std::vector<double> x(T);
    for (std::size_t t = 0; t < T; ++t) x[t] = X.at2(t, p);
    const ScanResult r = scan_three_term(cs, Bv, Cv, x);
    for (std::size_t t = 0; t < T; ++t) Y.at2(t, p) = r.y[t];
  }
  return Y;
}

inline void fold(CheckResult& c, double err) { c.max_err = std::max(c.max_err, err); }

inline void finalize(SuiteReport& rep, double tol) {
  for (CheckResult& c : rep.checks) c.pass = c.max_err < tol;
}

}  // namespace detail

// Sequential scan vs quadratic masked form vs chunked algorithm, pairwise.
inline SuiteReport suite_equivalence(std::uint64_t seed, std::size_t trials, double tol) {
  SuiteReport rep{"equivalence",
                  {{"scan-vs-quadratic"}, {"scan-vs-chunked"}, {"quadratic-vs-chunked"}}};
  const std::size_t Ts[] = {16, 48, 64};
  const std::size_t Ns[] = {4, 16};
  const std::size_t Ps[] = {1, 4};
  for (std::size_t trial = 0; trial < trials; ++trial) {
    Rng rng = Rng::substream(seed, 0x6571, trial);
    const std::size_t T = Ts[trial % 3], N = Ns[(trial / 3) % 2], P = Ps[(trial / 6) % 2];
    const std::vector<DiscreteCoeffs> cs = detail::random_coeffs(rng, T, true);
    const Tensor B = rand_normal(rng, {T, N}, 0.0, 1.0);
    const Tensor C = rand_normal(rng, {T, N}, 0.0, 1.0);
    const Tensor X = rand_normal(rng, {T, P}, 0.0, 1.0);
    const Tensor Ys = detail::scan_reference(cs, B, C, X);
    const Tensor Yq = quadratic_forward(build_mamba3_mask(cs), B, C, X);
    detail::fold(rep.checks[0], max_abs_diff(Ys, Yq));
    for (std::size_t chunk : {std::size_t{1}, std::size_t{4}, std::size_t{16}, T}) {
      const Tensor Yc = chunked_forward(cs, B, C, X, chunk);
      detail::fold(rep.checks[1], max_abs_diff(Ys, Yc));
      detail::fold(rep.checks[2], max_abs_diff(Yq, Yc));
    }
  }
  detail::finalize(rep, tol);
  return rep;
}

// Rotation trick vs the true complex recurrence, plus the theta=0 degeneracy.
inline SuiteReport suite_rope(std::uint64_t seed, std::size_t trials, double tol) {
  SuiteReport rep{"rope", {{"exp-euler"}, {"exp-trapezoidal"}, {"theta-zero-bit-compatible"}}};
  const DiscretizationRule rules[] = {exp_euler, exp_trapezoidal};
  for (std::size_t trial = 0; trial < trials; ++trial) {
    Rng rng = Rng::substream(seed, 0x726f, trial);
    const std::size_t T = 8 + rng.next_index(57);       // up to 64
    const std::size_t N = 2 * (1 + rng.next_index(16));  // even, up to 32
    const SsmSequenceParams p = random_ssm_params(rng, T, N, true);
    for (int r = 0; r < 2; ++r) {
      const ScanResult got = scan_with_rope(p, rules[r]);
      const std::vector<double> ref = scan_complex_reference(p, rules[r]);
      detail::fold(rep.checks[r], max_abs_diff(got.y, ref));
    }
    SsmSequenceParams flat = p;
    for (auto& row : flat.theta) std::fill(row.begin(), row.end(), 0.0);
    const ScanResult rot = scan_with_rope(flat, exp_trapezoidal);
    const ScanResult plain =
        scan_three_term(coeffs_for(flat, exp_trapezoidal), flat.B, flat.C, flat.x);
    double bit_err = 0.0;
    for (std::size_t t = 0; t < T; ++t)
      if (rot.y[t] != plain.y[t]) bit_err = std::max(bit_err, 1.0);
    detail::fold(rep.checks[2], bit_err);
  }
  detail::finalize(rep, tol);
  return rep;
}

// Matrix-state trajectory vs rank-squared SISO decomposition vs chunked path.
inline SuiteReport suite_mimo(std::uint64_t seed, std::size_t trials, double tol) {
  SuiteReport rep{
      "mimo", {{"trajectory-vs-siso"}, {"trajectory-vs-chunked"}, {"rank1-vs-scalar-scan"}}};
  const std::size_t Rs[] = {1, 2, 4};
  for (std::size_t trial = 0; trial < trials; ++trial) {
    Rng rng = Rng::substream(seed, 0x6d69, trial);
    const std::size_t T = 8 + rng.next_index(57);
    const std::size_t N = 2 + rng.next_index(15);
    const std::size_t P = 1 + rng.next_index(8);
    const std::size_t R = Rs[trial % 3];
    const MimoHeadParams params = random_mimo_params(rng, T, N, P, R, trial % 2 == 0);
    const std::vector<Tensor> Yt = mimo_decode_trajectory(params);
    const std::vector<Tensor> Ys = mimo_via_siso(params);
    const std::size_t chunk = 1 + rng.next_index(T);
    const std::vector<Tensor> Yc = mimo_chunked_forward(params, chunk);
    for (std::size_t t = 0; t < T; ++t) {
      detail::fold(rep.checks[0], max_abs_diff(Yt[t], Ys[t]));
      detail::fold(rep.checks[1], max_abs_diff(Yt[t], Yc[t]));
    }
    if (R == 1) {
      const std::vector<DiscreteCoeffs> cs = params.effective_coeffs();
      std::vector<std::vector<double>> Bv(T), Cv(T);
      Tensor X({T, P});
      for (std::size_t t = 0; t < T; ++t) {
        Bv[t].resize(N);
        Cv[t].resize(N);
        for (std::size_t n = 0; n < N; ++n) {
          Bv[t][n] = params.B[t].at2(n, 0);
          Cv[t][n] = params.C[t].at2(n, 0);
        }
        for (std::size_t q = 0; q < P; ++q) X.at2(t, q) = params.X[t].at2(q, 0);
      }
      for (std::size_t q = 0; q < P; ++q) {
        std::vector<double> x(T);
        for (std::size_t t = 0; t < T; ++t) x[t] = X.at2(t, q);
        const ScanResult r = scan_three_term(cs, Bv, Cv, x);
        for (std::size_t t = 0; t < T; ++t)
          detail::fold(rep.checks[2], std::abs(r.y[t] - Yt[t].at2(q, 0)));
      }
    }
  }
  detail::finalize(rep, tol);
  return rep;
}

// Dense mask vs the semiseparable-times-band product, and the beta=0 collapse.
inline SuiteReport suite_mask(std::uint64_t seed, std::size_t trials, double tol) {
  SuiteReport rep{"mask", {{"factorization-product"}, {"beta-zero-reduction"}}};
  for (std::size_t trial = 0; trial < trials; ++trial) {
    Rng rng = Rng::substream(seed, 0x6d61, trial);
    const std::size_t T = 4 + rng.next_index(61);
    const std::vector<DiscreteCoeffs> cs = detail::random_coeffs(rng, T, true);
    StructuredMask m = build_mamba3_mask(cs);
    if (trial == 0 && mask_corruption() != 0.0)
      m.dense.at2(T - 1, 0) += mask_corruption();
    const Tensor product = matmul(m.semiseparable_factor, m.band_factor);
    detail::fold(rep.checks[0], max_abs_diff(m.dense, product));

    std::vector<DiscreteCoeffs> two = detail::random_coeffs(rng, T, false);
    std::vector<double> alpha(T), gamma(T);
    for (std::size_t t = 0; t < T; ++t) {
      alpha[t] = two[t].alpha;
      gamma[t] = two[t].gamma;
    }
    const StructuredMask m3 = build_mamba3_mask(two);
    const StructuredMask m2 = build_mamba2_mask(alpha, gamma);
    double exact_err = 0.0;
    for (std::size_t i = 0; i < m3.dense.numel(); ++i)
      if (m3.dense[i] != m2.dense[i]) exact_err = std::max(exact_err, 1.0);
    detail::fold(rep.checks[1], exact_err);
  }
  detail::finalize(rep, tol);
  return rep;
}

// Analytic block gradients vs central finite differences over sampled
// parameter entries; `trials` is the number of sampled entries per seed.
inline SuiteReport suite_grad(std::uint64_t seed, std::size_t trials, double tol,
                              std::size_t seeds = 3) {
  SuiteReport rep{"grad", {{"block-finite-difference"}}};
  Mamba3BlockConfig cfg;
  cfg.d_model = 4;
  cfg.n_heads = 2;
  cfg.head_dim = 2;
  cfg.state = 4;
  cfg.rank = 2;
  cfg.expand = 2;
  cfg.use_short_conv = true;
  cfg.use_pre_gate_norm = true;
  const std::size_t Bsz = 2, T = 6, M = Bsz * T;
  const double h = 1e-5;
  for (std::size_t s = 0; s < seeds; ++s) {
    Rng rng = Rng::substream(seed, 0x6772, s);
    BlockParams p = init_block_params(cfg, rng);
    const Tensor U = rand_normal(rng, {M, cfg.d_model}, 0.0, 1.0);
    Tensor weights({M, cfg.d_model});
    for (std::size_t i = 0; i < weights.numel(); ++i)
      weights[i] = std::sin(static_cast<double>(i) + 1.0);

    auto loss_of = [&](BlockParams& params) {
      ad::Tape tape;
      BlockNodes w = bind_block(tape, params, false);
      const Tensor& v =
          tape.value(block_forward(tape, tape.leaf(U), w, cfg, Bsz, T));
      double acc = 0.0;
      for (std::size_t i = 0; i < v.numel(); ++i) acc += v[i] * weights[i];
      return acc;
    };

    ad::Tape tape;
    BlockNodes w = bind_block(tape, p, true);
    const ad::Value out = block_forward(tape, tape.leaf(U), w, cfg, Bsz, T);
    const ad::Value loss = ad::sum_all(ad::mul(out, tape.leaf(weights)));
    tape.backward(loss);

    std::vector<std::pair<std::string, Tensor*>> items;
    collect_block_params(p, items, "");
    for (std::size_t k = 0; k < trials; ++k) {
      const std::size_t which = rng.next_index(items.size());
      Tensor& t = *items[which].second;
      const std::size_t i = rng.next_index(t.numel());
      const double an = tape.grad(w.by_name[which].second)[i];
      const double saved = t[i];
      t[i] = saved + h;
      const double up = loss_of(p);
      t[i] = saved - h;
      const double down = loss_of(p);
      t[i] = saved;
      const double fd = (up - down) / (2.0 * h);
      const double rel = std::abs(fd - an) / std::max({1.0, std::abs(fd), std::abs(an)});
      detail::fold(rep.checks[0], rel);
    }
  }
  detail::finalize(rep, tol);
  return rep;
}

inline std::vector<SuiteReport> run_verification(const std::string& suite, std::uint64_t seed,
                                                 std::size_t trials, double tol,
                                                 double grad_tol) {
  std::vector<SuiteReport> out;
  const bool all = suite == "all";
  if (all || suite == "equivalence") out.push_back(suite_equivalence(seed, trials, tol));
  if (all || suite == "rope") out.push_back(suite_rope(seed, trials, tol));
  if (all || suite == "mimo") out.push_back(suite_mimo(seed, trials, tol));
  if (all || suite == "mask") out.push_back(suite_mask(seed, trials, tol));
  if (all || suite == "grad") out.push_back(suite_grad(seed, trials, grad_tol));
  if (out.empty()) throw parameter_error("unknown verification suite: " + suite);
  return out;
}

}  // namespace mamba3
