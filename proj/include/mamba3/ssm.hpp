#pragma once

// SISO recurrences (two- and three-term), block-diagonal rotation schedules,
// the RoPE trick, and an explicit complex-arithmetic reference scan. The
// complex reference never uses the rotation trick, so equivalence tests
// between the two paths are non-circular.

#include <cmath>
#include <complex>
#include <vector>

#include "mamba3/discretize.hpp"
#include "mamba3/tensor.hpp"

namespace mamba3 {

// Time-indexed continuous parameters for one head over T steps.
struct SsmSequenceParams {
  std::size_t T = 0;
  std::size_t N = 0;                        // state size; even when theta present
  std::vector<double> delta;                // [T], > 0
  std::vector<double> a;                    // [T]
  std::vector<std::vector<double>> theta;   // [T][N/2] rotation rates (empty = real SSM)
  std::vector<double> lambda;               // [T] in [0,1]
  std::vector<std::vector<double>> B;       // [T][N]
  std::vector<std::vector<double>> C;       // [T][N]
  std::vector<double> x;                    // [T] scalar channel
};

struct ScanResult {
  std::vector<std::vector<double>> h;  // [T][N]
  std::vector<double> y;               // [T]
};

inline std::vector<DiscreteCoeffs> coeffs_for(const SsmSequenceParams& p,
                                              const DiscretizationRule& rule) {
  std::vector<DiscreteCoeffs> c(p.T);
  for (std::size_t t = 0; t < p.T; ++t)
    c[t] = rule({p.delta[t], p.a[t], p.lambda.empty() ? 1.0 : p.lambda[t]});
  return c;
}

// h_t = alpha_t h_{t-1} + gamma_t B_t x_t;  y_t = C_t^T h_t
inline ScanResult scan_two_term(const std::vector<DiscreteCoeffs>& coeffs,
                                const std::vector<std::vector<double>>& B,
                                const std::vector<std::vector<double>>& C,
                                const std::vector<double>& x,
                                std::vector<double> h0 = {}) {
  const std::size_t T = coeffs.size();
  const std::size_t N = B.empty() ? 0 : B[0].size();
  std::vector<double> h = h0.empty() ? std::vector<double>(N, 0.0) : std::move(h0);
  ScanResult out;
  out.h.resize(T);
  out.y.resize(T);
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t n = 0; n < N; ++n)
      h[n] = coeffs[t].alpha * h[n] + coeffs[t].gamma * B[t][n] * x[t];
    double y = 0.0;
    for (std::size_t n = 0; n < N; ++n) y += C[t][n] * h[n];
    out.h[t] = h;
    out.y[t] = y;
  }
  return out;
}

// Three-term recurrence with the convention B_{-1} x_{-1} = 0, so a zero
// initial state gives h_0 = gamma_0 B_0 x_0.
inline ScanResult scan_three_term(const std::vector<DiscreteCoeffs>& coeffs,
                                  const std::vector<std::vector<double>>& B,
                                  const std::vector<std::vector<double>>& C,
                                  const std::vector<double>& x,
                                  std::vector<double> h0 = {}) {
  const std::size_t T = coeffs.size();
  const std::size_t N = B.empty() ? 0 : B[0].size();
  std::vector<double> h = h0.empty() ? std::vector<double>(N, 0.0) : std::move(h0);
  ScanResult out;
  out.h.resize(T);
  out.y.resize(T);
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t n = 0; n < N; ++n) {
      double v = coeffs[t].gamma * B[t][n] * x[t];
      if (t > 0) v += coeffs[t].beta * B[t - 1][n] * x[t - 1];
      h[n] = coeffs[t].alpha * h[n] + v;
    }
    double y = 0.0;
    for (std::size_t n = 0; n < N; ++n) y += C[t][n] * h[n];
    out.h[t] = h;
    out.y[t] = y;
  }
  return out;
}

// --- rotations ---------------------------------------------------------------

// R(theta) = [[cos, -sin], [sin, cos]] as a 2x2 tensor
inline Tensor rotation_matrix(double angle) {
  const double c = std::cos(angle), s = std::sin(angle);
  return Tensor({2, 2}, {c, -s, s, c});
}

// Per-step angles delta_t * theta_t and their inclusive prefix sums. The
// rotation group is abelian per pair, so cumulative angles stand in for
// materialized matrix products.
struct RotationSchedule {
  std::vector<std::vector<double>> angles;      // [T][N/2]
  std::vector<std::vector<double>> cumulative;  // [T][N/2], inclusive
};

inline RotationSchedule build_rotation_schedule(const std::vector<double>& delta,
                                                const std::vector<std::vector<double>>& theta) {
  const std::size_t T = delta.size();
  RotationSchedule s;
  s.angles.resize(T);
  s.cumulative.resize(T);
  const std::size_t pairs = theta.empty() ? 0 : theta[0].size();
  std::vector<double> run(pairs, 0.0);
  for (std::size_t t = 0; t < T; ++t) {
    s.angles[t].resize(pairs);
    s.cumulative[t].resize(pairs);
    for (std::size_t i = 0; i < pairs; ++i) {
      s.angles[t][i] = delta[t] * theta[t][i];
      run[i] += s.angles[t][i];
      s.cumulative[t][i] = run[i];
    }
  }
  return s;
}

// Rotates adjacent pairs (v_{2i}, v_{2i+1}) by sign * cumulative_angle[i].
// sign = -1 applies the transposed product (prod R_i^T).
inline std::vector<double> apply_rope(const std::vector<double>& vec,
                                      const std::vector<double>& cumulative_angle, int sign) {
  if (vec.size() % 2 != 0)
    throw dimension_error("apply_rope requires an even vector length, got " +
                          std::to_string(vec.size()));
  std::vector<double> out(vec.size());
  for (std::size_t i = 0; i < cumulative_angle.size(); ++i) {
    const double ang = sign * cumulative_angle[i];
    const double c = std::cos(ang), s = std::sin(ang);
    out[2 * i] = c * vec[2 * i] - s * vec[2 * i + 1];
    out[2 * i + 1] = s * vec[2 * i] + c * vec[2 * i + 1];
  }
  return out;
}

// --- complex reference oracle --------------------------------------------------

// Explicit complex-arithmetic scan of the discretized complex SSM:
//   h_t = e^{d(A + i theta)} h_{t-1} + beta_t e^{i d theta} Bc_{t-1} x_{t-1}
//         + gamma_t Bc_t x_t,   y_t = Re(Cc_t^H-style readout)
// where Bc[i] = B[2i] + i B[2i+1] and the real readout vector [C; -Chat]
// corresponds to Cc[i] = C[2i] - i C[2i+1]. Oracle only; the production path
// is scan_with_rope.
inline std::vector<double> scan_complex_reference(const SsmSequenceParams& p,
                                                  const DiscretizationRule& rule,
                                                  std::vector<double> h0_real = {}) {
  const std::size_t pairs = p.N / 2;
  std::vector<std::complex<double>> h(pairs, {0.0, 0.0});
  if (!h0_real.empty())
    for (std::size_t i = 0; i < pairs; ++i) h[i] = {h0_real[2 * i], h0_real[2 * i + 1]};
  std::vector<double> y(p.T, 0.0);
  for (std::size_t t = 0; t < p.T; ++t) {
    const DiscreteCoeffs c = rule({p.delta[t], p.a[t], p.lambda.empty() ? 1.0 : p.lambda[t]});
    for (std::size_t i = 0; i < pairs; ++i) {
      const double ang = p.theta.empty() ? 0.0 : p.delta[t] * p.theta[t][i];
      const std::complex<double> rot(std::cos(ang), std::sin(ang));
      std::complex<double> v = c.gamma *
          std::complex<double>(p.B[t][2 * i], p.B[t][2 * i + 1]) * p.x[t];
      if (t > 0 && c.beta != 0.0)
        v += c.beta * rot *
             std::complex<double>(p.B[t - 1][2 * i], p.B[t - 1][2 * i + 1]) * p.x[t - 1];
      h[i] = c.alpha * rot * h[i] + v;
    }
    double yt = 0.0;
    for (std::size_t i = 0; i < pairs; ++i) {
      const std::complex<double> cc(p.C[t][2 * i], -p.C[t][2 * i + 1]);
      yt += (cc * h[i]).real();
    }
    y[t] = yt;
  }
  return y;
}

// --- RoPE-trick scan -----------------------------------------------------------

// Rotates B_t and C_t by the inclusive cumulative angles through step t
// (the beta term's product through t-1 falls out automatically because it
// reuses the already-rotated B_{t-1}), then runs the plain real scan.
// A nonzero h0 enters the rotated recurrence unrotated; rotation at step 0
// still reaches it through the rotated readout C-bar.
inline ScanResult scan_with_rope(const SsmSequenceParams& p, const DiscretizationRule& rule,
                                 std::vector<double> h0 = {}) {
  const RotationSchedule sched = build_rotation_schedule(p.delta, p.theta);
  std::vector<std::vector<double>> Bbar(p.T), Cbar(p.T);
  for (std::size_t t = 0; t < p.T; ++t) {
    if (p.theta.empty()) {
      Bbar[t] = p.B[t];
      Cbar[t] = p.C[t];
    } else {
      Bbar[t] = apply_rope(p.B[t], sched.cumulative[t], -1);
      Cbar[t] = apply_rope(p.C[t], sched.cumulative[t], -1);
    }
  }
  return scan_three_term(coeffs_for(p, rule), Bbar, Cbar, p.x, std::move(h0));
}

// --- random instances for equivalence suites -----------------------------------

inline SsmSequenceParams random_ssm_params(Rng& rng, std::size_t T, std::size_t N,
                                           bool with_theta) {
  SsmSequenceParams p;
  p.T = T;
  p.N = N;
  p.delta.resize(T);
  p.a.resize(T);
  p.lambda.resize(T);
  p.B.resize(T);
  p.C.resize(T);
  p.x.resize(T);
  if (with_theta) p.theta.resize(T);
  for (std::size_t t = 0; t < T; ++t) {
    p.delta[t] = rng.uniform(0.05, 1.0);
    p.a[t] = rng.uniform(-2.0, -0.05);
    p.lambda[t] = rng.uniform(0.0, 1.0);
    p.x[t] = rng.normal(0.0, 1.0);
    p.B[t].resize(N);
    p.C[t].resize(N);
    for (std::size_t n = 0; n < N; ++n) {
      p.B[t][n] = rng.normal(0.0, 1.0);
      p.C[t][n] = rng.normal(0.0, 1.0);
    }
    if (with_theta) {
      p.theta[t].resize(N / 2);
      for (std::size_t i = 0; i < N / 2; ++i) p.theta[t][i] = rng.uniform(-4.0, 4.0);
    }
  }
  return p;
}

}  // namespace mamba3
