#pragma once

// Discretization rules mapping continuous (delta, a, lambda) to the discrete
// recurrence h_t = alpha_t h_{t-1} + beta_t B_{t-1} x_{t-1} + gamma_t B_t x_t,
// plus an empirical convergence-order study against a fine-grid reference.

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "mamba3/tensor.hpp"

namespace mamba3 {

struct DiscreteCoeffs {
  double alpha = 1.0;  // state-transition multiplier
  double beta = 0.0;   // previous-step input weight (0 for two-term rules)
  double gamma = 0.0;  // current-step input weight
};

struct ContinuousStep {
  double delta = 0.0;   // step size, > 0 (0 allowed as the identity limit)
  double a = 0.0;       // scalar transition rate, typically < 0
  double lambda = 1.0;  // trapezoidal gate in [0, 1]
};

inline DiscreteCoeffs forward_euler(const ContinuousStep& s) {
  return {1.0 + s.delta * s.a, 0.0, s.delta};
}

inline DiscreteCoeffs backward_euler(const ContinuousStep& s) {
  const double den = 1.0 - s.delta * s.a;
  if (den == 0.0) throw numerical_error("backward_euler: singular denominator 1 - dA = 0");
  return {1.0 / den, 0.0, s.delta / den};
}

inline DiscreteCoeffs classical_trapezoidal(const ContinuousStep& s) {
  const double den = 1.0 - 0.5 * s.delta * s.a;
  if (den == 0.0)
    throw numerical_error("classical_trapezoidal: singular denominator 1 - (d/2)A = 0");
  return {(1.0 + 0.5 * s.delta * s.a) / den, 0.0, s.delta / den};
}

inline DiscreteCoeffs zoh(const ContinuousStep& s) {
  const double da = s.delta * s.a;
  const double alpha = std::exp(da);
  // first-order series fallback avoids cancellation in (e^{dA}-1)/A
  const double gamma = (std::abs(da) < 1e-8) ? s.delta : (alpha - 1.0) / s.a;
  return {alpha, 0.0, gamma};
}

inline DiscreteCoeffs exp_euler(const ContinuousStep& s) {
  return {std::exp(s.delta * s.a), 0.0, s.delta};
}

inline DiscreteCoeffs exp_trapezoidal(const ContinuousStep& s) {
  const double alpha = std::exp(s.delta * s.a);
  return {alpha, (1.0 - s.lambda) * s.delta * alpha, s.lambda * s.delta};
}

using DiscretizationRule = std::function<DiscreteCoeffs(const ContinuousStep&)>;

inline DiscretizationRule rule_by_name(const std::string& name) {
  if (name == "forward-euler") return forward_euler;
  if (name == "backward-euler") return backward_euler;
  if (name == "trapezoidal") return classical_trapezoidal;
  if (name == "zoh") return zoh;
  if (name == "exp-euler") return exp_euler;
  if (name == "exp-trapezoidal") return exp_trapezoidal;
  throw parameter_error("unknown discretization rule: " + name);
}

// --- convergence-order study --------------------------------------------------

// Smooth scalar test system h'(t) = a(t) h(t) + u(t) on [0, horizon].
struct ScalarTestSystem {
  std::function<double(double)> a;      // transition rate a(t)
  std::function<double(double)> input;  // state-input B(t)x(t)
  double horizon = 2.0;
  double h0 = 1.0;
};

inline ScalarTestSystem standard_smooth_system() {
  return {[](double) { return -1.0; }, [](double t) { return std::sin(t); }, 2.0, 1.0};
}

inline ScalarTestSystem constant_input_system(double c) {
  return {[](double) { return -1.0; }, [c](double) { return c; }, 2.0, 1.0};
}

// Integrates the test system with a discretization rule at step size `delta`,
// sampling a(t) at right endpoints and inputs at grid points, and returns the
// terminal state. `lambda` feeds three-term rules; two-term rules ignore it.
inline double integrate_scalar(const ScalarTestSystem& sys, const DiscretizationRule& rule,
                               double delta, double lambda = 0.5) {
  const std::size_t steps = static_cast<std::size_t>(std::llround(sys.horizon / delta));
  double h = sys.h0;
  double prev_input = 0.0;  // convention: B_{-1} x_{-1} = 0
  for (std::size_t t = 1; t <= steps; ++t) {
    const double tau = static_cast<double>(t) * delta;
    const DiscreteCoeffs c = rule({delta, sys.a(tau), lambda});
    const double cur_input = sys.input(tau);
    h = c.alpha * h + c.beta * prev_input + c.gamma * cur_input;
    prev_input = cur_input;
  }
  return h;
}

struct ConvergencePoint {
  double delta = 0.0;
  double error = 0.0;
};

struct ConvergenceStudy {
  std::vector<ConvergencePoint> points;
  double fitted_slope = 0.0;
  bool monotone = true;  // diagnostic: error decayed monotonically with delta
};

// Reference trajectory: exponential transition on a fine grid
// (delta_ref = min(deltas)/64) with Simpson quadrature of the
// exponential-adjusted state-input integral. Its error floor sits orders of
// magnitude below the coarsest measured error for smooth systems.
inline double reference_terminal_state(const ScalarTestSystem& sys, double delta_ref) {
  const std::size_t steps = static_cast<std::size_t>(std::llround(sys.horizon / delta_ref));
  const double d = sys.horizon / static_cast<double>(steps);
  double h = sys.h0;
  for (std::size_t t = 1; t <= steps; ++t) {
    const double t1 = static_cast<double>(t) * d;
    const double t0 = t1 - d;
    const double a = sys.a(t1);
    const double g0 = std::exp((t1 - t0) * a) * sys.input(t0);
    const double gm = std::exp(0.5 * d * a) * sys.input(t0 + 0.5 * d);
    const double g1 = sys.input(t1);
    h = std::exp(d * a) * h + (d / 6.0) * (g0 + 4.0 * gm + g1);
  }
  return h;
}

inline ConvergenceStudy convergence_order(const DiscretizationRule& rule,
                                          const ScalarTestSystem& sys,
                                          const std::vector<double>& deltas,
                                          double lambda = 0.5) {
  if (deltas.size() < 2) throw parameter_error("convergence_order needs >= 2 step sizes");
  double dmin = deltas[0];
  for (double d : deltas) dmin = std::min(dmin, d);
  const double href = reference_terminal_state(sys, dmin / 64.0);

  ConvergenceStudy study;
  for (double d : deltas) {
    const double h = integrate_scalar(sys, rule, d, lambda);
    study.points.push_back({d, std::abs(h - href)});
  }
  // least-squares slope of log(error) vs log(delta)
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  std::size_t n = 0;
  for (const auto& p : study.points) {
    if (p.error <= 0) continue;  // exact rule hits the floor; skip zero errors
    const double x = std::log(p.delta), y = std::log(p.error);
    sx += x;
    sy += y;
    sxx += x * x;
    sxy += x * y;
    ++n;
  }
  if (n >= 2) study.fitted_slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
  // monotonicity diagnostic over deltas sorted descending
  std::vector<ConvergencePoint> sorted = study.points;
  std::sort(sorted.begin(), sorted.end(),
            [](const ConvergencePoint& a, const ConvergencePoint& b) { return a.delta > b.delta; });
  for (std::size_t i = 1; i < sorted.size(); ++i)
    if (sorted[i].error > sorted[i - 1].error && sorted[i].error > 1e-14) study.monotone = false;
  return study;
}

inline std::vector<double> halving_deltas(double d0, std::size_t count) {
  std::vector<double> out;
  for (std::size_t i = 0; i < count; ++i) out.push_back(d0 / static_cast<double>(1ull << i));
  return out;
}

}  // namespace mamba3
