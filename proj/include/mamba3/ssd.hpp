#pragma once

// Masked-quadratic (parallel) form of the recurrences, the structured masks
// with their 1-semiseparable x 2-band factorization, the exact chunked
// algorithm, and analytic + instrumented FLOP accounting.
//
// FLOP convention (used everywhere): one multiply-add = 2 FLOPs. The meters
// track the four leading-order terms of the chunked algorithm (intra-chunk
// C B^T and masked apply; inter-chunk state projection and emission) plus the
// per-chunk state decay. Mask construction, band-weight preparation and the
// boundary convolution carry are lower-order and left unmetered.

#include <algorithm>
#include <cstdint>
#include <string>
#include <vector>

#include "mamba3/discretize.hpp"
#include "mamba3/ssm.hpp"
#include "mamba3/tensor.hpp"

namespace mamba3 {

inline constexpr std::size_t kMaxDenseMaskSize = 4096;  // oracle surface, not production

struct StructuredMask {
  Tensor dense;                 // T x T lower triangular
  Tensor semiseparable_factor;  // T x T cumulative-alpha lower triangle
  Tensor band_factor;           // T x T, gamma on diagonal, beta on subdiagonal
};

namespace detail {

inline void check_mask_size(std::size_t T) {
  if (T > kMaxDenseMaskSize)
    throw parameter_error("dense masks are materialized only for T <= " +
                          std::to_string(kMaxDenseMaskSize));
}

inline void verify_factorization(StructuredMask& m, double tol = 1e-12) {
  const Tensor prod = matmul(m.semiseparable_factor, m.band_factor);
  if (max_abs_diff(prod, m.dense) > tol)
    throw numerical_error("structured mask factorization mismatch beyond tolerance");
}

}  // namespace detail

// Mamba-2 mask (Eq. of the two-term recurrence): L[t][s] = prod_{i=s+1..t} alpha_i * gamma_s.
inline StructuredMask build_mamba2_mask(const std::vector<double>& alpha,
                                        const std::vector<double>& gamma) {
  const std::size_t T = alpha.size();
  detail::check_mask_size(T);
  StructuredMask m{Tensor({T, T}), Tensor({T, T}), Tensor({T, T})};
  for (std::size_t t = 0; t < T; ++t) {
    double decay = 1.0;
    for (std::size_t s = t + 1; s-- > 0;) {
      if (s < t) decay *= alpha[s + 1];
      m.semiseparable_factor.at2(t, s) = decay;
      m.dense.at2(t, s) = decay * gamma[s];
    }
    m.band_factor.at2(t, t) = gamma[t];
  }
  detail::verify_factorization(m);
  return m;
}

// Mamba-3 mask: 1-semiseparable decay composed with the 2-band (beta, gamma)
// input convolution. The product identity is asserted on construction.
inline StructuredMask build_mamba3_mask(const std::vector<DiscreteCoeffs>& coeffs) {
  const std::size_t T = coeffs.size();
  detail::check_mask_size(T);
  StructuredMask m{Tensor({T, T}), Tensor({T, T}), Tensor({T, T})};
  for (std::size_t t = 0; t < T; ++t) {
    double decay = 1.0;   // prod_{i=s+1..t} alpha_i
    double decay2 = 1.0;  // prod_{i=s+2..t} alpha_i (the beta term enters one step later)
    for (std::size_t s = t + 1; s-- > 0;) {
      if (s < t) {
        decay2 = decay;
        decay *= coeffs[s + 1].alpha;
      }
      m.semiseparable_factor.at2(t, s) = decay;
      // summed in factor-product order so the identity check is exact
      m.dense.at2(t, s) = (s == t) ? coeffs[t].gamma
                                   : decay * coeffs[s].gamma + decay2 * coeffs[s + 1].beta;
    }
    m.band_factor.at2(t, t) = coeffs[t].gamma;
    if (t > 0) m.band_factor.at2(t, t - 1) = coeffs[t].beta;
  }
  detail::verify_factorization(m);
  return m;
}

// --- FLOP accounting -----------------------------------------------------------

struct FlopReport {
  std::int64_t intra = 0;
  std::int64_t inter = 0;
  std::size_t T = 0, C = 0, N = 0, P = 0, R = 1;
  bool chunk_divides = true;  // false when the report used ceil(T/C)
  std::int64_t total() const { return intra + inter; }
  // Leading-order total: drops the per-chunk state-decay term the closed-form
  // 8TN^2 / 8TRN^2 expressions ignore.
  std::int64_t leading_total() const {
    const std::int64_t chunks = static_cast<std::int64_t>((T + C - 1) / C);
    return total() - chunks * 2 * static_cast<std::int64_t>(N) * static_cast<std::int64_t>(P);
  }
};

inline FlopReport flop_count_siso(std::size_t T, std::size_t C, std::size_t N, std::size_t P) {
  FlopReport r;
  r.T = T;
  r.C = C;
  r.N = N;
  r.P = P;
  r.chunk_divides = (T % C == 0);
  const std::int64_t chunks = static_cast<std::int64_t>((T + C - 1) / C);
  const std::int64_t c = C, n = N, p = P;
  r.intra = chunks * (2 * c * c * n + 2 * c * c * p);
  r.inter = chunks * (4 * n * p * c + 2 * n * p);
  return r;
}

inline FlopReport flop_count_mimo(std::size_t T, std::size_t C, std::size_t N, std::size_t P,
                                  std::size_t R) {
  FlopReport r;
  r.T = T;
  r.C = C;
  r.N = N;
  r.P = P;
  r.R = R;
  r.chunk_divides = (T % C == 0);
  const std::int64_t chunks = static_cast<std::int64_t>((T + C - 1) / C);
  const std::int64_t cr = static_cast<std::int64_t>(C) * static_cast<std::int64_t>(R);
  const std::int64_t n = N, p = P;
  r.intra = chunks * (2 * cr * cr * n + 2 * cr * cr * p);
  r.inter = chunks * (4 * n * p * cr + 2 * n * p);
  return r;
}

// Recommended MIMO chunk size: 1/R times the SISO chunk size.
inline std::size_t mimo_chunk_size(std::size_t siso_chunk, std::size_t R) {
  return std::max<std::size_t>(1, siso_chunk / R);
}

struct FlopCounter {
  std::int64_t intra = 0;
  std::int64_t inter = 0;
  std::int64_t total() const { return intra + inter; }
};

// --- quadratic (materialized) form ----------------------------------------------

// Y = (L (.) C B^T) X with B, C: T x N and X: T x P. O(T^2) oracle path.
inline Tensor quadratic_forward(const StructuredMask& mask, const Tensor& B, const Tensor& C,
                                const Tensor& X, FlopCounter* flops = nullptr) {
  const std::size_t T = mask.dense.extent(0);
  if (B.rank() != 2 || C.rank() != 2 || X.rank() != 2 || B.extent(0) != T || C.extent(0) != T ||
      X.extent(0) != T || B.extent(1) != C.extent(1))
    throw dimension_error("quadratic_forward shape mismatch: L " + shape_str(mask.dense.shape()) +
                          ", B " + shape_str(B.shape()) + ", C " + shape_str(C.shape()) + ", X " +
                          shape_str(X.shape()));
  const std::size_t N = B.extent(1), P = X.extent(1);
  // G = C B^T, computed over the full square to match the metered 2T^2N cost
  Tensor G({T, T});
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t s = 0; s < T; ++s) {
      double acc = 0.0;
      for (std::size_t n = 0; n < N; ++n) acc += C.at2(t, n) * B.at2(s, n);
      G.at2(t, s) = acc;
    }
  Tensor Y({T, P});
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t s = 0; s < T; ++s) {
      const double w = mask.dense.at2(t, s) * G.at2(t, s);
      for (std::size_t p = 0; p < P; ++p) Y.at2(t, p) += w * X.at2(s, p);
    }
  if (flops) flops->intra += static_cast<std::int64_t>(2 * T * T * (N + P));
  return Y;
}

// --- exact chunked algorithm -----------------------------------------------------

// Chunked three-term forward. Within each chunk the masked quadratic form is
// applied; across chunks the matrix state h (N x P) is carried, together with
// the trailing rank-1 state-input (b, x) needed by the beta term that crosses
// the boundary.
inline Tensor chunked_forward(const std::vector<DiscreteCoeffs>& coeffs, const Tensor& B,
                              const Tensor& C, const Tensor& X, std::size_t chunk,
                              FlopCounter* flops = nullptr) {
  const std::size_t T = coeffs.size(), N = B.extent(1), P = X.extent(1);
  if (chunk < 1) throw parameter_error("chunk size must be >= 1");
  Tensor Y({T, P});
  std::vector<double> h(N * P, 0.0);  // carried state
  std::vector<double> b_prev(N, 0.0);
  std::vector<double> x_prev(P, 0.0);
  bool have_prev = false;

  for (std::size_t s0 = 0; s0 < T; s0 += chunk) {
    const std::size_t c = std::min(chunk, T - s0);

    // chunk-local three-term mask (short final chunks get exact short masks)
    std::vector<DiscreteCoeffs> local(coeffs.begin() + s0, coeffs.begin() + s0 + c);
    const StructuredMask mask = build_mamba3_mask(local);

    // intra-chunk: G = C B^T over the full square, then masked apply
    std::vector<double> G(c * c);
    for (std::size_t t = 0; t < c; ++t)
      for (std::size_t s = 0; s < c; ++s) {
        double acc = 0.0;
        for (std::size_t n = 0; n < N; ++n) acc += C.at2(s0 + t, n) * B.at2(s0 + s, n);
        G[t * c + s] = acc;
      }
    for (std::size_t t = 0; t < c; ++t)
      for (std::size_t s = 0; s < c; ++s) {
        const double w = mask.dense.at2(t, s) * G[t * c + s];
        for (std::size_t p = 0; p < P; ++p) Y.at2(s0 + t, p) += w * X.at2(s0 + s, p);
      }
    if (flops) flops->intra += static_cast<std::int64_t>(2 * c * c * (N + P));

    // decay products prod_{i=s0..t} alpha_i within the chunk
    std::vector<double> decay_in(c);
    double run = 1.0;
    for (std::size_t t = 0; t < c; ++t) {
      run *= local[t].alpha;
      decay_in[t] = run;
    }

    // inter-chunk emission: y_t += decay_in[t] * C_t^T h_in
    for (std::size_t t = 0; t < c; ++t) {
      for (std::size_t p = 0; p < P; ++p) {
        double acc = 0.0;
        for (std::size_t n = 0; n < N; ++n) acc += C.at2(s0 + t, n) * h[n * P + p];
        Y.at2(s0 + t, p) += decay_in[t] * acc;
      }
    }
    if (flops) flops->inter += static_cast<std::int64_t>(2 * c * N * P);

    // boundary beta carry: previous chunk's last state-input enters at local
    // position 0 with weight beta_{s0} and decays like an input there.
    // O(c(N+P)) rank-1 work, unmetered (negligible class).
    if (have_prev && local[0].beta != 0.0) {
      for (std::size_t t = 0; t < c; ++t) {
        const double coef = local[0].beta * decay_in[t] / local[0].alpha;
        double q = 0.0;
        for (std::size_t n = 0; n < N; ++n) q += C.at2(s0 + t, n) * b_prev[n];
        for (std::size_t p = 0; p < P; ++p) Y.at2(s0 + t, p) += coef * q * x_prev[p];
      }
    }

    // state update: h_out = (prod alpha) h_in + sum_s kappa_s B_s x_s^T where
    // kappa_s folds the band weights and the decay to the chunk end.
    std::vector<double> kappa(c);
    for (std::size_t s = 0; s < c; ++s) {
      double d_from_s1 = 1.0;  // prod_{i=s+2..c-1} alpha
      for (std::size_t i = s + 2; i < c; ++i) d_from_s1 *= local[i].alpha;
      double v = (s + 1 < c) ? d_from_s1 * (local[s].gamma * local[s + 1].alpha + local[s + 1].beta)
                             : local[s].gamma;
      kappa[s] = v;
    }
    const double total_decay = decay_in[c - 1];
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t p = 0; p < P; ++p) h[n * P + p] *= total_decay;
    if (flops) flops->inter += static_cast<std::int64_t>(2 * N * P);
    if (have_prev && local[0].beta != 0.0) {
      // cross-boundary input contribution to the carried state
      double d = local[0].beta;
      for (std::size_t i = 1; i < c; ++i) d *= local[i].alpha;
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t p = 0; p < P; ++p) h[n * P + p] += d * b_prev[n] * x_prev[p];
    }
    for (std::size_t s = 0; s < c; ++s) {
      const double w = kappa[s];
      for (std::size_t n = 0; n < N; ++n) {
        const double bw = w * B.at2(s0 + s, n);
        for (std::size_t p = 0; p < P; ++p) h[n * P + p] += bw * X.at2(s0 + s, p);
      }
    }
    if (flops) flops->inter += static_cast<std::int64_t>(2 * c * N * P);

    for (std::size_t n = 0; n < N; ++n) b_prev[n] = B.at2(s0 + c - 1, n);
    for (std::size_t p = 0; p < P; ++p) x_prev[p] = X.at2(s0 + c - 1, p);
    have_prev = true;
  }
  return Y;
}

}  // namespace mamba3
