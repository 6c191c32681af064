#pragma once

// Matrix-state rank-R recurrence H_t = a_t H_{t-1} + B_t X_t^T with readout
// Y_t = H_t^T C_t, its decomposition into R^2 rank-1 systems, the chunked
// form over widened positions, head projections, and the arithmetic-intensity
// model for decode.

#include <algorithm>
#include <cstdint>
#include <string>
#include <vector>

#include "mamba3/discretize.hpp"
#include "mamba3/ssd.hpp"
#include "mamba3/ssm.hpp"
#include "mamba3/tensor.hpp"

namespace mamba3 {

struct MimoHeadParams {
  std::size_t T = 0, N = 0, P = 0, R = 1;
  std::vector<double> a;                // [T] per-step decay alpha_t
  std::vector<double> delta;            // [T]
  std::vector<DiscreteCoeffs> coeffs;   // optional three-term weights; empty = {a_t, 0, 1}
  std::vector<Tensor> B;                // [T] N x R
  std::vector<Tensor> C;                // [T] N x R
  std::vector<Tensor> X;                // [T] P x R

  std::vector<DiscreteCoeffs> effective_coeffs() const {
    if (!coeffs.empty()) return coeffs;
    std::vector<DiscreteCoeffs> out(T);
    for (std::size_t t = 0; t < T; ++t) out[t] = {a[t], 0.0, 1.0};
    return out;
  }
};

// One decode step. H (N x P) is the only mutable object and is updated in
// place through this exclusive reference. Returns Y = H'^T C (P x R).
inline Tensor mimo_decode_step(Tensor& H, double a, const Tensor& B, const Tensor& X,
                               const Tensor& C) {
  const std::size_t N = H.extent(0), P = H.extent(1);
  if (B.rank() != 2 || X.rank() != 2 || C.rank() != 2 || B.extent(0) != N || C.extent(0) != N ||
      X.extent(0) != P || B.extent(1) != X.extent(1) || B.extent(1) != C.extent(1))
    throw dimension_error("mimo_decode_step shape mismatch: H " + shape_str(H.shape()) + ", B " +
                          shape_str(B.shape()) + ", X " + shape_str(X.shape()) + ", C " +
                          shape_str(C.shape()));
  const std::size_t R = B.extent(1);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t p = 0; p < P; ++p) {
      double acc = a * H.at2(n, p);
      for (std::size_t r = 0; r < R; ++r) acc += B.at2(n, r) * X.at2(p, r);
      H.at2(n, p) = acc;
    }
  Tensor Y({P, R});
  for (std::size_t p = 0; p < P; ++p)
    for (std::size_t r = 0; r < R; ++r) {
      double acc = 0.0;
      for (std::size_t n = 0; n < N; ++n) acc += H.at2(n, p) * C.at2(n, r);
      Y.at2(p, r) = acc;
    }
  return Y;
}

// Full trajectory through repeated decode steps, generalized to the
// three-term weights when params.coeffs is set.
inline std::vector<Tensor> mimo_decode_trajectory(const MimoHeadParams& params) {
  const auto cs = params.effective_coeffs();
  Tensor H({params.N, params.P});
  std::vector<Tensor> Y;
  Y.reserve(params.T);
  for (std::size_t t = 0; t < params.T; ++t) {
    for (std::size_t n = 0; n < params.N; ++n)
      for (std::size_t p = 0; p < params.P; ++p) {
        double v = cs[t].alpha * H.at2(n, p);
        for (std::size_t r = 0; r < params.R; ++r) {
          v += cs[t].gamma * params.B[t].at2(n, r) * params.X[t].at2(p, r);
          if (t > 0)
            v += cs[t].beta * params.B[t - 1].at2(n, r) * params.X[t - 1].at2(p, r);
        }
        H.at2(n, p) = v;
      }
    Tensor Yt({params.P, params.R});
    for (std::size_t p = 0; p < params.P; ++p)
      for (std::size_t r = 0; r < params.R; ++r) {
        double acc = 0.0;
        for (std::size_t n = 0; n < params.N; ++n) acc += H.at2(n, p) * params.C[t].at2(n, r);
        Yt.at2(p, r) = acc;
      }
    Y.push_back(std::move(Yt));
  }
  return Y;
}

// Decomposition oracle: R^2 black-box rank-1 scans, one per (readout column i,
// input column j), summed. Deliberately naive so it shares no code with the
// step or chunked paths.
inline std::vector<Tensor> mimo_via_siso(const MimoHeadParams& params) {
  const auto cs = params.effective_coeffs();
  std::vector<Tensor> Y(params.T, Tensor({params.P, params.R}));
  std::vector<std::vector<double>> Bj(params.T), Ci(params.T);
  for (std::size_t i = 0; i < params.R; ++i) {
    for (std::size_t j = 0; j < params.R; ++j) {
      for (std::size_t t = 0; t < params.T; ++t) {
        Bj[t].resize(params.N);
        Ci[t].resize(params.N);
        for (std::size_t n = 0; n < params.N; ++n) {
          Bj[t][n] = params.B[t].at2(n, j);
          Ci[t][n] = params.C[t].at2(n, i);
        }
      }
      for (std::size_t p = 0; p < params.P; ++p) {
        std::vector<double> x(params.T);
        for (std::size_t t = 0; t < params.T; ++t) x[t] = params.X[t].at2(p, j);
        const ScanResult r = scan_three_term(cs, Bj, Ci, x);
        for (std::size_t t = 0; t < params.T; ++t) Y[t].at2(p, i) += r.y[t];
      }
    }
  }
  return Y;
}

// Chunked forward treating the R columns of each step as widened sequence
// positions: a chunk of length c does its quadratic work on cR rows. Default
// chunk size follows the 1/R-of-SISO rule via mimo_chunk_size.
inline std::vector<Tensor> mimo_chunked_forward(const MimoHeadParams& params, std::size_t chunk,
                                                FlopCounter* flops = nullptr) {
  if (chunk < 1) throw parameter_error("chunk size must be >= 1");
  const auto cs = params.effective_coeffs();
  const std::size_t T = params.T, N = params.N, P = params.P, R = params.R;
  std::vector<Tensor> Y(T, Tensor({P, R}));
  Tensor h({N, P});
  Tensor b_prev({N, R}), x_prev({P, R});
  bool have_prev = false;

  for (std::size_t s0 = 0; s0 < T; s0 += chunk) {
    const std::size_t c = std::min(chunk, T - s0);
    const std::size_t W = c * R;

    std::vector<DiscreteCoeffs> local(cs.begin() + s0, cs.begin() + s0 + c);
    const StructuredMask mask = build_mamba3_mask(local);

    // widened views: row t*R + r
    Tensor Bw({W, N}), Cw({W, N}), Xw({W, P});
    for (std::size_t t = 0; t < c; ++t)
      for (std::size_t r = 0; r < R; ++r) {
        for (std::size_t n = 0; n < N; ++n) {
          Bw.at2(t * R + r, n) = params.B[s0 + t].at2(n, r);
          Cw.at2(t * R + r, n) = params.C[s0 + t].at2(n, r);
        }
        for (std::size_t p = 0; p < P; ++p) Xw.at2(t * R + r, p) = params.X[s0 + t].at2(p, r);
      }

    std::vector<double> G(W * W);
    for (std::size_t u = 0; u < W; ++u)
      for (std::size_t v = 0; v < W; ++v) {
        double acc = 0.0;
        for (std::size_t n = 0; n < N; ++n) acc += Cw.at2(u, n) * Bw.at2(v, n);
        G[u * W + v] = acc;
      }
    for (std::size_t u = 0; u < W; ++u) {
      const std::size_t t = u / R, i = u % R;
      for (std::size_t v = 0; v < W; ++v) {
        const double w = mask.dense.at2(t, v / R) * G[u * W + v];
        for (std::size_t p = 0; p < P; ++p) Y[s0 + t].at2(p, i) += w * Xw.at2(v, p);
      }
    }
    if (flops) flops->intra += static_cast<std::int64_t>(2 * W * W * (N + P));

    std::vector<double> decay_in(c);
    double run = 1.0;
    for (std::size_t t = 0; t < c; ++t) {
      run *= local[t].alpha;
      decay_in[t] = run;
    }

    // inter-chunk emission: Y_t column i += decay * C^{(i)T} h_in
    for (std::size_t u = 0; u < W; ++u) {
      const std::size_t t = u / R, i = u % R;
      for (std::size_t p = 0; p < P; ++p) {
        double acc = 0.0;
        for (std::size_t n = 0; n < N; ++n) acc += Cw.at2(u, n) * h.at2(n, p);
        Y[s0 + t].at2(p, i) += decay_in[t] * acc;
      }
    }
    if (flops) flops->inter += static_cast<std::int64_t>(2 * W * N * P);

    // boundary beta carry (rank-R, unmetered like the SISO path)
    if (have_prev && local[0].beta != 0.0) {
      for (std::size_t u = 0; u < W; ++u) {
        const std::size_t t = u / R, i = u % R;
        const double coef = local[0].beta * decay_in[t] / local[0].alpha;
        for (std::size_t j = 0; j < R; ++j) {
          double q = 0.0;
          for (std::size_t n = 0; n < N; ++n) q += Cw.at2(u, n) * b_prev.at2(n, j);
          for (std::size_t p = 0; p < P; ++p) Y[s0 + t].at2(p, i) += coef * q * x_prev.at2(p, j);
        }
      }
    }

    // state update: decay + band-weighted widened projection
    std::vector<double> kappa(c);
    for (std::size_t s = 0; s < c; ++s) {
      double d = 1.0;
      for (std::size_t i2 = s + 2; i2 < c; ++i2) d *= local[i2].alpha;
      kappa[s] = (s + 1 < c) ? d * (local[s].gamma * local[s + 1].alpha + local[s + 1].beta)
                             : local[s].gamma;
    }
    const double total_decay = decay_in[c - 1];
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t p = 0; p < P; ++p) h.at2(n, p) *= total_decay;
    if (flops) flops->inter += static_cast<std::int64_t>(2 * N * P);
    if (have_prev && local[0].beta != 0.0) {
      double d = local[0].beta;
      for (std::size_t i2 = 1; i2 < c; ++i2) d *= local[i2].alpha;
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t p = 0; p < P; ++p) {
          double acc = 0.0;
          for (std::size_t j = 0; j < R; ++j) acc += b_prev.at2(n, j) * x_prev.at2(p, j);
          h.at2(n, p) += d * acc;
        }
    }
    for (std::size_t v = 0; v < W; ++v) {
      const double w = kappa[v / R];
      for (std::size_t n = 0; n < N; ++n) {
        const double bw = w * Bw.at2(v, n);
        for (std::size_t p = 0; p < P; ++p) h.at2(n, p) += bw * Xw.at2(v, p);
      }
    }
    if (flops) flops->inter += static_cast<std::int64_t>(2 * W * N * P);

    b_prev = params.B[s0 + c - 1];
    x_prev = params.X[s0 + c - 1];
    have_prev = true;
  }
  return Y;
}

// --- arithmetic intensity (decode) ----------------------------------------------

struct IntensityReport {
  std::int64_t flops = 0;
  std::int64_t bytes = 0;
  double intensity = 0.0;
  int dtype_bytes = 2;
  std::string regime;  // asymptotic label
};

// One decode step of the rank-1 system: flops = 5NP - P over
// bytes = dtype * (1 + 2N + P + NP). Tends to 2.5 as N, P grow.
inline IntensityReport arithmetic_intensity_siso(std::size_t N, std::size_t P, int dtype_bytes) {
  if (dtype_bytes != 2 && dtype_bytes != 4)
    throw parameter_error("dtype_bytes must be 2 or 4, got " + std::to_string(dtype_bytes));
  IntensityReport r;
  const std::int64_t n = N, p = P;
  r.flops = 5 * n * p - p;
  r.bytes = dtype_bytes * (1 + 2 * n + p + n * p);
  r.intensity = static_cast<double>(r.flops) / static_cast<double>(r.bytes);
  r.dtype_bytes = dtype_bytes;
  r.regime = "Theta(1)";
  return r;
}

// Rank-R decode step: flops = 4NPR + NP - PR over
// bytes = dtype * (1 + 2NR + PR + NP). Grows linearly in R while R << N, P.
inline IntensityReport arithmetic_intensity_mimo(std::size_t N, std::size_t P, std::size_t R,
                                                 int dtype_bytes) {
  if (dtype_bytes != 2 && dtype_bytes != 4)
    throw parameter_error("dtype_bytes must be 2 or 4, got " + std::to_string(dtype_bytes));
  IntensityReport r;
  const std::int64_t n = N, p = P, rr = R;
  r.flops = 4 * n * p * rr + n * p - p * rr;
  r.bytes = dtype_bytes * (1 + 2 * n * rr + p * rr + n * p);
  r.intensity = static_cast<double>(r.flops) / static_cast<double>(r.bytes);
  r.dtype_bytes = dtype_bytes;
  r.regime = "Theta(min(N,P,R))";
  return r;
}

// --- head projections ------------------------------------------------------------

// Per-head projection weights. B and C get full D -> N x R contractions; the
// X and gate paths go D -> P and are then expanded to rank R by a learnable
// elementwise scale, costing DP + PR parameters per head instead of DPR.
struct MimoProjectionWeights {
  std::size_t D = 0, N = 0, P = 0, R = 1;
  Tensor W_B;        // D x (N*R)
  Tensor W_C;        // D x (N*R)
  Tensor W_X;        // P x D
  Tensor X_scale;    // P x R
  Tensor W_Z;        // P x D
  Tensor Z_scale;    // P x R
};

struct MimoProjectedToken {
  Tensor B;  // N x R
  Tensor C;  // N x R
  Tensor X;  // P x R
  Tensor Z;  // P x R
};

inline std::size_t mimo_x_path_params(std::size_t D, std::size_t P, std::size_t R) {
  return D * P + P * R;
}
inline std::size_t mimo_bc_path_params(std::size_t D, std::size_t N, std::size_t R) {
  return D * N * R;
}

inline std::vector<MimoProjectedToken> mimo_head_projections(const Tensor& U,
                                                             const MimoProjectionWeights& w) {
  if (U.rank() != 2 || U.extent(1) != w.D)
    throw dimension_error("mimo_head_projections expects U [T x " + std::to_string(w.D) +
                          "], got " + shape_str(U.shape()));
  const std::size_t T = U.extent(0), D = w.D, N = w.N, P = w.P, R = w.R;
  std::vector<MimoProjectedToken> out(T);
  for (std::size_t t = 0; t < T; ++t) {
    MimoProjectedToken& tok = out[t];
    tok.B = Tensor({N, R});
    tok.C = Tensor({N, R});
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t r = 0; r < R; ++r) {
        double vb = 0.0, vc = 0.0;
        for (std::size_t d = 0; d < D; ++d) {
          vb += U.at2(t, d) * w.W_B.at2(d, n * R + r);
          vc += U.at2(t, d) * w.W_C.at2(d, n * R + r);
        }
        tok.B.at2(n, r) = vb;
        tok.C.at2(n, r) = vc;
      }
    tok.X = Tensor({P, R});
    tok.Z = Tensor({P, R});
    for (std::size_t p = 0; p < P; ++p) {
      double vx = 0.0, vz = 0.0;
      for (std::size_t d = 0; d < D; ++d) {
        vx += w.W_X.at2(p, d) * U.at2(t, d);
        vz += w.W_Z.at2(p, d) * U.at2(t, d);
      }
      for (std::size_t r = 0; r < R; ++r) {
        tok.X.at2(p, r) = vx * w.X_scale.at2(p, r);
        tok.Z.at2(p, r) = vz * w.Z_scale.at2(p, r);
      }
    }
  }
  return out;
}

// --- small numeric helper used by the rank-accounting property -------------------

inline std::size_t matrix_rank(Tensor m, double tol = 1e-9) {
  if (m.rank() != 2) throw dimension_error("matrix_rank expects a 2D tensor");
  const std::size_t rows = m.extent(0), cols = m.extent(1);
  std::size_t rank = 0;
  for (std::size_t col = 0; col < cols && rank < rows; ++col) {
    std::size_t piv = rank;
    for (std::size_t r = rank + 1; r < rows; ++r)
      if (std::abs(m.at2(r, col)) > std::abs(m.at2(piv, col))) piv = r;
    if (std::abs(m.at2(piv, col)) <= tol) continue;
    for (std::size_t c2 = 0; c2 < cols; ++c2) std::swap(m.at2(piv, c2), m.at2(rank, c2));
    for (std::size_t r = rank + 1; r < rows; ++r) {
      const double f = m.at2(r, col) / m.at2(rank, col);
      for (std::size_t c2 = col; c2 < cols; ++c2) m.at2(r, c2) -= f * m.at2(rank, c2);
    }
    ++rank;
  }
  return rank;
}

// Random instance helper shared by tests and the verify suites.
inline MimoHeadParams random_mimo_params(Rng& rng, std::size_t T, std::size_t N, std::size_t P,
                                         std::size_t R, bool three_term = false) {
  MimoHeadParams m;
  m.T = T;
  m.N = N;
  m.P = P;
  m.R = R;
  m.a.resize(T);
  m.delta.resize(T);
  for (std::size_t t = 0; t < T; ++t) {
    m.delta[t] = rng.uniform(0.05, 1.0);
    m.a[t] = rng.uniform(0.1, 0.99);
    m.B.push_back(rand_normal(rng, {N, R}, 0.0, 1.0));
    m.C.push_back(rand_normal(rng, {N, R}, 0.0, 1.0));
    m.X.push_back(rand_normal(rng, {P, R}, 0.0, 1.0));
  }
  if (three_term) {
    m.coeffs.resize(T);
    for (std::size_t t = 0; t < T; ++t)
      m.coeffs[t] = exp_trapezoidal({m.delta[t], rng.uniform(-2.0, -0.05), rng.uniform(0.0, 1.0)});
  }
  return m;
}

}  // namespace mamba3
