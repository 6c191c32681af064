#pragma once

// Minimal reverse-mode differentiation: an append-only tape of tensor nodes
// whose reverse creation order is a reverse topological order. Covers the ops
// the block needs (linear algebra, elementwise maps, grouped RMS norm, rotary
// pairs, cumulative sums over time, the fused three-term scan, depthwise
// causal convolution, embedding gather, cross entropy) plus Adam.
//
// The fused scan keeps state checkpoints every 16 steps and recomputes the
// in-between states during backward; everything else retains activations.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "mamba3/tensor.hpp"

namespace mamba3::ad {

class Tape;

struct Value {
  Tape* tape = nullptr;
  std::size_t id = 0;
};

class Tape {
 public:
  Value leaf(Tensor v, bool requires_grad = false) {
    nodes_.push_back(Node{std::move(v), Tensor(), requires_grad, nullptr});
    return Value{this, nodes_.size() - 1};
  }
  Value param(Tensor v) { return leaf(std::move(v), true); }

  const Tensor& value(Value v) const { return nodes_[v.id].value; }
  const Tensor& grad(Value v) const { return nodes_[v.id].grad; }
  bool requires_grad(Value v) const { return nodes_[v.id].requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  // Releases all nodes. Handles from before the call become invalid.
  void clear() { nodes_.clear(); }

  void backward(Value loss) {
    if (value(loss).numel() != 1)
      throw parameter_error("backward requires a scalar loss, got shape " +
                            shape_str(value(loss).shape()));
    ensure_grad(loss.id);
    nodes_[loss.id].grad[0] = 1.0;
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.backward_fn && n.requires_grad && n.grad.numel() > 0) n.backward_fn();
    }
  }

  Tensor& mutable_grad(std::size_t id) {
    ensure_grad(id);
    return nodes_[id].grad;
  }

  Value make(Tensor out, const std::vector<Value>& parents, std::function<void()> back) {
    bool req = false;
    for (const Value& p : parents) req = req || nodes_[p.id].requires_grad;
    nodes_.push_back(Node{std::move(out), Tensor(), req, req ? std::move(back) : nullptr});
    return Value{this, nodes_.size() - 1};
  }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad;
    std::function<void()> backward_fn;
  };

  void ensure_grad(std::size_t id) {
    if (nodes_[id].grad.numel() == 0) nodes_[id].grad = Tensor(nodes_[id].value.shape());
  }

  std::vector<Node> nodes_;
};

namespace detail {

inline void accumulate(Tape& t, Value v, const Tensor& g) {
  if (!t.requires_grad(v)) return;
  Tensor& dst = t.mutable_grad(v.id);
  if (!dst.same_shape(g))
    throw dimension_error("gradient shape mismatch: " + shape_str(dst.shape()) + " vs " +
                          shape_str(g.shape()));
  for (std::size_t i = 0; i < g.numel(); ++i) dst[i] += g[i];
}

}  // namespace detail

// --- elementwise --------------------------------------------------------------

inline Value add(Value a, Value b) {
  Tape& t = *a.tape;
  const Value res{&t, t.size()};
  return t.make(mamba3::add(t.value(a), t.value(b)), {a, b}, [&t, a, b, res]() {
    detail::accumulate(t, a, t.grad(res));
    detail::accumulate(t, b, t.grad(res));
  });
}

inline Value sub(Value a, Value b) {
  Tape& t = *a.tape;
  const Value res{&t, t.size()};
  return t.make(mamba3::sub(t.value(a), t.value(b)), {a, b}, [&t, a, b, res]() {
    const Tensor& g = t.grad(res);
    detail::accumulate(t, a, g);
    Tensor nb(g.shape());
    for (std::size_t i = 0; i < g.numel(); ++i) nb[i] = -g[i];
    detail::accumulate(t, b, nb);
  });
}

inline Value mul(Value a, Value b) {
  Tape& t = *a.tape;
  const Value res{&t, t.size()};
  return t.make(mamba3::mul(t.value(a), t.value(b)), {a, b}, [&t, a, b, res]() {
    const Tensor& g = t.grad(res);
    const Tensor& va = t.value(a);
    const Tensor& vb = t.value(b);
    Tensor da(va.shape());
    for (std::size_t i = 0; i < da.numel(); ++i) da[i] = g[i] * vb[i];
    detail::accumulate(t, a, da);
    Tensor db(vb.shape());
    for (std::size_t i = 0; i < db.numel(); ++i) db[i] = g[i] * va[i];
    detail::accumulate(t, b, db);
  });
}

inline Value scale(Value a, double c) {
  Tape& t = *a.tape;
  const Value res{&t, t.size()};
  Tensor out(t.value(a).shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = c * t.value(a)[i];
  return t.make(std::move(out), {a}, [&t, a, c, res]() {
    const Tensor& g = t.grad(res);
    Tensor da(g.shape());
    for (std::size_t i = 0; i < g.numel(); ++i) da[i] = c * g[i];
    detail::accumulate(t, a, da);
  });
}

inline Value add_const(Value a, double c) {
  Tape& t = *a.tape;
  const Value res{&t, t.size()};
  Tensor out(t.value(a).shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = t.value(a)[i] + c;
  return t.make(std::move(out), {a}, [&t, a, res]() { detail::accumulate(t, a, t.grad(res)); });
}

namespace detail {

template <typename F, typename DF>
inline Value unary_op(Value a, F f, DF df) {
  Tape& t = *a.tape;
  const Value res{&t, t.size()};
  const Tensor& va = t.value(a);
  Tensor out(va.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = f(va[i]);
  return t.make(std::move(out), {a}, [&t, a, res, df]() {
    const Tensor& g = t.grad(res);
    const Tensor& x = t.value(a);
    const Tensor& y = t.value(res);
    Tensor da(x.shape());
    for (std::size_t i = 0; i < da.numel(); ++i) da[i] = g[i] * df(x[i], y[i]);
    detail::accumulate(t, a, da);
  });
}

}  // namespace detail

inline Value exp(Value a) {
  return detail::unary_op(a, [](double x) { return std::exp(x); },
                          [](double, double y) { return y; });
}

inline Value neg(Value a) { return scale(a, -1.0); }

inline Value sigmoid(Value a) {
  return detail::unary_op(a, &sigmoid_scalar, [](double, double y) { return y * (1.0 - y); });
}

inline Value silu(Value a) {
  return detail::unary_op(a, &silu_scalar, [](double x, double) {
    const double s = sigmoid_scalar(x);
    return s * (1.0 + x * (1.0 - s));
  });
}

inline Value softplus(Value a) {
  return detail::unary_op(a, &softplus_scalar,
                          [](double x, double) { return sigmoid_scalar(x); });
}

// --- linear algebra -------------------------------------------------------------

inline Value matmul(Value a, Value b) {
  Tape& t = *a.tape;
  const Value res{&t, t.size()};
  return t.make(mamba3::matmul(t.value(a), t.value(b)), {a, b}, [&t, a, b, res]() {
    const Tensor& g = t.grad(res);  // M x L
    const Tensor& va = t.value(a);  // M x K
    const Tensor& vb = t.value(b);  // K x L
    const std::size_t M = va.extent(0), K = va.extent(1), L = vb.extent(1);
    if (t.requires_grad(a)) {
      Tensor da({M, K});
      for (std::size_t i = 0; i < M; ++i)
        for (std::size_t j = 0; j < L; ++j) {
          const double gv = g.at2(i, j);
          for (std::size_t k = 0; k < K; ++k) da.at2(i, k) += gv * vb.at2(k, j);
        }
      detail::accumulate(t, a, da);
    }
    if (t.requires_grad(b)) {
      Tensor db({K, L});
      for (std::size_t i = 0; i < M; ++i)
        for (std::size_t k = 0; k < K; ++k) {
          const double av = va.at2(i, k);
          for (std::size_t j = 0; j < L; ++j) db.at2(k, j) += av * g.at2(i, j);
        }
      detail::accumulate(t, b, db);
    }
  });
}

// out[i][j] = a[i][j] + v[j]
inline Value add_rowvec(Value a, Value v) {
  Tape& t = *a.tape;
  const Tensor& va = t.value(a);
  const Tensor& vv = t.value(v);
  if (va.rank() != 2 || vv.numel() != va.extent(1))
    throw dimension_error("add_rowvec: " + shape_str(va.shape()) + " + " + shape_str(vv.shape()));
  const Value res{&t, t.size()};
  Tensor out(va.shape());
  const std::size_t M = va.extent(0), K = va.extent(1);
  for (std::size_t i = 0; i < M; ++i)
    for (std::size_t j = 0; j < K; ++j) out.at2(i, j) = va.at2(i, j) + vv[j];
  return t.make(std::move(out), {a, v}, [&t, a, v, res, M, K]() {
    const Tensor& g = t.grad(res);
    detail::accumulate(t, a, g);
    if (t.requires_grad(v)) {
      Tensor dv(t.value(v).shape());
      for (std::size_t i = 0; i < M; ++i)
        for (std::size_t j = 0; j < K; ++j) dv[j] += g.at2(i, j);
      detail::accumulate(t, v, dv);
    }
  });
}

// block-tiles the column dimension: out[:, h*F + f] = in[:, f], h = 0..reps-1
inline Value tile_cols(Value a, std::size_t reps) {
  Tape& t = *a.tape;
  const Tensor& va = t.value(a);
  const std::size_t M = va.extent(0), F = va.extent(1);
  const Value res{&t, t.size()};
  Tensor out({M, reps * F});
  for (std::size_t i = 0; i < M; ++i)
    for (std::size_t h = 0; h < reps; ++h)
      for (std::size_t f = 0; f < F; ++f) out.at2(i, h * F + f) = va.at2(i, f);
  return t.make(std::move(out), {a}, [&t, a, res, M, F, reps]() {
    const Tensor& g = t.grad(res);
    Tensor da({M, F});
    for (std::size_t i = 0; i < M; ++i)
      for (std::size_t h = 0; h < reps; ++h)
        for (std::size_t f = 0; f < F; ++f) da.at2(i, f) += g.at2(i, h * F + f);
    detail::accumulate(t, a, da);
  });
}

// repeats each column contiguously: out[:, h*reps + k] = in[:, h]
inline Value expand_cols(Value a, std::size_t reps) {
  Tape& t = *a.tape;
  const Tensor& va = t.value(a);
  const std::size_t M = va.extent(0), H = va.extent(1);
  const Value res{&t, t.size()};
  Tensor out({M, H * reps});
  for (std::size_t i = 0; i < M; ++i)
    for (std::size_t h = 0; h < H; ++h)
      for (std::size_t k = 0; k < reps; ++k) out.at2(i, h * reps + k) = va.at2(i, h);
  return t.make(std::move(out), {a}, [&t, a, res, M, H, reps]() {
    const Tensor& g = t.grad(res);
    Tensor da({M, H});
    for (std::size_t i = 0; i < M; ++i)
      for (std::size_t h = 0; h < H; ++h)
        for (std::size_t k = 0; k < reps; ++k) da.at2(i, h) += g.at2(i, h * reps + k);
    detail::accumulate(t, a, da);
  });
}

// out[i][j] = a[i][j] * v[j]
inline Value mul_rowvec(Value a, Value v) {
  Tape& t = *a.tape;
  const Tensor& va = t.value(a);
  const Tensor& vv = t.value(v);
  if (va.rank() != 2 || vv.numel() != va.extent(1))
    throw dimension_error("mul_rowvec: " + shape_str(va.shape()) + " * " + shape_str(vv.shape()));
  const Value res{&t, t.size()};
  const std::size_t M = va.extent(0), K = va.extent(1);
  Tensor out(va.shape());
  for (std::size_t i = 0; i < M; ++i)
    for (std::size_t j = 0; j < K; ++j) out.at2(i, j) = va.at2(i, j) * vv[j];
  return t.make(std::move(out), {a, v}, [&t, a, v, res, M, K]() {
    const Tensor& g = t.grad(res);
    if (t.requires_grad(a)) {
      Tensor da({M, K});
      for (std::size_t i = 0; i < M; ++i)
        for (std::size_t j = 0; j < K; ++j) da.at2(i, j) = g.at2(i, j) * t.value(v)[j];
      detail::accumulate(t, a, da);
    }
    if (t.requires_grad(v)) {
      Tensor dv(t.value(v).shape());
      for (std::size_t i = 0; i < M; ++i)
        for (std::size_t j = 0; j < K; ++j) dv[j] += g.at2(i, j) * t.value(a).at2(i, j);
      detail::accumulate(t, v, dv);
    }
  });
}

// splits columns into blocks of `group` and repeats each block `reps` times
// contiguously: out[:, (b*reps + k)*group + j] = in[:, b*group + j]
inline Value repeat_groups(Value a, std::size_t group, std::size_t reps) {
  Tape& t = *a.tape;
  const Tensor& va = t.value(a);
  const std::size_t M = va.extent(0), F = va.extent(1);
  if (F % group != 0) throw dimension_error("repeat_groups: group must divide columns");
  const std::size_t Bk = F / group;
  const Value res{&t, t.size()};
  Tensor out({M, F * reps});
  for (std::size_t i = 0; i < M; ++i)
    for (std::size_t b = 0; b < Bk; ++b)
      for (std::size_t k = 0; k < reps; ++k)
        for (std::size_t j = 0; j < group; ++j)
          out.at2(i, (b * reps + k) * group + j) = va.at2(i, b * group + j);
  return t.make(std::move(out), {a}, [&t, a, res, M, Bk, group, reps]() {
    const Tensor& g = t.grad(res);
    Tensor da(t.value(a).shape());
    for (std::size_t i = 0; i < M; ++i)
      for (std::size_t b = 0; b < Bk; ++b)
        for (std::size_t k = 0; k < reps; ++k)
          for (std::size_t j = 0; j < group; ++j)
            da.at2(i, b * group + j) += g.at2(i, (b * reps + k) * group + j);
    detail::accumulate(t, a, da);
  });
}

// adjoint-shaped reduction of repeat_groups:
// out[:, b*group + j] = sum_k in[:, (b*reps + k)*group + j]
inline Value reduce_groups(Value a, std::size_t group, std::size_t reps) {
  Tape& t = *a.tape;
  const Tensor& va = t.value(a);
  const std::size_t M = va.extent(0), F = va.extent(1);
  if (F % (group * reps) != 0) throw dimension_error("reduce_groups: group*reps must divide columns");
  const std::size_t Bk = F / (group * reps);
  const Value res{&t, t.size()};
  Tensor out({M, Bk * group});
  for (std::size_t i = 0; i < M; ++i)
    for (std::size_t b = 0; b < Bk; ++b)
      for (std::size_t k = 0; k < reps; ++k)
        for (std::size_t j = 0; j < group; ++j)
          out.at2(i, b * group + j) += va.at2(i, (b * reps + k) * group + j);
  return t.make(std::move(out), {a}, [&t, a, res, M, Bk, group, reps]() {
    const Tensor& g = t.grad(res);
    Tensor da(t.value(a).shape());
    for (std::size_t i = 0; i < M; ++i)
      for (std::size_t b = 0; b < Bk; ++b)
        for (std::size_t k = 0; k < reps; ++k)
          for (std::size_t j = 0; j < group; ++j)
            da.at2(i, (b * reps + k) * group + j) = g.at2(i, b * group + j);
    detail::accumulate(t, a, da);
  });
}

// sums groups of `group` adjacent columns: out[:, j] = sum_k in[:, j*group + k]
inline Value sum_groups(Value a, std::size_t group) {
  Tape& t = *a.tape;
  const Tensor& va = t.value(a);
  const std::size_t M = va.extent(0), F = va.extent(1), J = F / group;
  if (F % group != 0) throw dimension_error("sum_groups: group must divide columns");
  const Value res{&t, t.size()};
  Tensor out({M, J});
  for (std::size_t i = 0; i < M; ++i)
    for (std::size_t j = 0; j < J; ++j)
      for (std::size_t k = 0; k < group; ++k) out.at2(i, j) += va.at2(i, j * group + k);
  return t.make(std::move(out), {a}, [&t, a, res, M, J, group]() {
    const Tensor& g = t.grad(res);
    Tensor da(t.value(a).shape());
    for (std::size_t i = 0; i < M; ++i)
      for (std::size_t j = 0; j < J; ++j)
        for (std::size_t k = 0; k < group; ++k) da.at2(i, j * group + k) = g.at2(i, j);
    detail::accumulate(t, a, da);
  });
}

inline Value sum_all(Value a) {
  Tape& t = *a.tape;
  const Value res{&t, t.size()};
  double s = 0.0;
  for (std::size_t i = 0; i < t.value(a).numel(); ++i) s += t.value(a)[i];
  return t.make(Tensor({1}, {s}), {a}, [&t, a, res]() {
    const double g = t.grad(res)[0];
    Tensor da(t.value(a).shape(), g);
    detail::accumulate(t, a, da);
  });
}

// --- row gather (embedding lookup / position selection) ---------------------------

inline Value gather_rows(Value table, std::vector<std::size_t> rows) {
  Tape& t = *table.tape;
  const Tensor& v = t.value(table);
  const std::size_t K = v.extent(1);
  const Value res{&t, t.size()};
  Tensor out({rows.size(), K});
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = 0; j < K; ++j) out.at2(i, j) = v.at2(rows[i], j);
  return t.make(std::move(out), {table}, [&t, table, res, rows, K]() {
    const Tensor& g = t.grad(res);
    Tensor dv(t.value(table).shape());
    for (std::size_t i = 0; i < rows.size(); ++i)
      for (std::size_t j = 0; j < K; ++j) dv.at2(rows[i], j) += g.at2(i, j);
    detail::accumulate(t, table, dv);
  });
}

// --- grouped RMS normalization -----------------------------------------------------

// Per row, per group of `group` adjacent columns:
//   y = x * gamma / sqrt(mean(x^2) + eps)
// gamma has one entry per column.
inline Value rms_norm_groups(Value x, Value gamma, std::size_t group, double eps) {
  Tape& t = *x.tape;
  const Tensor& vx = t.value(x);
  const std::size_t M = vx.extent(0), F = vx.extent(1);
  if (F % group != 0) throw dimension_error("rms_norm_groups: group must divide columns");
  if (t.value(gamma).numel() != F)
    throw dimension_error("rms_norm_groups: gamma length mismatch");
  const Value res{&t, t.size()};
  auto inv_rms = std::make_shared<std::vector<double>>(M * (F / group));
  Tensor out({M, F});
  const std::size_t J = F / group;
  for (std::size_t i = 0; i < M; ++i)
    for (std::size_t j = 0; j < J; ++j) {
      double ms = 0.0;
      for (std::size_t k = 0; k < group; ++k) {
        const double v = vx.at2(i, j * group + k);
        ms += v * v;
      }
      const double r = 1.0 / std::sqrt(ms / static_cast<double>(group) + eps);
      (*inv_rms)[i * J + j] = r;
      for (std::size_t k = 0; k < group; ++k) {
        const std::size_t c = j * group + k;
        out.at2(i, c) = vx.at2(i, c) * t.value(gamma)[c] * r;
      }
    }
  return t.make(std::move(out), {x, gamma}, [&t, x, gamma, res, M, J, group, eps, inv_rms]() {
    const Tensor& g = t.grad(res);
    const Tensor& vx2 = t.value(x);
    const Tensor& vg = t.value(gamma);
    Tensor dx(vx2.shape());
    Tensor dgamma(vg.shape());
    for (std::size_t i = 0; i < M; ++i)
      for (std::size_t j = 0; j < J; ++j) {
        const double r = (*inv_rms)[i * J + j];
        // s = sum_k g_k * gamma_k * x_k
        double s = 0.0;
        for (std::size_t k = 0; k < group; ++k) {
          const std::size_t c = j * group + k;
          s += g.at2(i, c) * vg[c] * vx2.at2(i, c);
          dgamma[c] += g.at2(i, c) * vx2.at2(i, c) * r;
        }
        const double coef = s * r * r * r / static_cast<double>(group);
        for (std::size_t k = 0; k < group; ++k) {
          const std::size_t c = j * group + k;
          dx.at2(i, c) = g.at2(i, c) * vg[c] * r - vx2.at2(i, c) * coef;
        }
      }
    detail::accumulate(t, x, dx);
    detail::accumulate(t, gamma, dgamma);
  });
}

// --- time-structured ops -----------------------------------------------------------

// Inclusive prefix sum over the time axis of a (Bsz*T, F) tensor.
inline Value cumsum_time(Value a, std::size_t Bsz, std::size_t T) {
  Tape& t = *a.tape;
  const Tensor& va = t.value(a);
  const std::size_t F = va.extent(1);
  if (va.extent(0) != Bsz * T) throw dimension_error("cumsum_time: row count != Bsz*T");
  const Value res{&t, t.size()};
  Tensor out(va.shape());
  for (std::size_t b = 0; b < Bsz; ++b)
    for (std::size_t f = 0; f < F; ++f) {
      double run = 0.0;
      for (std::size_t s = 0; s < T; ++s) {
        run += va.at2(b * T + s, f);
        out.at2(b * T + s, f) = run;
      }
    }
  return t.make(std::move(out), {a}, [&t, a, res, Bsz, T, F]() {
    const Tensor& g = t.grad(res);
    Tensor da(t.value(a).shape());
    for (std::size_t b = 0; b < Bsz; ++b)
      for (std::size_t f = 0; f < F; ++f) {
        double run = 0.0;
        for (std::size_t s = T; s-- > 0;) {
          run += g.at2(b * T + s, f);
          da.at2(b * T + s, f) = run;
        }
      }
    detail::accumulate(t, a, da);
  });
}

// Rotates adjacent column pairs of v by sign * ang (one angle per pair, per row).
inline Value rope_pairs(Value v, Value ang, int sign) {
  Tape& t = *v.tape;
  const Tensor& vv = t.value(v);
  const Tensor& va = t.value(ang);
  const std::size_t M = vv.extent(0), F = vv.extent(1);
  if (F % 2 != 0 || va.extent(1) != F / 2 || va.extent(0) != M)
    throw dimension_error("rope_pairs: shapes " + shape_str(vv.shape()) + " and " +
                          shape_str(va.shape()));
  const Value res{&t, t.size()};
  Tensor out({M, F});
  for (std::size_t i = 0; i < M; ++i)
    for (std::size_t p = 0; p < F / 2; ++p) {
      const double a = sign * va.at2(i, p);
      const double c = std::cos(a), s = std::sin(a);
      const double x = vv.at2(i, 2 * p), y = vv.at2(i, 2 * p + 1);
      out.at2(i, 2 * p) = c * x - s * y;
      out.at2(i, 2 * p + 1) = s * x + c * y;
    }
  return t.make(std::move(out), {v, ang}, [&t, v, ang, res, M, F, sign]() {
    const Tensor& g = t.grad(res);
    const Tensor& vv2 = t.value(v);
    const Tensor& va2 = t.value(ang);
    const Tensor& vo = t.value(res);
    Tensor dv(vv2.shape());
    Tensor da(va2.shape());
    for (std::size_t i = 0; i < M; ++i)
      for (std::size_t p = 0; p < F / 2; ++p) {
        const double a = sign * va2.at2(i, p);
        const double c = std::cos(a), s = std::sin(a);
        const double gx = g.at2(i, 2 * p), gy = g.at2(i, 2 * p + 1);
        // dv = R(a)^T g
        dv.at2(i, 2 * p) = c * gx + s * gy;
        dv.at2(i, 2 * p + 1) = -s * gx + c * gy;
        // d/d(ang) = sign * <g, rotate(out, +90deg)>
        const double ox = vo.at2(i, 2 * p), oy = vo.at2(i, 2 * p + 1);
        da.at2(i, p) = sign * (gx * (-oy) + gy * ox);
      }
    detail::accumulate(t, v, dv);
    detail::accumulate(t, ang, da);
  });
}

// --- depthwise causal convolution ----------------------------------------------------

// y[b, s, e] = sum_{k < w} kernel[e, k] * x[b, s - k, e]  (x rows = Bsz*T)
inline Value conv1d_causal(Value x, Value kernel, std::size_t Bsz, std::size_t T) {
  Tape& t = *x.tape;
  const Tensor& vx = t.value(x);
  const Tensor& vk = t.value(kernel);
  const std::size_t E = vx.extent(1), W = vk.extent(1);
  if (vk.extent(0) != E) throw dimension_error("conv1d_causal: kernel rows != channels");
  const Value res{&t, t.size()};
  Tensor out(vx.shape());
  for (std::size_t b = 0; b < Bsz; ++b)
    for (std::size_t s = 0; s < T; ++s)
      for (std::size_t e = 0; e < E; ++e) {
        double acc = 0.0;
        for (std::size_t k = 0; k < W && k <= s; ++k)
          acc += vk.at2(e, k) * vx.at2(b * T + s - k, e);
        out.at2(b * T + s, e) = acc;
      }
  return t.make(std::move(out), {x, kernel}, [&t, x, kernel, res, Bsz, T, E, W]() {
    const Tensor& g = t.grad(res);
    const Tensor& vx2 = t.value(x);
    const Tensor& vk2 = t.value(kernel);
    Tensor dx(vx2.shape());
    Tensor dk(vk2.shape());
    for (std::size_t b = 0; b < Bsz; ++b)
      for (std::size_t s = 0; s < T; ++s)
        for (std::size_t e = 0; e < E; ++e) {
          const double gv = g.at2(b * T + s, e);
          for (std::size_t k = 0; k < W && k <= s; ++k) {
            dx.at2(b * T + s - k, e) += gv * vk2.at2(e, k);
            dk.at2(e, k) += gv * vx2.at2(b * T + s - k, e);
          }
        }
    detail::accumulate(t, x, dx);
    detail::accumulate(t, kernel, dk);
  });
}

// --- fused three-term scan ------------------------------------------------------------

// Batched three-term recurrence over heads:
//   h_t = alpha_t h_{t-1} + gamma_t B_t x_t^T + beta_t B_{t-1} x_{t-1}^T
//   y_t = h_t^T C_t   (per head: h is N x P, B/C are N, x/y are P)
// Layouts: alpha/beta/gamma (Bsz*T, H); B/C (Bsz*T, H*N); x/y (Bsz*T, H*P).
// States are checkpointed every kScanCheckpoint steps and recomputed in
// backward segment by segment.
inline constexpr std::size_t kScanCheckpoint = 16;

inline Value scan3(Value alpha, Value beta, Value gamma, Value B, Value C, Value X,
                   std::size_t Bsz, std::size_t T, std::size_t H, std::size_t N, std::size_t P) {
  Tape& t = *alpha.tape;
  const Tensor& al = t.value(alpha);
  const Tensor& be = t.value(beta);
  const Tensor& ga = t.value(gamma);
  const Tensor& vB = t.value(B);
  const Tensor& vC = t.value(C);
  const Tensor& vX = t.value(X);
  if (al.extent(0) != Bsz * T || al.extent(1) != H || vB.extent(1) != H * N ||
      vX.extent(1) != H * P || !al.same_shape(be) || !al.same_shape(ga) ||
      !vB.same_shape(vC) || vB.extent(0) != Bsz * T || vX.extent(0) != Bsz * T)
    throw dimension_error("scan3 layout mismatch");

  const std::size_t K = kScanCheckpoint;
  const std::size_t n_ckpt = (T + K - 1) / K;
  // checkpoints: state BEFORE step seg*K, per (b, h): N*P doubles
  auto ckpt = std::make_shared<std::vector<double>>(Bsz * H * n_ckpt * N * P, 0.0);

  const Value res{&t, t.size()};
  Tensor out({Bsz * T, H * P});
  std::vector<double> h(N * P);
  for (std::size_t b = 0; b < Bsz; ++b)
    for (std::size_t hd = 0; hd < H; ++hd) {
      std::fill(h.begin(), h.end(), 0.0);
      for (std::size_t s = 0; s < T; ++s) {
        if (s % K == 0) {
          double* dst = ckpt->data() + ((b * H + hd) * n_ckpt + s / K) * N * P;
          std::copy(h.begin(), h.end(), dst);
        }
        const std::size_t r = b * T + s;
        const double a = al.at2(r, hd), bb = (s > 0) ? be.at2(r, hd) : 0.0, gg = ga.at2(r, hd);
        const double* Bt = vB.data() + r * H * N + hd * N;
        const double* Xt = vX.data() + r * H * P + hd * P;
        const double* Bp = (s > 0) ? vB.data() + (r - 1) * H * N + hd * N : nullptr;
        const double* Xp = (s > 0) ? vX.data() + (r - 1) * H * P + hd * P : nullptr;
        for (std::size_t n = 0; n < N; ++n) {
          const double bg = gg * Bt[n];
          const double bp = (s > 0) ? bb * Bp[n] : 0.0;
          double* hrow = h.data() + n * P;
          for (std::size_t p = 0; p < P; ++p)
            hrow[p] = a * hrow[p] + bg * Xt[p] + (s > 0 ? bp * Xp[p] : 0.0);
        }
        const double* Ct = vC.data() + r * H * N + hd * N;
        double* yout = out.data() + r * H * P + hd * P;
        for (std::size_t p = 0; p < P; ++p) yout[p] = 0.0;
        for (std::size_t n = 0; n < N; ++n) {
          const double cv = Ct[n];
          const double* hrow = h.data() + n * P;
          for (std::size_t p = 0; p < P; ++p) yout[p] += cv * hrow[p];
        }
      }
    }

  return t.make(std::move(out), {alpha, beta, gamma, B, C, X},
                [&t, alpha, beta, gamma, B, C, X, res, Bsz, T, H, N, P, K, n_ckpt, ckpt]() {
    const Tensor& g = t.grad(res);
    const Tensor& al = t.value(alpha);
    const Tensor& be = t.value(beta);
    const Tensor& ga = t.value(gamma);
    const Tensor& vB = t.value(B);
    const Tensor& vC = t.value(C);
    const Tensor& vX = t.value(X);
    Tensor dal(al.shape()), dbe(be.shape()), dga(ga.shape());
    Tensor dB(vB.shape()), dC(vC.shape()), dX(vX.shape());

    // per-segment recomputed states: h_states[k] = h after step seg0+k (k=0..len-1)
    std::vector<std::vector<double>> h_states(K, std::vector<double>(N * P));
    std::vector<double> dh(N * P), h_prev(N * P);

    for (std::size_t b = 0; b < Bsz; ++b)
      for (std::size_t hd = 0; hd < H; ++hd) {
        std::fill(dh.begin(), dh.end(), 0.0);
        for (std::size_t seg = n_ckpt; seg-- > 0;) {
          const std::size_t s0 = seg * K;
          const std::size_t len = std::min(K, T - s0);
          // recompute states in the segment from the checkpoint
          std::vector<double> h(ckpt->begin() +
                                    static_cast<std::ptrdiff_t>(((b * H + hd) * n_ckpt + seg) * N * P),
                                ckpt->begin() +
                                    static_cast<std::ptrdiff_t>(((b * H + hd) * n_ckpt + seg) * N * P +
                                                                N * P));
          for (std::size_t k = 0; k < len; ++k) {
            const std::size_t s = s0 + k;
            const std::size_t r = b * T + s;
            const double a = al.at2(r, hd), bb = (s > 0) ? be.at2(r, hd) : 0.0,
                         gg = ga.at2(r, hd);
            const double* Bt = vB.data() + r * H * N + hd * N;
            const double* Xt = vX.data() + r * H * P + hd * P;
            const double* Bp = (s > 0) ? vB.data() + (r - 1) * H * N + hd * N : nullptr;
            const double* Xp = (s > 0) ? vX.data() + (r - 1) * H * P + hd * P : nullptr;
            for (std::size_t n = 0; n < N; ++n) {
              const double bg = gg * Bt[n];
              const double bp = (s > 0) ? bb * Bp[n] : 0.0;
              double* hrow = h.data() + n * P;
              for (std::size_t p = 0; p < P; ++p)
                hrow[p] = a * hrow[p] + bg * Xt[p] + (s > 0 ? bp * Xp[p] : 0.0);
            }
            h_states[k] = h;
          }
          // reverse pass within the segment
          for (std::size_t k = len; k-- > 0;) {
            const std::size_t s = s0 + k;
            const std::size_t r = b * T + s;
            const double a = al.at2(r, hd), bb = (s > 0) ? be.at2(r, hd) : 0.0,
                         gg = ga.at2(r, hd);
            const double* Bt = vB.data() + r * H * N + hd * N;
            const double* Xt = vX.data() + r * H * P + hd * P;
            const double* Ct = vC.data() + r * H * N + hd * N;
            const double* gy = g.data() + r * H * P + hd * P;
            const double* ht = h_states[k].data();
            const double* htm1 =
                (k > 0) ? h_states[k - 1].data()
                        : ckpt->data() + ((b * H + hd) * n_ckpt + seg) * N * P;
            // dC_t[n] += sum_p h_t[n,p] gy[p];  dh += C_t (x) gy
            double* dCt = dC.data() + r * H * N + hd * N;
            for (std::size_t n = 0; n < N; ++n) {
              const double cv = Ct[n];
              const double* hrow = ht + n * P;
              double* dhrow = dh.data() + n * P;
              double accC = 0.0;
              for (std::size_t p = 0; p < P; ++p) {
                accC += hrow[p] * gy[p];
                dhrow[p] += cv * gy[p];
              }
              dCt[n] += accC;
            }
            // recurrence adjoints
            double dacc = 0.0, gacc = 0.0, bacc = 0.0;
            double* dBt = dB.data() + r * H * N + hd * N;
            double* dXt = dX.data() + r * H * P + hd * P;
            for (std::size_t n = 0; n < N; ++n) {
              const double* dhrow = dh.data() + n * P;
              const double* hm1row = htm1 + n * P;
              double dot_x = 0.0;
              for (std::size_t p = 0; p < P; ++p) {
                dacc += dhrow[p] * hm1row[p];
                dot_x += dhrow[p] * Xt[p];
              }
              gacc += dot_x * Bt[n];
              dBt[n] += gg * dot_x;
            }
            for (std::size_t p = 0; p < P; ++p) {
              double dot_b = 0.0;
              for (std::size_t n = 0; n < N; ++n) dot_b += dh[n * P + p] * Bt[n];
              dXt[p] += gg * dot_b;
            }
            if (s > 0) {
              const double* Bp = vB.data() + (r - 1) * H * N + hd * N;
              const double* Xp = vX.data() + (r - 1) * H * P + hd * P;
              double* dBp = dB.data() + (r - 1) * H * N + hd * N;
              double* dXp = dX.data() + (r - 1) * H * P + hd * P;
              for (std::size_t n = 0; n < N; ++n) {
                const double* dhrow = dh.data() + n * P;
                double dot_x = 0.0;
                for (std::size_t p = 0; p < P; ++p) dot_x += dhrow[p] * Xp[p];
                bacc += dot_x * Bp[n];
                dBp[n] += bb * dot_x;
              }
              for (std::size_t p = 0; p < P; ++p) {
                double dot_b = 0.0;
                for (std::size_t n = 0; n < N; ++n) dot_b += dh[n * P + p] * Bp[n];
                dXp[p] += bb * dot_b;
              }
              dbe.at2(r, hd) += bacc;
            }
            dal.at2(r, hd) += dacc;
            dga.at2(r, hd) += gacc;
            // dh_{t-1} = alpha_t * dh_t
            for (std::size_t i = 0; i < N * P; ++i) dh[i] *= a;
          }
        }
      }

    detail::accumulate(t, alpha, dal);
    detail::accumulate(t, beta, dbe);
    detail::accumulate(t, gamma, dga);
    detail::accumulate(t, B, dB);
    detail::accumulate(t, C, dC);
    detail::accumulate(t, X, dX);
  });
}

// --- cross entropy ---------------------------------------------------------------------

// Mean cross entropy over rows of logits (M x K) against integer labels.
inline Value cross_entropy(Value logits, std::vector<int> labels) {
  Tape& t = *logits.tape;
  const Tensor& z = t.value(logits);
  const std::size_t M = z.extent(0), K = z.extent(1);
  if (labels.size() != M) throw dimension_error("cross_entropy: label count != rows");
  auto probs = std::make_shared<Tensor>(Shape{M, K});
  double loss = 0.0;
  for (std::size_t i = 0; i < M; ++i) {
    double mx = z.at2(i, 0);
    for (std::size_t j = 1; j < K; ++j) mx = std::max(mx, z.at2(i, j));
    double sum = 0.0;
    for (std::size_t j = 0; j < K; ++j) sum += std::exp(z.at2(i, j) - mx);
    const double lse = mx + std::log(sum);
    for (std::size_t j = 0; j < K; ++j) probs->at2(i, j) = std::exp(z.at2(i, j) - lse);
    loss += lse - z.at2(i, static_cast<std::size_t>(labels[i]));
  }
  loss /= static_cast<double>(M);
  const Value res{&t, t.size()};
  return t.make(Tensor({1}, {loss}), {logits}, [&t, logits, res, probs, labels, M, K]() {
    const double g = t.grad(res)[0];
    Tensor dz({M, K});
    for (std::size_t i = 0; i < M; ++i) {
      for (std::size_t j = 0; j < K; ++j) dz.at2(i, j) = g * probs->at2(i, j) / M;
      dz.at2(i, static_cast<std::size_t>(labels[i])) -= g / M;
    }
    detail::accumulate(t, logits, dz);
  });
}

// --- optimizer ---------------------------------------------------------------------------

struct AdamState {
  std::vector<Tensor> m, v;
  std::int64_t step = 0;
};

inline void adam_step(std::vector<Tensor*> params, const std::vector<Tensor>& grads,
                      AdamState& state, double lr, double beta1 = 0.9, double beta2 = 0.999,
                      double eps = 1e-8) {
  if (params.size() != grads.size()) throw parameter_error("adam_step: size mismatch");
  if (state.m.empty()) {
    for (const Tensor* p : params) {
      state.m.emplace_back(p->shape());
      state.v.emplace_back(p->shape());
    }
  }
  state.step += 1;
  const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = *params[i];
    const Tensor& g = grads[i];
    Tensor& m = state.m[i];
    Tensor& v = state.v[i];
    for (std::size_t j = 0; j < p.numel(); ++j) {
      m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
      v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
      p[j] -= lr * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + eps);
    }
  }
}

}  // namespace mamba3::ad
