#pragma once

// Minimal dense row-major tensor plus a seeded, portable RNG. This is the
// substrate for every other header in the library; it deliberately avoids
// BLAS, SIMD intrinsics and general broadcasting.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace mamba3 {

class dimension_error : public std::runtime_error {
 public:
  explicit dimension_error(const std::string& msg) : std::runtime_error(msg) {}
};

class parameter_error : public std::runtime_error {
 public:
  explicit parameter_error(const std::string& msg) : std::runtime_error(msg) {}
};

class numerical_error : public std::runtime_error {
 public:
  explicit numerical_error(const std::string& msg) : std::runtime_error(msg) {}
};

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t e : s) n *= e;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

// Row-major contiguous tensor of doubles. Immutable-by-convention: helpers
// return new tensors; in-place mutation goes through data() by owners only.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0)
      : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}
  Tensor(Shape shape, std::vector<double> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (shape_numel(shape_) != data_.size())
      throw dimension_error("tensor data length " + std::to_string(data_.size()) +
                            " does not match shape " + shape_str(shape_));
  }

  static Tensor scalar(double v) { return Tensor({1}, {v}); }
  static Tensor identity(std::size_t n) {
    Tensor t({n, n});
    for (std::size_t i = 0; i < n; ++i) t.data_[i * n + i] = 1.0;
    return t;
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t numel() const { return data_.size(); }
  std::size_t extent(std::size_t d) const { return shape_.at(d); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  double& at2(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
  double at2(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }

  Tensor reshaped(Shape s) const {
    if (shape_numel(s) != numel())
      throw dimension_error("reshape " + shape_str(shape_) + " -> " + shape_str(s));
    return Tensor(std::move(s), data_);
  }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

 private:
  Shape shape_;
  std::vector<double> data_;
};

// --- matmul -----------------------------------------------------------------

// c[i][j] = sum_k a[i][k] * b[k][j], accumulated in 64-bit.
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.extent(1) != b.extent(0))
    throw dimension_error("matmul shape mismatch: " + shape_str(a.shape()) + " * " +
                          shape_str(b.shape()));
  const std::size_t m = a.extent(0), k = a.extent(1), l = b.extent(1);
  Tensor c({m, l});
  const double* pa = a.data();
  const double* pb = b.data();
  double* pc = c.data();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t kk = 0; kk < k; ++kk) {
      const double av = pa[i * k + kk];
      const double* brow = pb + kk * l;
      double* crow = pc + i * l;
      for (std::size_t j = 0; j < l; ++j) crow[j] += av * brow[j];
    }
  }
  return c;
}

// --- elementwise ------------------------------------------------------------

inline double sigmoid_scalar(double x) {
  if (x >= 0) {
    const double z = std::exp(-x);
    return 1.0 / (1.0 + z);
  }
  const double z = std::exp(x);
  return z / (1.0 + z);
}

inline double silu_scalar(double x) { return x * sigmoid_scalar(x); }

// softplus with an overflow-safe linear branch for large inputs
inline double softplus_scalar(double x) {
  if (x > 30.0) return x;
  return std::log1p(std::exp(x));
}

namespace ew {

inline Tensor unary(const Tensor& a, double (*f)(double)) {
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.numel(); ++i) out[i] = f(a[i]);
  return out;
}

inline Tensor binary(const Tensor& a, const Tensor& b, double (*f)(double, double)) {
  if (b.numel() == 1) {
    Tensor out(a.shape());
    for (std::size_t i = 0; i < a.numel(); ++i) out[i] = f(a[i], b[0]);
    return out;
  }
  if (!a.same_shape(b))
    throw dimension_error("elementwise shape mismatch: " + shape_str(a.shape()) +
                          " vs " + shape_str(b.shape()));
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.numel(); ++i) out[i] = f(a[i], b[i]);
  return out;
}

}  // namespace ew

inline Tensor add(const Tensor& a, const Tensor& b) {
  return ew::binary(a, b, [](double x, double y) { return x + y; });
}
inline Tensor sub(const Tensor& a, const Tensor& b) {
  return ew::binary(a, b, [](double x, double y) { return x - y; });
}
inline Tensor mul(const Tensor& a, const Tensor& b) {
  return ew::binary(a, b, [](double x, double y) { return x * y; });
}
inline Tensor exp(const Tensor& a) {
  return ew::unary(a, [](double x) { return std::exp(x); });
}
inline Tensor sigmoid(const Tensor& a) { return ew::unary(a, &sigmoid_scalar); }
inline Tensor silu(const Tensor& a) { return ew::unary(a, &silu_scalar); }
inline Tensor softplus(const Tensor& a) { return ew::unary(a, &softplus_scalar); }

// --- RNG --------------------------------------------------------------------

// splitmix64: a fixed, documented counter-style generator. Identical seed
// gives an identical 64-bit stream on every platform; uniform doubles are
// derived from the top 53 bits, normals via Box-Muller on that stream.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() {
    std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ull);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  }

  // uniform in [0, 1)
  double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) {
    if (!(lo < hi)) throw parameter_error("uniform requires lo < hi");
    return lo + (hi - lo) * next_double();
  }

  double normal(double mu, double sigma) {
    if (!(sigma > 0)) throw parameter_error("normal requires sigma > 0");
    if (have_spare_) {
      have_spare_ = false;
      return mu + sigma * spare_;
    }
    double u1 = next_double();
    double u2 = next_double();
    while (u1 <= 0.0) u1 = next_double();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 2.0 * M_PI * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return mu + sigma * r * std::cos(a);
  }

  std::size_t next_index(std::size_t n) { return static_cast<std::size_t>(next_u64() % n); }

  // Named substream: adding trials never perturbs earlier ones because each
  // (seed, tags...) pair gets an independently mixed state.
  static Rng substream(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0) {
    Rng mix(seed);
    std::uint64_t s = mix.next_u64();
    s ^= a * 0xD6E8FEB86659FD93ull;
    s ^= b * 0xA5A5A5A5A5A5A5A5ull + (b << 17);
    return Rng(s);
  }

 private:
  std::uint64_t state_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

inline Tensor rand_uniform(Rng& rng, Shape shape, double lo, double hi) {
  Tensor t(std::move(shape));
  for (std::size_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(lo, hi);
  return t;
}

inline Tensor rand_normal(Rng& rng, Shape shape, double mu, double sigma) {
  Tensor t(std::move(shape));
  for (std::size_t i = 0; i < t.numel(); ++i) t[i] = rng.normal(mu, sigma);
  return t;
}

// --- small helpers used throughout the test suites --------------------------

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b))
    throw dimension_error("max_abs_diff shape mismatch: " + shape_str(a.shape()) +
                          " vs " + shape_str(b.shape()));
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

inline double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw dimension_error("max_abs_diff length mismatch");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace mamba3
