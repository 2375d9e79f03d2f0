#pragma once

// Dense row-major matrices, a counter-based RNG and the handful of kernels
// (products, ReLU, norms, softmax cross-entropy, truncated SVD) that the
// rest of the library is written against. Everything is 64-bit.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "spdcfl/error.hpp"

namespace spdcfl {

// ---------------------------------------------------------------------------
// Multiply instrumentation
// ---------------------------------------------------------------------------

/// Per-thread count of scalar multiplications performed by the matrix
/// products below. Used to check the closed-form operation budget.
inline std::uint64_t& multiply_counter() noexcept {
  thread_local std::uint64_t count = 0;
  return count;
}

// ---------------------------------------------------------------------------
// Matrix
// ---------------------------------------------------------------------------

class Matrix {
 public:
  Matrix() = default;

  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
      throw ShapeError("matrix data length " + std::to_string(data_.size()) +
                       " does not match " + std::to_string(rows_) + "x" +
                       std::to_string(cols_));
    }
  }

  Matrix(std::initializer_list<std::initializer_list<double>> init)
      : rows_(init.size()), cols_(init.size() ? init.begin()->size() : 0) {
    data_.reserve(rows_ * cols_);
    for (const auto& row : init) {
      if (row.size() != cols_) throw ShapeError("ragged matrix initializer");
      data_.insert(data_.end(), row.begin(), row.end());
    }
  }

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }

  std::span<double> values() noexcept { return data_; }
  std::span<const double> values() const noexcept { return data_; }

  std::span<double> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const noexcept {
    return {data_.data() + r * cols_, cols_};
  }

  bool same_shape(const Matrix& other) const noexcept {
    return rows_ == other.rows_ && cols_ == other.cols_;
  }

  bool operator==(const Matrix& other) const = default;

  Matrix& operator+=(const Matrix& other) {
    require_same_shape(other, "+=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
    return *this;
  }

  Matrix& operator-=(const Matrix& other) {
    require_same_shape(other, "-=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= other.data_[i];
    return *this;
  }

  Matrix& operator*=(double s) noexcept {
    for (double& v : data_) v *= s;
    return *this;
  }

  /// this += s * other
  Matrix& add_scaled(const Matrix& other, double s) {
    require_same_shape(other, "add_scaled");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += s * other.data_[i];
    return *this;
  }

  bool all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
  }

  std::string shape_string() const {
    return std::to_string(rows_) + "x" + std::to_string(cols_);
  }

 private:
  void require_same_shape(const Matrix& other, const char* op) const {
    if (!same_shape(other)) {
      throw ShapeError(std::string("shape mismatch in ") + op + ": " + shape_string() +
                       " vs " + other.shape_string());
    }
  }

  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

inline Matrix operator+(Matrix a, const Matrix& b) { return a += b; }
inline Matrix operator-(Matrix a, const Matrix& b) { return a -= b; }
inline Matrix operator*(Matrix a, double s) { return a *= s; }
inline Matrix operator*(double s, Matrix a) { return a *= s; }
inline Matrix operator-(Matrix a) { return a *= -1.0; }

inline Matrix transpose(const Matrix& m) {
  Matrix t(m.cols(), m.rows());
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j) t(j, i) = m(i, j);
  return t;
}

/// Standard product a·b. Each output entry accumulates over k in
/// increasing order starting from 0.0.
inline Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: " + a.shape_string() + " x " + b.shape_string());
  }
  Matrix c(a.rows(), b.cols());
  const std::size_t n = a.cols();
  const std::size_t p = b.cols();
  for (std::size_t i = 0; i < a.rows(); ++i) {
    double* out = c.row(i).data();
    for (std::size_t k = 0; k < n; ++k) {
      const double aik = a(i, k);
      const double* brow = b.row(k).data();
      for (std::size_t j = 0; j < p; ++j) out[j] += aik * brow[j];
    }
  }
  multiply_counter() += a.rows() * n * p;
  return c;
}

/// aᵀ·b without materializing the transpose.
inline Matrix matmul_tn(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows()) {
    throw ShapeError("matmul_tn: " + a.shape_string() + "^T x " + b.shape_string());
  }
  Matrix c(a.cols(), b.cols());
  for (std::size_t k = 0; k < a.rows(); ++k) {
    const double* brow = b.row(k).data();
    for (std::size_t i = 0; i < a.cols(); ++i) {
      const double aki = a(k, i);
      double* out = c.row(i).data();
      for (std::size_t j = 0; j < b.cols(); ++j) out[j] += aki * brow[j];
    }
  }
  multiply_counter() += a.rows() * a.cols() * b.cols();
  return c;
}

/// a·bᵀ without materializing the transpose.
inline Matrix matmul_nt(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols()) {
    throw ShapeError("matmul_nt: " + a.shape_string() + " x " + b.shape_string() + "^T");
  }
  Matrix c(a.rows(), b.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const double* arow = a.row(i).data();
    for (std::size_t j = 0; j < b.rows(); ++j) {
      const double* brow = b.row(j).data();
      double s = 0.0;
      for (std::size_t k = 0; k < a.cols(); ++k) s += arow[k] * brow[k];
      c(i, j) = s;
    }
  }
  multiply_counter() += a.rows() * a.cols() * b.rows();
  return c;
}

inline Matrix hadamard(const Matrix& a, const Matrix& b) {
  if (!a.same_shape(b)) {
    throw ShapeError("hadamard: " + a.shape_string() + " vs " + b.shape_string());
  }
  Matrix c(a.rows(), a.cols());
  for (std::size_t i = 0; i < a.size(); ++i) c.values()[i] = a.values()[i] * b.values()[i];
  return c;
}

inline Matrix relu(const Matrix& m) {
  Matrix out = m;
  for (double& v : out.values()) v = v > 0.0 ? v : 0.0;
  return out;
}

inline double sum_of_squares(std::span<const double> v) noexcept {
  double s = 0.0;
  for (double x : v) s += x * x;
  return s;
}

inline double frobenius_norm(const Matrix& m) noexcept {
  return std::sqrt(sum_of_squares(m.values()));
}

/// Mean of each column.
inline std::vector<double> column_means(const Matrix& m) {
  std::vector<double> mean(m.cols(), 0.0);
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j) mean[j] += m(i, j);
  for (double& v : mean) v /= static_cast<double>(m.rows());
  return mean;
}

// ---------------------------------------------------------------------------
// Rng
// ---------------------------------------------------------------------------

/// Counter-based generator: the i-th draw is a SplitMix64 finalization of
/// key + i·golden. Sub-streams are derived by hashing tags into the key, so
/// a stream for (client, round, purpose) never depends on how many draws
/// other streams consumed.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : seed_(seed), key_(mix(seed ^ 0x5bd1e9955bd1e995ULL)) {}

  std::uint64_t seed() const noexcept { return seed_; }

  Rng derive(std::initializer_list<std::uint64_t> tags) const {
    Rng child = *this;
    child.counter_ = 0;
    for (std::uint64_t tag : tags) child.key_ = mix(child.key_ ^ mix(tag + kGolden));
    return child;
  }

  std::uint64_t next_u64() noexcept { return mix(key_ + (++counter_) * kGolden); }

  /// Uniform on [0, 1) with 53 random bits.
  double uniform() noexcept { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double normal() noexcept {
    const double u1 = (static_cast<double>(next_u64() >> 11) + 1.0) * 0x1.0p-53;  // (0, 1]
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * kPi * u2);
  }

  /// Uniform integer in [0, n) by rejection, n > 0.
  std::uint64_t below(std::uint64_t n) noexcept {
    const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
    std::uint64_t x = next_u64();
    while (x >= limit) x = next_u64();
    return x % n;
  }

  template <typename T>
  void shuffle(std::span<T> items) noexcept {
    for (std::size_t i = items.size(); i > 1; --i) {
      std::swap(items[i - 1], items[below(i)]);
    }
  }

 private:
  static constexpr std::uint64_t kGolden = 0x9e3779b97f4a7c15ULL;
  static constexpr double kPi = 3.14159265358979323846;

  static constexpr std::uint64_t mix(std::uint64_t z) noexcept {
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  std::uint64_t seed_;
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

inline Matrix gaussian_matrix(std::size_t rows, std::size_t cols, double sigma, Rng& rng) {
  if (!(sigma > 0.0)) throw ParameterError("gaussian_matrix: sigma must be > 0");
  Matrix m(rows, cols);
  for (double& v : m.values()) v = sigma * rng.normal();
  return m;
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

struct LossAndGrad {
  double loss = 0.0;
  Matrix grad;
};

/// Row-wise softmax with max subtraction.
inline Matrix softmax_rows(const Matrix& logits, double temperature = 1.0) {
  Matrix p(logits.rows(), logits.cols());
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    const auto row = logits.row(i);
    const double mx = *std::max_element(row.begin(), row.end());
    double z = 0.0;
    for (std::size_t c = 0; c < row.size(); ++c) {
      p(i, c) = std::exp((row[c] - mx) / temperature);
      z += p(i, c);
    }
    for (std::size_t c = 0; c < row.size(); ++c) p(i, c) /= z;
  }
  return p;
}

/// Mean cross-entropy over the batch and its exact gradient
/// (softmax − onehot) / batch.
inline LossAndGrad softmax_cross_entropy(const Matrix& logits, std::span<const int> labels) {
  if (labels.size() != logits.rows()) {
    throw ShapeError("softmax_cross_entropy: " + std::to_string(labels.size()) +
                     " labels for " + std::to_string(logits.rows()) + " rows");
  }
  if (logits.rows() == 0) throw InputError("softmax_cross_entropy: empty batch");
  const auto classes = static_cast<int>(logits.cols());
  LossAndGrad out{0.0, Matrix(logits.rows(), logits.cols())};
  const double inv_batch = 1.0 / static_cast<double>(logits.rows());
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    const int y = labels[i];
    if (y < 0 || y >= classes) {
      throw InputError("softmax_cross_entropy: label " + std::to_string(y) +
                       " outside [0, " + std::to_string(classes) + ")");
    }
    const auto row = logits.row(i);
    const double mx = *std::max_element(row.begin(), row.end());
    double z = 0.0;
    for (double v : row) z += std::exp(v - mx);
    const double log_z = std::log(z) + mx;
    out.loss += (log_z - row[y]) * inv_batch;
    for (std::size_t c = 0; c < row.size(); ++c) {
      out.grad(i, c) = std::exp(row[c] - log_z) * inv_batch;
    }
    out.grad(i, static_cast<std::size_t>(y)) -= inv_batch;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Truncated SVD (one-sided Jacobi)
// ---------------------------------------------------------------------------

struct TruncatedSvd {
  Matrix u;                    // rows x r, orthonormal columns (zero where σ = 0)
  std::vector<double> sigma;   // r, non-increasing, >= 0
  Matrix v;                    // cols x r
};

namespace detail {

// Full thin SVD of a tall (rows >= cols) matrix.
inline TruncatedSvd jacobi_svd_tall(const Matrix& a) {
  const std::size_t m = a.rows();
  const std::size_t n = a.cols();
  Matrix u = a;
  Matrix v = Matrix::identity(n);
  constexpr double kTol = 1e-12;
  constexpr int kMaxSweeps = 100;

  for (int sweep = 0; sweep < kMaxSweeps; ++sweep) {
    bool rotated = false;
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        double alpha = 0.0, beta = 0.0, gamma = 0.0;
        for (std::size_t i = 0; i < m; ++i) {
          alpha += u(i, p) * u(i, p);
          beta += u(i, q) * u(i, q);
          gamma += u(i, p) * u(i, q);
        }
        if (gamma == 0.0 || std::abs(gamma) <= kTol * std::sqrt(alpha * beta)) continue;
        rotated = true;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        for (std::size_t i = 0; i < m; ++i) {
          const double up = u(i, p), uq = u(i, q);
          u(i, p) = c * up - s * uq;
          u(i, q) = s * up + c * uq;
        }
        for (std::size_t i = 0; i < n; ++i) {
          const double vp = v(i, p), vq = v(i, q);
          v(i, p) = c * vp - s * vq;
          v(i, q) = s * vp + c * vq;
        }
      }
    }
    if (!rotated) break;
  }

  std::vector<double> sigma(n);
  for (std::size_t j = 0; j < n; ++j) {
    double norm = 0.0;
    for (std::size_t i = 0; i < m; ++i) norm += u(i, j) * u(i, j);
    sigma[j] = std::sqrt(norm);
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t x, std::size_t y) { return sigma[x] > sigma[y]; });

  TruncatedSvd out{Matrix(m, n), std::vector<double>(n), Matrix(n, n)};
  for (std::size_t k = 0; k < n; ++k) {
    const std::size_t j = order[k];
    out.sigma[k] = sigma[j];
    const double inv = sigma[j] > 0.0 ? 1.0 / sigma[j] : 0.0;
    for (std::size_t i = 0; i < m; ++i) out.u(i, k) = u(i, j) * inv;
    for (std::size_t i = 0; i < n; ++i) out.v(i, k) = v(i, j);
  }
  return out;
}

inline Matrix leading_columns(const Matrix& m, std::size_t r) {
  Matrix out(m.rows(), r);
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < r; ++j) out(i, j) = m(i, j);
  return out;
}

}  // namespace detail

/// Top-r singular triplets of m: u·diag(sigma)·vᵀ is the best Frobenius
/// rank-r approximation.
inline TruncatedSvd svd_truncate(const Matrix& m, std::size_t r) {
  const std::size_t max_rank = std::min(m.rows(), m.cols());
  if (r < 1 || r > max_rank) {
    throw ParameterError("svd_truncate: rank " + std::to_string(r) + " outside [1, " +
                         std::to_string(max_rank) + "]");
  }
  TruncatedSvd full;
  if (m.rows() >= m.cols()) {
    full = detail::jacobi_svd_tall(m);
  } else {
    full = detail::jacobi_svd_tall(transpose(m));
    std::swap(full.u, full.v);
  }
  full.u = detail::leading_columns(full.u, r);
  full.v = detail::leading_columns(full.v, r);
  full.sigma.resize(r);
  return full;
}

inline Matrix reconstruct(const TruncatedSvd& svd) {
  Matrix us = svd.u;
  for (std::size_t i = 0; i < us.rows(); ++i)
    for (std::size_t j = 0; j < us.cols(); ++j) us(i, j) *= svd.sigma[j];
  return matmul_nt(us, svd.v);
}

}  // namespace spdcfl
