#pragma once

// Dense row-major matrices, a reproducible RNG, norms and small-matrix
// spectral tools. Everything above this header reduces to these calls.

#include <algorithm>
#include <bit>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <numbers>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "flurka/error.hpp"

namespace flurka {

namespace detail {

// Largest min(rows, cols) of any matrix allocated on this thread since the
// last reset. Lets tests prove a code path never builds an n x n buffer.
inline thread_local std::size_t allocation_watermark_value = 0;

inline void note_allocation(std::size_t rows, std::size_t cols) {
  allocation_watermark_value = std::max(allocation_watermark_value, std::min(rows, cols));
}

}  // namespace detail

inline std::size_t allocation_watermark() { return detail::allocation_watermark_value; }
inline void reset_allocation_watermark() { detail::allocation_watermark_value = 0; }

inline std::string shape_string(std::size_t rows, std::size_t cols) {
  return std::to_string(rows) + "x" + std::to_string(cols);
}

template <std::floating_point T>
class BasicMatrix {
 public:
  using value_type = T;

  BasicMatrix(std::size_t rows, std::size_t cols, T fill = T{0})
      : rows_(rows), cols_(cols), data_(checked_size(rows, cols), fill) {
    detail::note_allocation(rows, cols);
  }

  BasicMatrix(std::size_t rows, std::size_t cols, std::vector<T> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != checked_size(rows, cols)) {
      throw ConfigError("matrix data length " + std::to_string(data_.size()) +
                        " does not match shape " + shape_string(rows, cols));
    }
    detail::note_allocation(rows, cols);
  }

  BasicMatrix(std::initializer_list<std::initializer_list<T>> init)
      : BasicMatrix(init.size(), init.size() == 0 ? 0 : init.begin()->size()) {
    std::size_t r = 0;
    for (const auto& row : init) {
      if (row.size() != cols_) throw ConfigError("ragged matrix literal");
      std::copy(row.begin(), row.end(), data_.begin() + static_cast<std::ptrdiff_t>(r * cols_));
      ++r;
    }
  }

  static BasicMatrix identity(std::size_t n) {
    BasicMatrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = T{1};
    return m;
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  std::string shape() const { return shape_string(rows_, cols_); }

  T& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
  const T& operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }

  std::span<T> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
  std::span<const T> row(std::size_t r) const noexcept { return {data_.data() + r * cols_, cols_}; }

  std::span<T> values() noexcept { return data_; }
  std::span<const T> values() const noexcept { return data_; }
  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }

  template <std::floating_point U>
  BasicMatrix<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return BasicMatrix<U>(rows_, cols_, std::move(out));
  }

  bool all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(), [](T x) { return std::isfinite(x); });
  }

  friend bool operator==(const BasicMatrix&, const BasicMatrix&) = default;

 private:
  static std::size_t checked_size(std::size_t rows, std::size_t cols) {
    if (rows == 0 || cols == 0) {
      throw ConfigError("matrix dimensions must be positive, got " + shape_string(rows, cols));
    }
    return rows * cols;
  }

  std::size_t rows_;
  std::size_t cols_;
  std::vector<T> data_;
};

using Matrix = BasicMatrix<double>;
using MatrixF = BasicMatrix<float>;

// ---------------------------------------------------------------------------
// RNG: splitmix64 seed expansion feeding xoshiro256++.

inline std::uint64_t splitmix64_next(std::uint64_t& state) noexcept {
  state += 0x9E3779B97F4A7C15ULL;
  std::uint64_t z = state;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

/// Single-owner random stream. Identical seeds give identical sequences on
/// every platform; fork() derives an independent child stream.
class RngStream {
 public:
  explicit RngStream(std::uint64_t seed) noexcept {
    std::uint64_t sm = seed;
    for (auto& word : state_) word = splitmix64_next(sm);
  }

  std::uint64_t next_u64() noexcept {
    const std::uint64_t result = std::rotl(state_[0] + state_[3], 23) + state_[0];
    const std::uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = std::rotl(state_[3], 45);
    return result;
  }

  /// Uniform on [0, 1) with 53 random bits.
  double uniform() noexcept { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  RngStream fork() noexcept { return RngStream(next_u64()); }

 private:
  std::uint64_t state_[4];
};

/// i.i.d. N(0, stddev^2) entries, filled row-major. Each Box-Muller pair
/// consumes exactly two uniforms; an odd trailing sample discards its twin.
inline Matrix gaussian(RngStream& rng, std::size_t rows, std::size_t cols, double stddev) {
  if (!(stddev > 0.0)) throw ConfigError("gaussian stddev must be positive");
  Matrix out(rows, cols);
  auto v = out.values();
  for (std::size_t i = 0; i < v.size(); i += 2) {
    const double u1 = rng.uniform();
    const double u2 = rng.uniform();
    const double radius = std::sqrt(-2.0 * std::log(1.0 - u1));
    const double angle = 2.0 * std::numbers::pi * u2;
    v[i] = stddev * radius * std::cos(angle);
    if (i + 1 < v.size()) v[i + 1] = stddev * radius * std::sin(angle);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Products and elementwise helpers.

namespace detail {

inline constexpr std::size_t kTileRows = 32;
inline constexpr std::size_t kTileInner = 128;
inline constexpr std::size_t kTileCols = 256;

}  // namespace detail

/// c = a * b. Every entry accumulates its k-terms in ascending k starting
/// from zero, exactly like the textbook triple loop; the tiling only changes
/// which entries are in flight, never the order within one entry.
template <std::floating_point T>
BasicMatrix<T> matmul(const BasicMatrix<T>& a, const BasicMatrix<T>& b) {
  if (a.cols() != b.rows()) {
    throw ConfigError("matmul dimension mismatch: " + a.shape() + " * " + b.shape());
  }
  const std::size_t m = a.rows(), inner = a.cols(), n = b.cols();
  BasicMatrix<T> c(m, n);
  const T* pa = a.data();
  const T* pb = b.data();
  T* pc = c.data();
  for (std::size_t j0 = 0; j0 < n; j0 += detail::kTileCols) {
    const std::size_t j1 = std::min(n, j0 + detail::kTileCols);
    for (std::size_t i0 = 0; i0 < m; i0 += detail::kTileRows) {
      const std::size_t i1 = std::min(m, i0 + detail::kTileRows);
      for (std::size_t k0 = 0; k0 < inner; k0 += detail::kTileInner) {
        const std::size_t k1 = std::min(inner, k0 + detail::kTileInner);
        for (std::size_t i = i0; i < i1; ++i) {
          T* crow = pc + i * n;
          const T* arow = pa + i * inner;
          for (std::size_t k = k0; k < k1; ++k) {
            const T aik = arow[k];
            if (aik == T{0}) continue;  // adds an exact zero for finite b
            const T* brow = pb + k * n;
            for (std::size_t j = j0; j < j1; ++j) crow[j] += aik * brow[j];
          }
        }
      }
    }
  }
  return c;
}

template <std::floating_point T>
BasicMatrix<T> transpose(const BasicMatrix<T>& a) {
  BasicMatrix<T> t(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
  return t;
}

/// a * b^T with the same per-entry accumulation order as matmul.
template <std::floating_point T>
BasicMatrix<T> matmul_nt(const BasicMatrix<T>& a, const BasicMatrix<T>& b) {
  return matmul(a, transpose(b));
}

/// a^T * b with the same per-entry accumulation order as matmul.
template <std::floating_point T>
BasicMatrix<T> matmul_tn(const BasicMatrix<T>& a, const BasicMatrix<T>& b) {
  return matmul(transpose(a), b);
}

template <std::floating_point T>
void require_same_shape(const BasicMatrix<T>& a, const BasicMatrix<T>& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ConfigError(std::string(op) + " shape mismatch: " + a.shape() + " vs " + b.shape());
  }
}

template <std::floating_point T>
BasicMatrix<T> operator+(BasicMatrix<T> a, const BasicMatrix<T>& b) {
  require_same_shape(a, b, "add");
  auto av = a.values();
  auto bv = b.values();
  for (std::size_t i = 0; i < av.size(); ++i) av[i] += bv[i];
  return a;
}

template <std::floating_point T>
BasicMatrix<T> operator-(BasicMatrix<T> a, const BasicMatrix<T>& b) {
  require_same_shape(a, b, "subtract");
  auto av = a.values();
  auto bv = b.values();
  for (std::size_t i = 0; i < av.size(); ++i) av[i] -= bv[i];
  return a;
}

template <std::floating_point T>
BasicMatrix<T> operator*(T s, BasicMatrix<T> a) {
  for (T& x : a.values()) x *= s;
  return a;
}

template <std::floating_point T>
BasicMatrix<T>& add_in_place(BasicMatrix<T>& a, const BasicMatrix<T>& b) {
  require_same_shape(a, b, "add");
  auto av = a.values();
  auto bv = b.values();
  for (std::size_t i = 0; i < av.size(); ++i) av[i] += bv[i];
  return a;
}

template <std::floating_point T>
BasicMatrix<T> hadamard(BasicMatrix<T> a, const BasicMatrix<T>& b) {
  require_same_shape(a, b, "hadamard");
  auto av = a.values();
  auto bv = b.values();
  for (std::size_t i = 0; i < av.size(); ++i) av[i] *= bv[i];
  return a;
}

template <std::floating_point T>
T sum(const BasicMatrix<T>& a) {
  T s{0};
  for (T x : a.values()) s += x;
  return s;
}

/// Columns [first, first + count) as a new matrix.
template <std::floating_point T>
BasicMatrix<T> slice_cols(const BasicMatrix<T>& a, std::size_t first, std::size_t count) {
  if (first + count > a.cols()) {
    throw ConfigError("column slice out of range for " + a.shape());
  }
  BasicMatrix<T> out(a.rows(), count);
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto src = a.row(i).subspan(first, count);
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  return out;
}

/// Writes `block` into columns starting at `first`.
template <std::floating_point T>
void set_cols(BasicMatrix<T>& dst, std::size_t first, const BasicMatrix<T>& block) {
  if (dst.rows() != block.rows() || first + block.cols() > dst.cols()) {
    throw ConfigError("column block " + block.shape() + " does not fit " + dst.shape());
  }
  for (std::size_t i = 0; i < dst.rows(); ++i) {
    auto src = block.row(i);
    std::copy(src.begin(), src.end(), dst.row(i).begin() + static_cast<std::ptrdiff_t>(first));
  }
}

/// Horizontal concatenation.
template <std::floating_point T>
BasicMatrix<T> hcat(std::span<const BasicMatrix<T>> blocks) {
  if (blocks.empty()) throw ConfigError("hcat of no blocks");
  std::size_t cols = 0;
  for (const auto& b : blocks) {
    if (b.rows() != blocks.front().rows()) throw ConfigError("hcat row mismatch");
    cols += b.cols();
  }
  BasicMatrix<T> out(blocks.front().rows(), cols);
  std::size_t at = 0;
  for (const auto& b : blocks) {
    set_cols(out, at, b);
    at += b.cols();
  }
  return out;
}

/// Row-wise exp(x - max) / sum. Rows with a single entry become exactly 1.
template <std::floating_point T>
void row_softmax_in_place(BasicMatrix<T>& a) {
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto r = a.row(i);
    const T mx = *std::max_element(r.begin(), r.end());
    T total{0};
    for (T& x : r) {
      x = std::exp(x - mx);
      total += x;
    }
    for (T& x : r) x /= total;
  }
}

template <std::floating_point T>
BasicMatrix<T> row_softmax(BasicMatrix<T> a) {
  row_softmax_in_place(a);
  return a;
}

// ---------------------------------------------------------------------------
// Norms and spectra.

/// Induced infinity norm: largest absolute row sum.
template <std::floating_point T>
T norm_inf(const BasicMatrix<T>& a) {
  T best{0};
  for (std::size_t i = 0; i < a.rows(); ++i) {
    T s{0};
    for (T x : a.row(i)) s += std::abs(x);
    best = std::max(best, s);
  }
  return best;
}

struct SpectralNorm {
  double value = 0.0;
  bool converged = false;
  int iterations = 0;
};

/// Largest singular value by power iteration on a^T a from a fixed seed-0
/// start vector. On non-convergence the last estimate is returned with
/// `converged == false`.
inline SpectralNorm norm_spectral(const Matrix& a, int max_iters = 1000, double tol = 1e-12) {
  if (max_iters < 1) throw ConfigError("norm_spectral needs max_iters >= 1");
  RngStream rng(0);
  Matrix v = gaussian(rng, a.cols(), 1, 1.0);
  auto normalize = [](Matrix& x) {
    double s = 0.0;
    for (double e : x.values()) s += e * e;
    s = std::sqrt(s);
    if (s > 0.0)
      for (double& e : x.values()) e /= s;
    return s;
  };
  normalize(v);
  SpectralNorm result;
  double previous = -1.0;
  for (int it = 1; it <= max_iters; ++it) {
    Matrix w = matmul(a, v);
    double estimate = 0.0;
    for (double e : w.values()) estimate += e * e;
    estimate = std::sqrt(estimate);
    result.value = estimate;
    result.iterations = it;
    if (estimate == 0.0) {
      result.converged = true;
      return result;
    }
    if (previous >= 0.0 && std::abs(estimate - previous) < tol * estimate) {
      result.converged = true;
      return result;
    }
    previous = estimate;
    v = matmul_tn(a, w);
    normalize(v);
  }
  return result;
}

inline constexpr std::size_t kMaxSvdDim = 512;
inline constexpr double kJacobiOffDiagonalThreshold = 1e-14;
inline constexpr int kJacobiMaxSweeps = 60;

/// All singular values, descending. Cyclic Jacobi diagonalization of the
/// Gram matrix carried out one-sided: the rotations act on the columns and
/// Gram entries are formed on the fly, so tiny singular values are not
/// squared into round-off.
inline std::vector<double> singular_values(const Matrix& a) {
  const bool tall = a.rows() >= a.cols();
  const std::size_t len = tall ? a.rows() : a.cols();
  const std::size_t ncols = tall ? a.cols() : a.rows();
  if (ncols > kMaxSvdDim) {
    throw ConfigError("singular_values supports min(rows, cols) <= 512, got " + a.shape());
  }
  // cols[c] holds column c of the tall orientation.
  std::vector<std::vector<double>> cols(ncols, std::vector<double>(len));
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) {
      if (tall)
        cols[j][i] = a(i, j);
      else
        cols[i][j] = a(i, j);
    }

  auto dot = [len](const std::vector<double>& x, const std::vector<double>& y) {
    double s = 0.0;
    for (std::size_t i = 0; i < len; ++i) s += x[i] * y[i];
    return s;
  };

  for (int sweep = 0; sweep < kJacobiMaxSweeps; ++sweep) {
    bool rotated = false;
    for (std::size_t p = 0; p + 1 < ncols; ++p) {
      for (std::size_t q = p + 1; q < ncols; ++q) {
        const double alpha = dot(cols[p], cols[p]);
        const double beta = dot(cols[q], cols[q]);
        const double gamma = dot(cols[p], cols[q]);
        if (gamma == 0.0 || std::abs(gamma) <= kJacobiOffDiagonalThreshold * std::sqrt(alpha * beta))
          continue;
        rotated = true;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        auto& x = cols[p];
        auto& y = cols[q];
        for (std::size_t i = 0; i < len; ++i) {
          const double xi = x[i];
          const double yi = y[i];
          x[i] = c * xi - s * yi;
          y[i] = s * xi + c * yi;
        }
      }
    }
    if (!rotated) break;
  }

  std::vector<double> sv(ncols);
  for (std::size_t c = 0; c < ncols; ++c) sv[c] = std::sqrt(dot(cols[c], cols[c]));
  std::sort(sv.begin(), sv.end(), std::greater<>());
  return sv;
}

/// sigma_max * dim * 2^-52, the usual numerical-rank cutoff.
inline double default_rank_tolerance(double sigma_max, std::size_t dim) {
  return sigma_max * static_cast<double>(dim) * 0x1.0p-52;
}

inline std::size_t numerical_rank(std::span<const double> singular, double tol) {
  return static_cast<std::size_t>(
      std::count_if(singular.begin(), singular.end(), [tol](double s) { return s > tol; }));
}

/// Numerical rank with the default tolerance for this matrix.
inline std::size_t numerical_rank(const Matrix& a) {
  const auto sv = singular_values(a);
  return numerical_rank(sv, default_rank_tolerance(sv.front(), std::max(a.rows(), a.cols())));
}

}  // namespace flurka
