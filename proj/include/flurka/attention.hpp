#pragma once

// Constituent attention mechanisms: full softmax MHSA, low-rank (Linformer
// style) attention and kernelized attention with pluggable feature maps.
//
// Conventions shared by every variant:
//   * heads are concatenated horizontally, there is no output projection;
//   * the projected queries Q' = Q W^Q are multiplied by 1/sqrt(d_head)
//     before any score or feature map is formed (kernel variants may opt
//     out through FeatureMapSpec::scale_inputs);
//   * kernel attention is always row-normalized.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "flurka/error.hpp"
#include "flurka/tensor.hpp"

namespace flurka {

struct AttentionConfig {
  std::size_t n = 0;        // sequence length
  std::size_t d_model = 0;  // hidden dimension
  std::size_t d_head = 0;   // per-head dimension
  std::size_t heads = 0;
  std::size_t d_k = 0;      // low-rank downsampling factor
  std::uint64_t seed = 0;

  void validate() const {
    if (n == 0 || d_model == 0 || d_head == 0 || heads == 0 || d_k == 0) {
      throw ConfigError("all attention dimensions must be >= 1");
    }
    if (d_model != heads * d_head) {
      throw ConfigError("d_model (" + std::to_string(d_model) + ") must equal heads * d_head (" +
                        std::to_string(heads) + " * " + std::to_string(d_head) + ")");
    }
    if (d_k > n) {
      throw ConfigError("d_k (" + std::to_string(d_k) + ") must not exceed n (" + std::to_string(n) +
                        ")");
    }
  }
};

struct HeadWeights {
  Matrix wq;
  Matrix wk;
  Matrix wv;
};

enum class ProjectionMode { practical, theorem, identity };

inline const char* to_string(ProjectionMode mode) {
  switch (mode) {
    case ProjectionMode::practical: return "practical";
    case ProjectionMode::theorem: return "theorem";
    case ProjectionMode::identity: return "identity";
  }
  return "?";
}

/// E1 contracts the keys, E2 the values; both are d_k x n.
struct LowRankProjections {
  Matrix e1;
  Matrix e2;
  ProjectionMode mode = ProjectionMode::practical;
  double delta = 0.0;  // theorem mode only
};

enum class FeatureKind { prf, elu };

inline const char* to_string(FeatureKind kind) { return kind == FeatureKind::prf ? "prf" : "elu"; }

struct FeatureMapSpec {
  FeatureKind kind = FeatureKind::prf;
  std::size_t m = 0;  // PRF feature count; 0 selects d_head
  std::uint64_t seed = 0;
  bool scale_inputs = true;

  friend bool operator==(const FeatureMapSpec&, const FeatureMapSpec&) = default;
};

inline constexpr double kPrfExponentLimit = 700.0;
inline constexpr double kDenominatorFloor = 1e-12;

/// A feature map bound to a head dimension. For PRF the projection
/// directions w_1..w_m (columns of omega, d_head x m) are drawn once from
/// spec.seed and reused for every head and every call.
class FeatureMap {
 public:
  FeatureMap(const FeatureMapSpec& spec, std::size_t d_head) : spec_(spec), d_head_(d_head) {
    if (d_head == 0) throw ConfigError("feature map needs d_head >= 1");
    if (spec_.kind == FeatureKind::prf) {
      if (spec_.m == 0) spec_.m = d_head;
      RngStream rng(spec_.seed);
      omega_ = gaussian(rng, d_head, spec_.m, 1.0);
    }
  }

  const FeatureMapSpec& spec() const noexcept { return spec_; }
  FeatureKind kind() const noexcept { return spec_.kind; }
  std::size_t input_dim() const noexcept { return d_head_; }
  std::size_t output_dim() const noexcept { return spec_.kind == FeatureKind::prf ? spec_.m : d_head_; }

  /// d_head x m; only meaningful for PRF.
  const Matrix& omega() const {
    if (!omega_) throw ConfigError("ELU feature map has no random directions");
    return *omega_;
  }

  /// Unscaled PRF features psi_i(x) = exp(w_i^T x - |x|^2 / 2), one row per
  /// input row. Throws NumericError when an exponent exceeds the overflow
  /// guard.
  template <std::floating_point T>
  BasicMatrix<T> psi(const BasicMatrix<T>& x) const {
    check_input(x);
    const auto& w = omega_as<T>();
    BasicMatrix<T> out = matmul(x, w);
    const T limit = std::is_same_v<T, float> ? T{80} : T{kPrfExponentLimit};
    for (std::size_t i = 0; i < x.rows(); ++i) {
      T sq{0};
      for (T e : x.row(i)) sq += e * e;
      const T half = sq / T{2};
      for (T& e : out.row(i)) {
        const T arg = e - half;
        if (arg > limit) {
          throw NumericError("PRF exponent " + std::to_string(static_cast<double>(arg)) +
                             " overflows; scale the inputs down (e.g. by 1/sqrt(d_head))");
        }
        e = std::exp(arg);
      }
    }
    return out;
  }

  template <std::floating_point T>
  BasicMatrix<T> apply(const BasicMatrix<T>& x) const {
    if (spec_.kind == FeatureKind::elu) {
      check_input(x);
      BasicMatrix<T> out = x;
      for (T& e : out.values()) e = e >= T{0} ? e + T{1} : std::exp(e);
      return out;
    }
    BasicMatrix<T> out = psi(x);
    const T scale = T{1} / std::sqrt(static_cast<T>(spec_.m));
    for (T& e : out.values()) e *= scale;
    return out;
  }

 private:
  template <std::floating_point T>
  void check_input(const BasicMatrix<T>& x) const {
    if (x.cols() != d_head_) {
      throw ConfigError("feature map expects " + std::to_string(d_head_) + " columns, got " + x.shape());
    }
  }

  template <std::floating_point T>
  BasicMatrix<T> omega_as() const {
    return omega().template cast<T>();
  }

  FeatureMapSpec spec_;
  std::size_t d_head_;
  std::optional<Matrix> omega_;
};

template <std::floating_point T>
BasicMatrix<T> apply_feature_map(const BasicMatrix<T>& x, const FeatureMapSpec& spec) {
  return FeatureMap(spec, x.cols()).apply(x);
}

struct SampledParams {
  std::vector<HeadWeights> heads;
  LowRankProjections projections;
};

/// Per-head weights N(0, 1/d_model) followed by independent N(0, 1/d_k)
/// projections, all drawn in that order from one stream seeded by cfg.seed.
inline SampledParams sample_params(const AttentionConfig& cfg) {
  cfg.validate();
  RngStream rng(cfg.seed);
  const double wstd = 1.0 / std::sqrt(static_cast<double>(cfg.d_model));
  std::vector<HeadWeights> heads;
  heads.reserve(cfg.heads);
  for (std::size_t h = 0; h < cfg.heads; ++h) {
    Matrix wq = gaussian(rng, cfg.d_model, cfg.d_head, wstd);
    Matrix wk = gaussian(rng, cfg.d_model, cfg.d_head, wstd);
    Matrix wv = gaussian(rng, cfg.d_model, cfg.d_head, wstd);
    heads.push_back({std::move(wq), std::move(wk), std::move(wv)});
  }
  const double estd = 1.0 / std::sqrt(static_cast<double>(cfg.d_k));
  Matrix e1 = gaussian(rng, cfg.d_k, cfg.n, estd);
  Matrix e2 = gaussian(rng, cfg.d_k, cfg.n, estd);
  return {std::move(heads), {std::move(e1), std::move(e2), ProjectionMode::practical, 0.0}};
}

inline LowRankProjections identity_projections(std::size_t n) {
  return {Matrix::identity(n), Matrix::identity(n), ProjectionMode::identity, 0.0};
}

// ---------------------------------------------------------------------------
// Shared head machinery.

enum class Role { query, key, value };

namespace detail {

/// Borrow double data directly, convert otherwise.
template <std::floating_point T>
decltype(auto) as_precision(const Matrix& m) {
  if constexpr (std::is_same_v<T, double>) {
    return (m);
  } else {
    return m.template cast<T>();
  }
}

inline const Matrix& pick(const HeadWeights& w, Role role) {
  switch (role) {
    case Role::query: return w.wq;
    case Role::key: return w.wk;
    case Role::value: return w.wv;
  }
  return w.wq;
}

template <std::floating_point T>
BasicMatrix<T> row_block(const BasicMatrix<T>& a, std::size_t first, std::size_t count) {
  BasicMatrix<T> out(count, a.cols());
  std::copy(a.data() + first * a.cols(), a.data() + (first + count) * a.cols(), out.data());
  return out;
}

template <std::floating_point T>
void write_row_block(BasicMatrix<T>& dst, std::size_t first, std::size_t col0, const BasicMatrix<T>& src) {
  for (std::size_t i = 0; i < src.rows(); ++i) {
    auto r = src.row(i);
    std::copy(r.begin(), r.end(), dst.row(first + i).begin() + static_cast<std::ptrdiff_t>(col0));
  }
}

inline constexpr std::size_t kSoftmaxRowChunk = 256;

/// softmax(qp kp^T) vp for one head, written into columns [col0, col0+d_h)
/// of `out`. Scores are built a chunk of query rows at a time so the full
/// n x n matrix never exists at once.
template <std::floating_point T>
void softmax_head(const BasicMatrix<T>& qp, const BasicMatrix<T>& kp, const BasicMatrix<T>& vp,
                  BasicMatrix<T>& out, std::size_t col0) {
  const BasicMatrix<T> kt = transpose(kp);
  for (std::size_t r0 = 0; r0 < qp.rows(); r0 += kSoftmaxRowChunk) {
    const std::size_t count = std::min(kSoftmaxRowChunk, qp.rows() - r0);
    BasicMatrix<T> scores = matmul(row_block(qp, r0, count), kt);
    row_softmax_in_place(scores);
    write_row_block(out, r0, col0, matmul(scores, vp));
  }
}

/// Normalized phi(Q) (phi(K)^T V) for one head, contracted right to left.
/// Returns true when any denominator hit the floor.
template <std::floating_point T>
bool kernel_head(const BasicMatrix<T>& fq, const BasicMatrix<T>& fk, const BasicMatrix<T>& vp,
                 BasicMatrix<T>& out, std::size_t col0) {
  const BasicMatrix<T> fkt = transpose(fk);
  const BasicMatrix<T> kv = matmul(fkt, vp);                          // d_p x d_h
  const BasicMatrix<T> ksum = matmul(fkt, BasicMatrix<T>(fk.rows(), 1, T{1}));  // d_p x 1
  const BasicMatrix<T> num = matmul(fq, kv);
  const BasicMatrix<T> den = matmul(fq, ksum);
  bool clamped = false;
  for (std::size_t i = 0; i < num.rows(); ++i) {
    T d = den(i, 0);
    if (!(d >= T(kDenominatorFloor))) {
      d = T(kDenominatorFloor);
      clamped = true;
    }
    auto dst = out.row(i).subspan(col0, num.cols());
    auto src = num.row(i);
    for (std::size_t j = 0; j < src.size(); ++j) dst[j] = src[j] / d;
  }
  return clamped;
}

}  // namespace detail

/// X [W_1 | W_2 | ... | W_H] for the chosen role: one wide product instead
/// of H narrow ones. Head h occupies columns [h d_h, (h+1) d_h).
template <std::floating_point T>
BasicMatrix<T> project_all_heads(const BasicMatrix<T>& x, std::span<const HeadWeights> params, Role role) {
  std::vector<Matrix> blocks;
  blocks.reserve(params.size());
  for (const auto& w : params) blocks.push_back(detail::pick(w, role));
  const Matrix wide = hcat<double>(blocks);
  return matmul(x, detail::as_precision<T>(wide));
}

template <std::floating_point T>
void scale_in_place(BasicMatrix<T>& a, double factor) {
  const T f = static_cast<T>(factor);
  for (T& x : a.values()) x *= f;
}

inline double query_scale(const AttentionConfig& cfg) {
  return 1.0 / std::sqrt(static_cast<double>(cfg.d_head));
}

template <std::floating_point T>
void check_attention_inputs(const BasicMatrix<T>& q, const BasicMatrix<T>& k, const BasicMatrix<T>& v,
                            std::span<const HeadWeights> params, const AttentionConfig& cfg) {
  cfg.validate();
  for (const auto* x : {&q, &k, &v}) {
    if (x->rows() != cfg.n || x->cols() != cfg.d_model) {
      throw ConfigError("attention input is " + x->shape() + ", expected " +
                        shape_string(cfg.n, cfg.d_model));
    }
  }
  if (params.size() != cfg.heads) {
    throw ConfigError("expected " + std::to_string(cfg.heads) + " heads of weights, got " +
                      std::to_string(params.size()));
  }
  for (const auto& w : params) {
    for (const Matrix* m : {&w.wq, &w.wk, &w.wv}) {
      if (m->rows() != cfg.d_model || m->cols() != cfg.d_head) {
        throw ConfigError("head weight is " + m->shape() + ", expected " +
                          shape_string(cfg.d_model, cfg.d_head));
      }
    }
  }
}

inline void check_projections(const LowRankProjections& proj, const AttentionConfig& cfg) {
  for (const Matrix* e : {&proj.e1, &proj.e2}) {
    if (e->rows() != cfg.d_k || e->cols() != cfg.n) {
      throw ConfigError("projection is " + e->shape() + ", expected " + shape_string(cfg.d_k, cfg.n));
    }
  }
}

/// Multi-head softmax attention, heads concatenated.
template <std::floating_point T>
BasicMatrix<T> full_attention(const BasicMatrix<T>& q, const BasicMatrix<T>& k, const BasicMatrix<T>& v,
                              std::span<const HeadWeights> params, const AttentionConfig& cfg) {
  check_attention_inputs(q, k, v, params, cfg);
  BasicMatrix<T> qp = project_all_heads(q, params, Role::query);
  scale_in_place(qp, query_scale(cfg));
  const BasicMatrix<T> kp = project_all_heads(k, params, Role::key);
  const BasicMatrix<T> vp = project_all_heads(v, params, Role::value);
  BasicMatrix<T> out(cfg.n, cfg.d_model);
  for (std::size_t h = 0; h < cfg.heads; ++h) {
    const std::size_t c0 = h * cfg.d_head;
    detail::softmax_head(slice_cols(qp, c0, cfg.d_head), slice_cols(kp, c0, cfg.d_head),
                         slice_cols(vp, c0, cfg.d_head), out, c0);
  }
  return out;
}

/// softmax(Q' (E1 K W^K)^T / sqrt(d_h)) (E2 V W^V) per head.
template <std::floating_point T>
BasicMatrix<T> linformer_attention(const BasicMatrix<T>& q, const BasicMatrix<T>& k, const BasicMatrix<T>& v,
                                   std::span<const HeadWeights> params, const LowRankProjections& proj,
                                   const AttentionConfig& cfg) {
  check_attention_inputs(q, k, v, params, cfg);
  check_projections(proj, cfg);
  BasicMatrix<T> qp = project_all_heads(q, params, Role::query);
  scale_in_place(qp, query_scale(cfg));
  const BasicMatrix<T> kc = matmul(detail::as_precision<T>(proj.e1), k);
  const BasicMatrix<T> vc = matmul(detail::as_precision<T>(proj.e2), v);
  const BasicMatrix<T> kp = project_all_heads(kc, params, Role::key);
  const BasicMatrix<T> vp = project_all_heads(vc, params, Role::value);
  BasicMatrix<T> out(cfg.n, cfg.d_model);
  for (std::size_t h = 0; h < cfg.heads; ++h) {
    const std::size_t c0 = h * cfg.d_head;
    detail::softmax_head(slice_cols(qp, c0, cfg.d_head), slice_cols(kp, c0, cfg.d_head),
                         slice_cols(vp, c0, cfg.d_head), out, c0);
  }
  return out;
}

template <std::floating_point T>
struct KernelAttentionResult {
  BasicMatrix<T> output;
  bool denominator_clamped = false;
};

/// Normalized kernel attention phi(Q') (phi(K')^T V') per head; the n x n
/// attention matrix is never formed.
template <std::floating_point T>
KernelAttentionResult<T> kernel_attention(const BasicMatrix<T>& q, const BasicMatrix<T>& k,
                                          const BasicMatrix<T>& v, std::span<const HeadWeights> params,
                                          const FeatureMapSpec& spec, const AttentionConfig& cfg) {
  check_attention_inputs(q, k, v, params, cfg);
  const FeatureMap phi(spec, cfg.d_head);
  BasicMatrix<T> qp = project_all_heads(q, params, Role::query);
  if (spec.scale_inputs) scale_in_place(qp, query_scale(cfg));
  const BasicMatrix<T> kp = project_all_heads(k, params, Role::key);
  const BasicMatrix<T> vp = project_all_heads(v, params, Role::value);
  KernelAttentionResult<T> result{BasicMatrix<T>(cfg.n, cfg.d_model), false};
  for (std::size_t h = 0; h < cfg.heads; ++h) {
    const std::size_t c0 = h * cfg.d_head;
    const auto fq = phi.apply(slice_cols(qp, c0, cfg.d_head));
    const auto fk = phi.apply(slice_cols(kp, c0, cfg.d_head));
    result.denominator_clamped |=
        detail::kernel_head(fq, fk, slice_cols(vp, c0, cfg.d_head), result.output, c0);
  }
  return result;
}

// ---------------------------------------------------------------------------
// Explicit attention matrices, for analysis and oracles only (O(n^2)).

/// Rows of fq fk^T divided by their sums (floored like kernel_head).
inline Matrix normalized_kernel_matrix(const Matrix& fq, const Matrix& fk) {
  Matrix a = matmul_nt(fq, fk);
  for (std::size_t i = 0; i < a.rows(); ++i) {
    double s = 0.0;
    for (double x : a.row(i)) s += x;
    s = std::max(s, kDenominatorFloor);
    for (double& x : a.row(i)) x /= s;
  }
  return a;
}

/// row_softmax(qp kp^T); qp is expected to carry its scaling already.
inline Matrix softmax_matrix(const Matrix& qp, const Matrix& kp) { return row_softmax(matmul_nt(qp, kp)); }

}  // namespace flurka
