#pragma once

// Fused low-rank + kernel attention.
//
// The optimized form contracts keys and values to d_k rows before any
// projection or feature map:
//
//     head = normalize( phi(Q W^Q) ( phi((E1 K) W^K)^T ((E2 V) W^V) ) )
//
// so the only n-row intermediates are Q', phi(Q') and the output itself.
// The naive form kernelizes all n keys first and contracts afterwards.

#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "flurka/attention.hpp"
#include "flurka/error.hpp"
#include "flurka/tensor.hpp"

namespace flurka {

template <std::floating_point T>
KernelAttentionResult<T> flurka_attention(const BasicMatrix<T>& q, const BasicMatrix<T>& k,
                                          const BasicMatrix<T>& v, std::span<const HeadWeights> params,
                                          const LowRankProjections& proj, const FeatureMapSpec& spec,
                                          const AttentionConfig& cfg) {
  check_attention_inputs(q, k, v, params, cfg);
  check_projections(proj, cfg);
  const FeatureMap phi(spec, cfg.d_head);

  const BasicMatrix<T> kc = matmul(detail::as_precision<T>(proj.e1), k);  // d_k x d_m
  const BasicMatrix<T> vc = matmul(detail::as_precision<T>(proj.e2), v);  // d_k x d_m

  BasicMatrix<T> qp = project_all_heads(q, params, Role::query);
  if (spec.scale_inputs) scale_in_place(qp, query_scale(cfg));
  const BasicMatrix<T> kp = project_all_heads(kc, params, Role::key);
  const BasicMatrix<T> vp = project_all_heads(vc, params, Role::value);

  KernelAttentionResult<T> result{BasicMatrix<T>(cfg.n, cfg.d_model), false};
  for (std::size_t h = 0; h < cfg.heads; ++h) {
    const std::size_t c0 = h * cfg.d_head;
    const auto fq = phi.apply(slice_cols(qp, c0, cfg.d_head));
    const auto fk = phi.apply(slice_cols(kp, c0, cfg.d_head));  // d_k rows
    result.denominator_clamped |=
        detail::kernel_head(fq, fk, slice_cols(vp, c0, cfg.d_head), result.output, c0);
  }
  return result;
}

/// phi(Q') [ (E1 phi(K'))^T (E2 V') ], normalized by phi(Q') (E1 phi(K'))^T 1.
/// The transpose on E1 phi(K') is required for the product to be defined.
template <std::floating_point T>
KernelAttentionResult<T> flurka_naive_attention(const BasicMatrix<T>& q, const BasicMatrix<T>& k,
                                                const BasicMatrix<T>& v, std::span<const HeadWeights> params,
                                                const LowRankProjections& proj, const FeatureMapSpec& spec,
                                                const AttentionConfig& cfg) {
  check_attention_inputs(q, k, v, params, cfg);
  check_projections(proj, cfg);
  const FeatureMap phi(spec, cfg.d_head);
  const auto& e1 = detail::as_precision<T>(proj.e1);
  const auto& e2 = detail::as_precision<T>(proj.e2);

  BasicMatrix<T> qp = project_all_heads(q, params, Role::query);
  if (spec.scale_inputs) scale_in_place(qp, query_scale(cfg));
  const BasicMatrix<T> kp = project_all_heads(k, params, Role::key);
  const BasicMatrix<T> vp = project_all_heads(v, params, Role::value);

  KernelAttentionResult<T> result{BasicMatrix<T>(cfg.n, cfg.d_model), false};
  for (std::size_t h = 0; h < cfg.heads; ++h) {
    const std::size_t c0 = h * cfg.d_head;
    const auto fq = phi.apply(slice_cols(qp, c0, cfg.d_head));
    const auto fk = matmul(e1, phi.apply(slice_cols(kp, c0, cfg.d_head)));
    const auto vc = matmul(e2, slice_cols(vp, c0, cfg.d_head));
    result.denominator_clamped |= detail::kernel_head(fq, fk, vc, result.output, c0);
  }
  return result;
}

/// E1 = delta R^T and E2 = exp(-delta) R^T for one shared R (n x k, entries
/// N(0, 1/k)), stored k x n like every other projection.
inline LowRankProjections make_theorem_projections(std::size_t n, std::size_t k_dim, double delta,
                                                   std::uint64_t seed) {
  if (!(delta > 0.0)) throw ConfigError("theorem projections need delta > 0");
  if (n == 0 || k_dim == 0) throw ConfigError("theorem projections need n, k >= 1");
  RngStream rng(seed);
  const Matrix rt = transpose(gaussian(rng, n, k_dim, 1.0 / std::sqrt(static_cast<double>(k_dim))));
  return {delta * rt, std::exp(-delta) * rt, ProjectionMode::theorem, delta};
}

inline constexpr double kDefaultTheoremDelta = 0.1;

/// ceil(5 ln(d) / (eps2^2 - eps3^2)). The epsilons are taken as their
/// difference of squares since only that combination enters.
inline std::size_t theorem_k(std::size_t d, double eps_sq_gap) {
  if (d < 2 || !(eps_sq_gap > 0.0)) throw ConfigError("theorem_k needs d >= 2 and a positive gap");
  return static_cast<std::size_t>(std::ceil(5.0 * std::log(static_cast<double>(d)) / eps_sq_gap));
}

// ---------------------------------------------------------------------------
// Up-training transfer.

enum class ModelKind { lowrank, kernel, flurka };

inline const char* to_string(ModelKind kind) {
  switch (kind) {
    case ModelKind::lowrank: return "lowrank";
    case ModelKind::kernel: return "kernel";
    case ModelKind::flurka: return "flurka";
  }
  return "?";
}

struct ModelParams {
  ModelKind kind = ModelKind::lowrank;
  std::vector<HeadWeights> heads;
  std::optional<LowRankProjections> projections;  // lowrank, flurka
  std::optional<FeatureMapSpec> feature_map;      // kernel, flurka
};

/// Feature map drawn for a low-rank base, which has none of its own.
struct TransferOptions {
  FeatureKind kind = FeatureKind::prf;
  std::size_t m = 0;
  bool scale_inputs = true;
};

namespace detail {

inline void check_transfer_heads(const ModelParams& base, const AttentionConfig& cfg) {
  if (base.heads.size() != cfg.heads) {
    throw TransferError("base model has " + std::to_string(base.heads.size()) + " heads, target expects " +
                        std::to_string(cfg.heads));
  }
  for (std::size_t h = 0; h < base.heads.size(); ++h) {
    const auto& w = base.heads[h];
    const char* names[] = {"W^Q", "W^K", "W^V"};
    const Matrix* mats[] = {&w.wq, &w.wk, &w.wv};
    for (int i = 0; i < 3; ++i) {
      if (mats[i]->rows() != cfg.d_model || mats[i]->cols() != cfg.d_head) {
        throw TransferError(std::string("head ") + std::to_string(h) + " " + names[i] + " is " +
                            mats[i]->shape() + ", expected " + shape_string(cfg.d_model, cfg.d_head) +
                            " (d_head mismatch)");
      }
    }
  }
}

}  // namespace detail

/// Initializes a fused model from a trained low-rank or kernel base. Shared
/// pieces are copied verbatim; the missing piece is drawn from cfg.seed.
inline ModelParams uptrain_transfer(const ModelParams& base, const AttentionConfig& cfg,
                                    const TransferOptions& options = {}) {
  cfg.validate();
  detail::check_transfer_heads(base, cfg);
  ModelParams out;
  out.kind = ModelKind::flurka;
  out.heads = base.heads;
  switch (base.kind) {
    case ModelKind::lowrank: {
      if (!base.projections) throw TransferError("low-rank base carries no E1/E2");
      const char* names[] = {"E1", "E2"};
      const Matrix* mats[] = {&base.projections->e1, &base.projections->e2};
      for (int i = 0; i < 2; ++i) {
        if (mats[i]->rows() != cfg.d_k || mats[i]->cols() != cfg.n) {
          throw TransferError(std::string(names[i]) + " is " + mats[i]->shape() + ", expected " +
                              shape_string(cfg.d_k, cfg.n) + " (d_k mismatch)");
        }
      }
      out.projections = base.projections;
      out.feature_map = FeatureMapSpec{options.kind, options.m, cfg.seed, options.scale_inputs};
      break;
    }
    case ModelKind::kernel: {
      if (!base.feature_map) throw TransferError("kernel base carries no feature map");
      out.feature_map = base.feature_map;
      out.projections = sample_params(cfg).projections;
      break;
    }
    case ModelKind::flurka:
      throw TransferError("base model must be lowrank or kernel, got flurka");
  }
  return out;
}

}  // namespace flurka
