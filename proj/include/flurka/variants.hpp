#pragma once

#include <optional>
#include <span>
#include <string>
#include <string_view>

#include "flurka/attention.hpp"
#include "flurka/error.hpp"
#include "flurka/fusion.hpp"

namespace flurka {

enum class Variant { full, lowrank, kernel, flurka, flurka_naive };

inline const char* to_string(Variant v) {
  switch (v) {
    case Variant::full: return "full";
    case Variant::lowrank: return "lowrank";
    case Variant::kernel: return "kernel";
    case Variant::flurka: return "flurka";
    case Variant::flurka_naive: return "flurka-naive";
  }
  return "?";
}

inline Variant parse_variant(std::string_view s) {
  if (s == "full") return Variant::full;
  if (s == "lowrank" || s == "linformer") return Variant::lowrank;
  if (s == "kernel") return Variant::kernel;
  if (s == "flurka") return Variant::flurka;
  if (s == "flurka-naive") return Variant::flurka_naive;
  throw ConfigError("unknown variant '" + std::string(s) + "'");
}

inline FeatureKind parse_feature_kind(std::string_view s) {
  if (s == "prf") return FeatureKind::prf;
  if (s == "elu") return FeatureKind::elu;
  throw ConfigError("unknown kernel '" + std::string(s) + "'");
}

inline bool uses_projections(Variant v) {
  return v == Variant::lowrank || v == Variant::flurka || v == Variant::flurka_naive;
}

inline bool uses_feature_map(Variant v) {
  return v == Variant::kernel || v == Variant::flurka || v == Variant::flurka_naive;
}

/// One forward pass of the chosen variant. `proj` is ignored by variants
/// that do not contract, `spec` by those that do not kernelize.
template <std::floating_point T>
BasicMatrix<T> run_variant(Variant variant, const BasicMatrix<T>& q, const BasicMatrix<T>& k,
                           const BasicMatrix<T>& v, std::span<const HeadWeights> params,
                           const LowRankProjections& proj, const FeatureMapSpec& spec,
                           const AttentionConfig& cfg) {
  switch (variant) {
    case Variant::full: return full_attention(q, k, v, params, cfg);
    case Variant::lowrank: return linformer_attention(q, k, v, params, proj, cfg);
    case Variant::kernel: return kernel_attention(q, k, v, params, spec, cfg).output;
    case Variant::flurka: return flurka_attention(q, k, v, params, proj, spec, cfg).output;
    case Variant::flurka_naive: return flurka_naive_attention(q, k, v, params, proj, spec, cfg).output;
  }
  throw ConfigError("unknown variant");
}

}  // namespace flurka
