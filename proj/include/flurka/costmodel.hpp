#pragma once

// Analytic FLOP counts for low-rank, kernel and fused attention, counted the
// way the original derivation counts them: one unit per product term as
// written, softmax as N*H*d_k, no 2x multiply-add convention.

#include <cstdint>
#include <initializer_list>
#include <optional>
#include <sstream>
#include <string>

#include "flurka/error.hpp"

namespace flurka {

using flop_t = std::uint64_t;

struct CostBreakdown {
  flop_t downsampling = 0;
  flop_t linear_transform = 0;
  flop_t qk_product = 0;
  flop_t kernel_map = 0;
  flop_t softmax = 0;
  flop_t av_product = 0;
  flop_t total = 0;

  friend bool operator==(const CostBreakdown&, const CostBreakdown&) = default;
};

namespace detail {

inline flop_t checked_mul(flop_t a, flop_t b) {
  flop_t out;
  if (__builtin_mul_overflow(a, b, &out)) throw OverflowError("FLOP count exceeds 64-bit range");
  return out;
}

inline flop_t checked_add(flop_t a, flop_t b) {
  flop_t out;
  if (__builtin_add_overflow(a, b, &out)) throw OverflowError("FLOP count exceeds 64-bit range");
  return out;
}

template <class... Rest>
flop_t mul(flop_t a, Rest... rest) {
  if constexpr (sizeof...(rest) == 0) {
    return a;
  } else {
    return checked_mul(a, mul(rest...));
  }
}

inline void require_positive(std::initializer_list<flop_t> dims) {
  for (flop_t d : dims)
    if (d == 0) throw ConfigError("cost model dimensions must be positive");
}

inline CostBreakdown finish(CostBreakdown c) {
  flop_t t = 0;
  for (flop_t part : {c.downsampling, c.linear_transform, c.qk_product, c.kernel_map, c.softmax, c.av_product})
    t = checked_add(t, part);
  c.total = t;
  return c;
}

}  // namespace detail

/// 2 N d_k d_m + N d_m^2 + 2 d_k d_m^2 + N d_m d_k + N H d_k + N d_k d_m
inline CostBreakdown flops_lowrank(flop_t n, flop_t d_m, flop_t d_k, flop_t h) {
  using namespace detail;
  require_positive({n, d_m, d_k, h});
  CostBreakdown c;
  c.downsampling = mul(2, n, d_k, d_m);
  c.linear_transform = checked_add(mul(n, d_m, d_m), mul(2, d_k, d_m, d_m));
  c.qk_product = mul(n, d_m, d_k);
  c.softmax = mul(n, h, d_k);
  c.av_product = mul(n, d_k, d_m);
  return finish(c);
}

/// 3 N d_m^2 + 2 N d_m + 2 N d_m d_h
inline CostBreakdown flops_kernel(flop_t n, flop_t d_m, flop_t d_h) {
  using namespace detail;
  require_positive({n, d_m, d_h});
  CostBreakdown c;
  c.linear_transform = mul(3, n, d_m, d_m);
  c.kernel_map = mul(2, n, d_m);
  c.av_product = mul(2, n, d_m, d_h);
  return finish(c);
}

/// 2 N d_k d_m + N d_m^2 + 2 d_k d_m^2 + N d_m + d_m d_k + d_k d_m d_h + N d_h d_m
inline CostBreakdown flops_flurka(flop_t n, flop_t d_m, flop_t d_k, flop_t d_h) {
  using namespace detail;
  require_positive({n, d_m, d_k, d_h});
  CostBreakdown c;
  c.downsampling = mul(2, n, d_k, d_m);
  c.linear_transform = checked_add(mul(n, d_m, d_m), mul(2, d_k, d_m, d_m));
  c.kernel_map = checked_add(mul(n, d_m), mul(d_m, d_k));
  c.av_product = checked_add(mul(d_k, d_m, d_h), mul(n, d_h, d_m));
  return finish(c);
}

/// Full softmax attention baseline (our own accounting, same conventions):
/// 3 N d_m^2 + N^2 d_m (QK^T) + N^2 d_m (AV) + N^2 H (softmax).
inline CostBreakdown flops_full(flop_t n, flop_t d_m, flop_t h) {
  using namespace detail;
  require_positive({n, d_m, h});
  CostBreakdown c;
  c.linear_transform = mul(3, n, d_m, d_m);
  c.qk_product = mul(n, n, d_m);
  c.softmax = mul(n, n, h);
  c.av_product = mul(n, n, d_m);
  return finish(c);
}

// Regime predicates. Products are formed in 128 bits so that a predicate is
// never wrong because of wraparound.

using wide_t = unsigned __int128;

/// N > d_k (H + 2) > d_m > d_k > d_h
inline bool claim1_regime(flop_t n, flop_t d_m, flop_t d_k, flop_t d_h, flop_t h) {
  const wide_t bound = static_cast<wide_t>(d_k) * (static_cast<wide_t>(h) + 2);
  return n > bound && bound > d_m && d_m > d_k && d_k > d_h;
}

/// N - 1 > d_k > d_h
inline bool claim2_regime(flop_t n, flop_t d_k, flop_t d_h) {
  return static_cast<wide_t>(n) > static_cast<wide_t>(d_k) + 1 && d_k > d_h;
}

/// N > d_k (H + 2) and d_m > d_k
inline bool claim3_regime(flop_t n, flop_t d_m, flop_t d_k, flop_t h) {
  const wide_t bound = static_cast<wide_t>(d_k) * (static_cast<wide_t>(h) + 2);
  return n > bound && d_m > d_k;
}

/// Exact form of fused < kernel. Dividing the difference of the two totals
/// by d_m leaves 2N(d_m - d_k) + N(1 + d_h) - d_k(2 d_m + 1 + d_h) > 0.
/// claim3_regime is not sufficient for this when d_m is close to d_k and
/// H > 2: the (H + 2) bound undercounts by roughly a factor of two.
inline bool kernel_regime_exact(flop_t n, flop_t d_m, flop_t d_k, flop_t d_h) {
  using swide_t = __int128;
  const swide_t N = n, M = d_m, K = d_k, D = d_h;
  return 2 * N * (M - K) + N * (1 + D) > K * (2 * M + 1 + D);
}

inline bool flurka_beats_both(flop_t n, flop_t d_m, flop_t d_k, flop_t d_h, flop_t h) {
  const flop_t fused = flops_flurka(n, d_m, d_k, d_h).total;
  return fused < flops_lowrank(n, d_m, d_k, h).total && fused < flops_kernel(n, d_m, d_h).total;
}

/// Smallest n in [1, n_max] at which the fused count is strictly below both
/// constituents. The claims are sufficient conditions, so this is usually
/// well below the claim-1 threshold.
inline std::optional<flop_t> crossover_n(flop_t d_m, flop_t d_k, flop_t d_h, flop_t h, flop_t n_max) {
  if (n_max < 1) throw ConfigError("crossover_n needs n_max >= 1");
  for (flop_t n = 1; n <= n_max; ++n)
    if (flurka_beats_both(n, d_m, d_k, d_h, h)) return n;
  return std::nullopt;
}

struct CostRow {
  flop_t n, d_m, d_k, d_h, h;
};

inline constexpr const char* kCostCsvHeader =
    "N,d_m,d_k,d_h,H,flops_full,flops_lowrank,flops_kernel,flops_flurka,claim1,claim2,claim3";

inline std::string cost_csv_row(const CostRow& r) {
  std::ostringstream os;
  os << r.n << ',' << r.d_m << ',' << r.d_k << ',' << r.d_h << ',' << r.h << ','
     << flops_full(r.n, r.d_m, r.h).total << ',' << flops_lowrank(r.n, r.d_m, r.d_k, r.h).total << ','
     << flops_kernel(r.n, r.d_m, r.d_h).total << ',' << flops_flurka(r.n, r.d_m, r.d_k, r.d_h).total << ','
     << claim1_regime(r.n, r.d_m, r.d_k, r.d_h, r.h) << ',' << claim2_regime(r.n, r.d_k, r.d_h) << ','
     << claim3_regime(r.n, r.d_m, r.d_k, r.h);
  return os.str();
}

}  // namespace flurka
