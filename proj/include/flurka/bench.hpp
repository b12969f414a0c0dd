#pragma once

// Wall-clock harness: warmup runs, then timed repetitions summarized by
// median and the 10th/90th percentiles.

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cstdint>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "flurka/attention.hpp"
#include "flurka/error.hpp"
#include "flurka/variants.hpp"

namespace flurka {

/// Linear interpolation between closest ranks, q in [0, 1].
inline double percentile(std::vector<double> xs, double q) {
  if (xs.empty()) throw ConfigError("percentile of an empty sample");
  std::sort(xs.begin(), xs.end());
  const double pos = q * static_cast<double>(xs.size() - 1);
  const auto lo = static_cast<std::size_t>(pos);
  const std::size_t hi = std::min(lo + 1, xs.size() - 1);
  return xs[lo] + (pos - static_cast<double>(lo)) * (xs[hi] - xs[lo]);
}

struct TimingStats {
  double median_ms = 0.0;
  double p10_ms = 0.0;
  double p90_ms = 0.0;
  std::vector<double> samples_ms;
};

template <class Fn>
TimingStats time_runs(Fn&& fn, std::size_t reps, std::size_t warmup) {
  if (reps < 1) throw ConfigError("need at least one timed repetition");
  for (std::size_t i = 0; i < warmup; ++i) fn();
  TimingStats st;
  st.samples_ms.reserve(reps);
  for (std::size_t i = 0; i < reps; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    fn();
    const auto t1 = std::chrono::steady_clock::now();
    st.samples_ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
  }
  st.median_ms = percentile(st.samples_ms, 0.5);
  st.p10_ms = percentile(st.samples_ms, 0.1);
  st.p90_ms = percentile(st.samples_ms, 0.9);
  return st;
}

/// "256" or "start:end:step"; the end is included when the steps land on it.
inline std::vector<std::size_t> parse_sweep(std::string_view text) {
  auto parse_one = [&](std::string_view part) {
    std::size_t value = 0;
    const auto* end = part.data() + part.size();
    const auto [ptr, ec] = std::from_chars(part.data(), end, value);
    if (ec != std::errc{} || ptr != end || part.empty())
      throw ConfigError("cannot parse '" + std::string(text) + "' as a size or start:end:step sweep");
    return value;
  };
  std::vector<std::string_view> parts;
  std::size_t from = 0;
  while (true) {
    const std::size_t colon = text.find(':', from);
    parts.push_back(text.substr(from, colon == std::string_view::npos ? std::string_view::npos : colon - from));
    if (colon == std::string_view::npos) break;
    from = colon + 1;
  }
  if (parts.size() == 1) return {parse_one(parts[0])};
  if (parts.size() != 3) throw ConfigError("sweep must be start:end:step, got '" + std::string(text) + "'");
  const std::size_t start = parse_one(parts[0]);
  const std::size_t stop = parse_one(parts[1]);
  const std::size_t step = parse_one(parts[2]);
  if (step == 0 || start > stop) throw ConfigError("sweep needs step > 0 and start <= end: '" + std::string(text) + "'");
  std::vector<std::size_t> out;
  for (std::size_t v = start; v <= stop; v += step) out.push_back(v);
  return out;
}

enum class Precision { f64, f32 };

inline const char* to_string(Precision p) { return p == Precision::f64 ? "f64" : "f32"; }

struct BenchPoint {
  Variant variant = Variant::flurka;
  FeatureKind kernel = FeatureKind::prf;
  AttentionConfig cfg{};
  std::size_t m = 0;
  std::size_t reps = 30;
  std::size_t warmup = 5;
  Precision precision = Precision::f64;
};

struct BenchRow {
  BenchPoint point;
  TimingStats timing;
};

inline constexpr const char* kBenchCsvHeader =
    "variant,kernel,n,d_m,d_k,d_h,heads,m,precision,reps,warmup,median_ms,p10_ms,p90_ms";

inline std::string bench_csv_row(const BenchRow& r) {
  const auto& p = r.point;
  std::ostringstream os;
  os.precision(6);
  os << std::fixed << to_string(p.variant) << ',' << to_string(p.kernel) << ',' << p.cfg.n << ',' << p.cfg.d_model
     << ',' << p.cfg.d_k << ',' << p.cfg.d_head << ',' << p.cfg.heads << ','
     << (p.m == 0 ? p.cfg.d_head : p.m) << ',' << to_string(p.precision) << ',' << p.reps << ',' << p.warmup
     << ',' << r.timing.median_ms << ',' << r.timing.p10_ms << ',' << r.timing.p90_ms;
  return os.str();
}

namespace detail {

template <std::floating_point T>
TimingStats bench_in_precision(const BenchPoint& p) {
  const SampledParams params = sample_params(p.cfg);
  RngStream rng(p.cfg.seed ^ 0xA5A5A5A5A5A5A5A5ULL);
  const FeatureMapSpec spec{p.kernel, p.m, rng.next_u64(), true};
  const auto q = gaussian(rng, p.cfg.n, p.cfg.d_model, 1.0).template cast<T>();
  const auto k = gaussian(rng, p.cfg.n, p.cfg.d_model, 1.0).template cast<T>();
  const auto v = gaussian(rng, p.cfg.n, p.cfg.d_model, 1.0).template cast<T>();
  volatile T sink{};
  return time_runs(
      [&] {
        const auto out = run_variant(p.variant, q, k, v, std::span<const HeadWeights>(params.heads),
                                     params.projections, spec, p.cfg);
        sink = out(0, 0);
      },
      p.reps, p.warmup);
}

}  // namespace detail

/// Times one configuration. Parameter and input sampling happen before the
/// clock starts.
inline BenchRow run_bench_point(const BenchPoint& p) {
  p.cfg.validate();
  BenchRow row{p, {}};
  row.timing = p.precision == Precision::f64 ? detail::bench_in_precision<double>(p)
                                             : detail::bench_in_precision<float>(p);
  return row;
}

}  // namespace flurka
