#pragma once

// Desk-scale experiments on the fused construction:
//   * numerical rank of kernelized attention matrices phi(Q')phi(K')^T;
//   * decomposed approximation errors against full attention, with the
//     triangle inequality checked on every trial;
//   * Monte-Carlo unbiasedness of the positive random features.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "flurka/attention.hpp"
#include "flurka/fusion.hpp"
#include "flurka/parallel.hpp"
#include "flurka/tensor.hpp"

namespace flurka {

inline double median(std::vector<double> xs) {
  if (xs.empty()) throw ConfigError("median of an empty sample");
  std::sort(xs.begin(), xs.end());
  const std::size_t mid = xs.size() / 2;
  return xs.size() % 2 == 1 ? xs[mid] : 0.5 * (xs[mid - 1] + xs[mid]);
}

// ---------------------------------------------------------------------------
// Rank profile.

struct RankProfileConfig {
  std::size_t n = 128;
  std::size_t d_model = 64;
  std::size_t d_head = 64;
  std::size_t layers = 12;
  std::size_t heads = 6;
  FeatureMapSpec spec{};
  std::uint64_t seed = 0;
  double input_std = 1.0;
  std::optional<double> absolute_tol;  // overrides sigma_max * n * 2^-52
};

struct RankRecord {
  std::size_t layer = 0;
  std::size_t head = 0;
  std::size_t n = 0;
  std::size_t d_p = 0;
  std::size_t rank = 0;
  double tol = 0.0;
};

inline constexpr const char* kRankCsvHeader = "layer,head,n,d_p,rank,tol";

inline std::string rank_csv_row(const RankRecord& r) {
  std::ostringstream os;
  os.precision(17);
  os << r.layer << ',' << r.head << ',' << r.n << ',' << r.d_p << ',' << r.rank << ',' << r.tol;
  return os.str();
}

/// Materializes phi(Q')phi(K')^T for every simulated (layer, head), each
/// with its own inputs, weights and feature draws, and counts singular
/// values above the tolerance.
inline std::vector<RankRecord> kernelized_rank_profile(const RankProfileConfig& cfg) {
  if (cfg.n > kMaxSvdDim) throw ConfigError("rank profile supports n <= 512");
  if (cfg.n == 0 || cfg.d_model == 0 || cfg.d_head == 0 || cfg.layers == 0 || cfg.heads == 0)
    throw ConfigError("rank profile dimensions must be >= 1");
  const std::size_t total = cfg.layers * cfg.heads;
  std::vector<std::uint64_t> seeds(total);
  RngStream root(cfg.seed);
  for (auto& s : seeds) s = root.next_u64();

  std::vector<RankRecord> records(total);
  parallel_for(total, [&](std::size_t idx) {
    RngStream rng(seeds[idx]);
    const double wstd = 1.0 / std::sqrt(static_cast<double>(cfg.d_model));
    const Matrix q = gaussian(rng, cfg.n, cfg.d_model, cfg.input_std);
    const Matrix k = gaussian(rng, cfg.n, cfg.d_model, cfg.input_std);
    const Matrix wq = gaussian(rng, cfg.d_model, cfg.d_head, wstd);
    const Matrix wk = gaussian(rng, cfg.d_model, cfg.d_head, wstd);
    FeatureMapSpec spec = cfg.spec;
    spec.seed = rng.next_u64();
    const FeatureMap phi(spec, cfg.d_head);

    Matrix qp = matmul(q, wq);
    if (spec.scale_inputs) scale_in_place(qp, 1.0 / std::sqrt(static_cast<double>(cfg.d_head)));
    const Matrix m = matmul_nt(phi.apply(qp), phi.apply(matmul(k, wk)));
    const auto sv = singular_values(m);
    const double tol = cfg.absolute_tol.value_or(default_rank_tolerance(sv.front(), cfg.n));
    records[idx] = {idx / cfg.heads, idx % cfg.heads, cfg.n, phi.output_dim(), numerical_rank(sv, tol), tol};
  });
  return records;
}

// ---------------------------------------------------------------------------
// Error-bound laboratory.

struct ErrorExperimentConfig {
  AttentionConfig attention{};  // attention.seed is unused; trials derive their own
  FeatureMapSpec spec{};
  ProjectionMode proj_mode = ProjectionMode::practical;
  double delta = kDefaultTheoremDelta;
  std::size_t trials = 10;
  std::uint64_t seed = 0;
  double input_std = 0.5;
};

struct ErrorRecord {
  std::size_t trial = 0;
  std::size_t n = 0;
  std::size_t d_k = 0;
  std::size_t m = 0;
  FeatureKind kernel = FeatureKind::prf;
  ProjectionMode proj_mode = ProjectionMode::practical;
  double err_kernel = 0.0;       // max_h |A_hat - A|_inf on the uncontracted keys
  double err_lowrank = 0.0;      // |linformer - full|_inf
  double err_fused = 0.0;        // |flurka - full|_inf
  double err_kernel_term = 0.0;  // |flurka - linformer|_inf
  double bound_sum = 0.0;        // err_kernel_term + err_lowrank
  bool triangle_holds = true;
};

inline constexpr double kTriangleSlack = 1e-9;

inline constexpr const char* kErrorCsvHeader =
    "trial,n,d_k,m,kernel,proj_mode,err_kernel_inf,err_lowrank_inf,err_fused_inf,bound_sum";

inline std::string error_csv_row(const ErrorRecord& r) {
  std::ostringstream os;
  os.precision(17);
  os << r.trial << ',' << r.n << ',' << r.d_k << ',' << r.m << ',' << to_string(r.kernel) << ','
     << to_string(r.proj_mode) << ',' << r.err_kernel << ',' << r.err_lowrank << ',' << r.err_fused << ','
     << r.bound_sum;
  return os.str();
}

/// max over heads of |A_hat - A|_inf, where A_hat is the normalized
/// kernelized attention and A the softmax attention on the same projections.
inline double kernel_matrix_error(const Matrix& q, const Matrix& k, std::span<const HeadWeights> params,
                                  const FeatureMap& phi, const AttentionConfig& cfg) {
  Matrix qp = project_all_heads(q, params, Role::query);
  const Matrix kp = project_all_heads(k, params, Role::key);
  Matrix qs = qp;
  scale_in_place(qs, query_scale(cfg));
  if (phi.spec().scale_inputs) qp = qs;
  double worst = 0.0;
  for (std::size_t h = 0; h < cfg.heads; ++h) {
    const std::size_t c0 = h * cfg.d_head;
    const Matrix kh = slice_cols(kp, c0, cfg.d_head);
    const Matrix a_hat = normalized_kernel_matrix(phi.apply(slice_cols(qp, c0, cfg.d_head)), phi.apply(kh));
    const Matrix a = softmax_matrix(slice_cols(qs, c0, cfg.d_head), kh);
    worst = std::max(worst, norm_inf(a_hat - a));
  }
  return worst;
}

inline std::vector<ErrorRecord> error_bound_experiment(const ErrorExperimentConfig& cfg) {
  const AttentionConfig& base = cfg.attention;
  base.validate();
  if (base.n > 256) throw ConfigError("error experiment supports n <= 256");
  if (cfg.proj_mode == ProjectionMode::identity && base.d_k != base.n)
    throw ConfigError("identity projections need d_k == n");

  std::vector<std::uint64_t> seeds(cfg.trials);
  RngStream root(cfg.seed);
  for (auto& s : seeds) s = root.next_u64();

  std::vector<ErrorRecord> records(cfg.trials);
  parallel_for(cfg.trials, [&](std::size_t t) {
    RngStream rng(seeds[t]);
    AttentionConfig acfg = base;
    acfg.seed = rng.next_u64();
    SampledParams params = sample_params(acfg);
    LowRankProjections proj = [&] {
      switch (cfg.proj_mode) {
        case ProjectionMode::theorem: return make_theorem_projections(acfg.n, acfg.d_k, cfg.delta, rng.next_u64());
        case ProjectionMode::identity: return identity_projections(acfg.n);
        case ProjectionMode::practical: break;
      }
      return std::move(params.projections);
    }();
    FeatureMapSpec spec = cfg.spec;
    spec.seed = rng.next_u64();
    const FeatureMap phi(spec, acfg.d_head);
    const Matrix q = gaussian(rng, acfg.n, acfg.d_model, cfg.input_std);
    const Matrix k = gaussian(rng, acfg.n, acfg.d_model, cfg.input_std);
    const Matrix v = gaussian(rng, acfg.n, acfg.d_model, cfg.input_std);

    const Matrix full = full_attention(q, k, v, params.heads, acfg);
    const Matrix lin = linformer_attention(q, k, v, params.heads, proj, acfg);
    const Matrix fused = flurka_attention(q, k, v, params.heads, proj, spec, acfg).output;

    ErrorRecord r;
    r.trial = t;
    r.n = acfg.n;
    r.d_k = acfg.d_k;
    r.m = phi.output_dim();
    r.kernel = spec.kind;
    r.proj_mode = proj.mode;
    r.err_kernel = kernel_matrix_error(q, k, params.heads, phi, acfg);
    r.err_lowrank = norm_inf(lin - full);
    r.err_fused = norm_inf(fused - full);
    r.err_kernel_term = norm_inf(fused - lin);
    r.bound_sum = r.err_kernel_term + r.err_lowrank;
    r.triangle_holds = r.err_fused <= r.bound_sum + kTriangleSlack;
    records[t] = r;
  });
  return records;
}

struct KernelErrorSweep {
  std::vector<std::size_t> feature_counts;
  std::vector<double> median_error;
};

/// Median over seeds of |A_hat - A|_inf for each PRF feature count, on a
/// single head of width d_head. Each seed reuses one (Q', K') pair across
/// all feature counts so the comparison is paired.
inline KernelErrorSweep kernel_error_sweep(std::size_t n, std::size_t d_head, std::vector<std::size_t> ms,
                                           std::size_t seeds, std::uint64_t seed, double input_std = 0.5) {
  KernelErrorSweep out{std::move(ms), {}};
  std::vector<std::vector<double>> errors(out.feature_counts.size(), std::vector<double>(seeds));
  RngStream root(seed);
  std::vector<std::uint64_t> trial_seeds(seeds);
  for (auto& s : trial_seeds) s = root.next_u64();
  parallel_for(seeds, [&](std::size_t s) {
    RngStream rng(trial_seeds[s]);
    Matrix qp = gaussian(rng, n, d_head, input_std);
    const Matrix kp = gaussian(rng, n, d_head, input_std);
    scale_in_place(qp, 1.0 / std::sqrt(static_cast<double>(d_head)));
    const Matrix a = softmax_matrix(qp, kp);
    const std::uint64_t feature_seed = rng.next_u64();
    for (std::size_t i = 0; i < out.feature_counts.size(); ++i) {
      const FeatureMap phi({FeatureKind::prf, out.feature_counts[i], feature_seed, true}, d_head);
      errors[i][s] = norm_inf(normalized_kernel_matrix(phi.apply(qp), phi.apply(kp)) - a);
    }
  });
  for (auto& e : errors) out.median_error.push_back(median(std::move(e)));
  return out;
}

// ---------------------------------------------------------------------------
// Unbiasedness of positive random features.

struct ProbePair {
  std::vector<double> x;
  std::vector<double> y;
};

struct PairStatistic {
  double target = 0.0;  // exp(x^T y)
  double mean = 0.0;
  double std_error = 0.0;
  double z = 0.0;
};

struct UnbiasednessReport {
  bool applicable = true;
  std::vector<PairStatistic> pairs;
  double max_abs_z = 0.0;
};

/// For each pair, the mean over `seeds` independent draws of the estimator
/// (1/m) sum_i psi_i(x) psi_i(y), its standard error and the z-score
/// against exp(x^T y). ELU is not a random-feature estimator and yields a
/// report with applicable == false.
inline UnbiasednessReport unbiasedness_test(std::span<const ProbePair> pairs, FeatureKind kind, std::size_t m,
                                            std::size_t seeds, std::uint64_t seed) {
  UnbiasednessReport report;
  if (kind != FeatureKind::prf) {
    report.applicable = false;
    return report;
  }
  if (seeds < 2) throw ConfigError("unbiasedness test needs at least 2 seeds");
  std::vector<std::uint64_t> feature_seeds(seeds);
  RngStream root(seed);
  for (auto& s : feature_seeds) s = root.next_u64();

  for (const auto& p : pairs) {
    if (p.x.size() != p.y.size() || p.x.empty()) throw ConfigError("probe vectors must share a length >= 1");
    const std::size_t d = p.x.size();
    Matrix xy(2, d);
    std::copy(p.x.begin(), p.x.end(), xy.row(0).begin());
    std::copy(p.y.begin(), p.y.end(), xy.row(1).begin());
    double dot = 0.0;
    for (std::size_t i = 0; i < d; ++i) dot += p.x[i] * p.y[i];

    std::vector<double> estimates(seeds);
    for (std::size_t s = 0; s < seeds; ++s) {
      const FeatureMap phi({FeatureKind::prf, m, feature_seeds[s], false}, d);
      const Matrix psi = phi.psi(xy);
      double acc = 0.0;
      for (std::size_t j = 0; j < psi.cols(); ++j) acc += psi(0, j) * psi(1, j);
      estimates[s] = acc / static_cast<double>(psi.cols());
    }
    double mean = 0.0;
    for (double e : estimates) mean += e;
    mean /= static_cast<double>(seeds);
    double var = 0.0;
    for (double e : estimates) var += (e - mean) * (e - mean);
    var /= static_cast<double>(seeds - 1);

    PairStatistic st;
    st.target = std::exp(dot);
    st.mean = mean;
    st.std_error = std::sqrt(var / static_cast<double>(seeds));
    if (st.std_error > 0.0)
      st.z = (mean - st.target) / st.std_error;
    else
      st.z = mean == st.target ? 0.0 : std::numeric_limits<double>::infinity();
    report.max_abs_z = std::max(report.max_abs_z, std::abs(st.z));
    report.pairs.push_back(st);
  }
  return report;
}

/// `count` random pairs in R^d with norms drawn uniformly from [0, max_norm].
inline std::vector<ProbePair> random_probe_pairs(std::size_t count, std::size_t d, double max_norm,
                                                 std::uint64_t seed) {
  RngStream rng(seed);
  std::vector<ProbePair> out;
  auto draw = [&] {
    Matrix g = gaussian(rng, 1, d, 1.0);
    double norm = 0.0;
    for (double x : g.values()) norm += x * x;
    norm = std::sqrt(norm);
    const double target = max_norm * rng.uniform();
    std::vector<double> v(g.values().begin(), g.values().end());
    for (double& x : v) x *= target / norm;
    return v;
  };
  for (std::size_t i = 0; i < count; ++i) {
    auto x = draw();
    auto y = draw();
    out.push_back({std::move(x), std::move(y)});
  }
  return out;
}

}  // namespace flurka
