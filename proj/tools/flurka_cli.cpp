// flurka: batch front end for benchmarks, cost tables, rank/error
// experiments, gradient checks and the toy trainer. Every subcommand writes
// CSV to stdout (or --out) and reports problems on stderr.
//
// Exit codes: 0 success, 1 assertion failure, 2 usage/config error,
// 3 numeric overflow.

#include <cstdint>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "flurka/flurka.hpp"

namespace {

using namespace flurka;

constexpr int kExitOk = 0;
constexpr int kExitAssertion = 1;
constexpr int kExitUsage = 2;
constexpr int kExitOverflow = 3;

class Output {
 public:
  explicit Output(const std::string& path) {
    if (!path.empty()) {
      file_ = std::make_unique<std::ofstream>(path);
      if (!*file_) throw ConfigError("cannot open output file '" + path + "'");
    }
  }
  std::ostream& stream() { return file_ ? *file_ : std::cout; }

 private:
  std::unique_ptr<std::ofstream> file_;
};

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(item);
  return out;
}

ProjectionMode parse_projection_mode(const std::string& s) {
  if (s == "practical") return ProjectionMode::practical;
  if (s == "theorem") return ProjectionMode::theorem;
  if (s == "identity") return ProjectionMode::identity;
  throw ConfigError("unknown projection mode '" + s + "'");
}

struct DimensionFlags {
  std::string n, dm, dk, dh, heads;

  void add_to(CLI::App* app) {
    app->add_option("--n", n, "sequence length (value or start:end:step)")->required();
    app->add_option("--dm", dm, "hidden dimension d_m")->required();
    app->add_option("--dk", dk, "downsampling factor d_k")->required();
    app->add_option("--dh", dh, "head dimension d_h")->required();
    app->add_option("--heads", heads, "head count H")->required();
  }

  /// Cartesian product in (n, dm, dk, dh, heads) order, n varying slowest.
  std::vector<CostRow> expand() const {
    std::vector<CostRow> rows;
    for (auto vn : parse_sweep(n))
      for (auto vm : parse_sweep(dm))
        for (auto vk : parse_sweep(dk))
          for (auto vh : parse_sweep(dh))
            for (auto vH : parse_sweep(heads)) rows.push_back({vn, vm, vk, vh, vH});
    return rows;
  }
};

// --- bench -----------------------------------------------------------------

struct BenchArgs {
  DimensionFlags dims;
  std::string variants = "flurka";
  std::string kernel = "prf";
  std::size_t m = 0;
  std::size_t reps = 30;
  std::size_t warmup = 5;
  std::uint64_t seed = 0;
  std::string precision = "f64";
  std::string out;
};

int run_bench(const BenchArgs& a) {
  std::vector<Variant> variants;
  for (const auto& v : split_list(a.variants)) variants.push_back(parse_variant(v));
  const FeatureKind kind = parse_feature_kind(a.kernel);
  if (a.precision != "f64" && a.precision != "f32") throw ConfigError("precision must be f64 or f32");
  std::vector<BenchPoint> points;
  for (const auto& r : a.dims.expand()) {
    for (Variant v : variants) {
      BenchPoint p;
      p.variant = v;
      p.kernel = kind;
      p.cfg = {r.n, r.d_m, r.d_h, r.h, r.d_k, a.seed};
      p.cfg.validate();
      p.m = a.m;
      p.reps = a.reps;
      p.warmup = a.warmup;
      p.precision = a.precision == "f64" ? Precision::f64 : Precision::f32;
      points.push_back(p);
    }
  }
  Output out(a.out);
  out.stream() << kBenchCsvHeader << '\n';
  for (const auto& p : points) out.stream() << bench_csv_row(run_bench_point(p)) << std::endl;
  return kExitOk;
}

// --- costmodel -------------------------------------------------------------

struct CostArgs {
  DimensionFlags dims;
  bool crossover = false;
  std::uint64_t n_max = 1000000;
  std::string out;
};

int run_costmodel(const CostArgs& a) {
  const auto rows = a.dims.expand();
  std::vector<std::string> lines;
  for (const auto& r : rows) {
    std::string line = cost_csv_row(r);
    if (a.crossover) {
      const auto n_star = crossover_n(r.d_m, r.d_k, r.d_h, r.h, a.n_max);
      line += ',' + (n_star ? std::to_string(*n_star) : std::string());
    }
    lines.push_back(std::move(line));
  }
  Output out(a.out);
  out.stream() << kCostCsvHeader << (a.crossover ? ",crossover_n" : "") << '\n';
  for (const auto& l : lines) out.stream() << l << '\n';
  return kExitOk;
}

// --- rank ------------------------------------------------------------------

struct RankArgs {
  std::size_t n = 128;
  std::size_t dp = 64;
  std::size_t dh = 0;
  std::size_t layers = 12;
  std::size_t heads = 6;
  std::string kernel = "prf";
  std::uint64_t seed = 0;
  std::optional<double> tol;
  std::string out;
};

int run_rank(const RankArgs& a) {
  RankProfileConfig cfg;
  cfg.n = a.n;
  cfg.layers = a.layers;
  cfg.heads = a.heads;
  cfg.seed = a.seed;
  cfg.absolute_tol = a.tol;
  cfg.spec.kind = parse_feature_kind(a.kernel);
  if (cfg.spec.kind == FeatureKind::prf) {
    cfg.spec.m = a.dp;
    cfg.d_head = a.dh == 0 ? 64 : a.dh;
  } else {
    if (a.dh != 0 && a.dh != a.dp) throw ConfigError("ELU features have d_p == d_h; --dh must match --dp");
    cfg.d_head = a.dp;
  }
  cfg.d_model = cfg.d_head;
  const auto records = kernelized_rank_profile(cfg);
  Output out(a.out);
  out.stream() << kRankCsvHeader << '\n';
  for (const auto& r : records) out.stream() << rank_csv_row(r) << '\n';
  const std::size_t ceiling = std::min(a.n, a.dp);
  for (const auto& r : records) {
    if (r.rank > ceiling) {
      std::cerr << "assertion failed: layer " << r.layer << " head " << r.head << " has rank " << r.rank
                << " > min(n, d_p) = " << ceiling << '\n';
      return kExitAssertion;
    }
  }
  return kExitOk;
}

// --- errbound --------------------------------------------------------------

struct ErrArgs {
  std::size_t n = 64;
  std::size_t dk = 16;
  std::size_t dm = 16;
  std::size_t dh = 8;
  std::size_t heads = 2;
  std::size_t m = 0;
  std::string kernel = "prf";
  std::string proj = "practical";
  double delta = kDefaultTheoremDelta;
  std::size_t trials = 10;
  std::uint64_t seed = 0;
  double input_std = 0.5;
  std::string out;
};

int run_errbound(const ErrArgs& a) {
  ErrorExperimentConfig cfg;
  cfg.attention = {a.n, a.dm, a.dh, a.heads, a.dk, a.seed};
  cfg.spec = {parse_feature_kind(a.kernel), a.m, 0, true};
  cfg.proj_mode = parse_projection_mode(a.proj);
  cfg.delta = a.delta;
  cfg.trials = a.trials;
  cfg.seed = a.seed;
  cfg.input_std = a.input_std;
  const auto records = error_bound_experiment(cfg);
  Output out(a.out);
  out.stream() << kErrorCsvHeader << '\n';
  for (const auto& r : records) out.stream() << error_csv_row(r) << '\n';
  for (const auto& r : records) {
    if (!r.triangle_holds) {
      std::cerr << "assertion failed: trial " << r.trial << " err_fused " << r.err_fused << " > bound_sum "
                << r.bound_sum << '\n';
      return kExitAssertion;
    }
  }
  return kExitOk;
}

// --- gradcheck -------------------------------------------------------------

struct GradArgs {
  std::size_t n = 12;
  std::size_t dk = 4;
  std::size_t dh = 4;
  std::size_t heads = 2;
  std::string kernel = "both";
  std::string variants = "flurka";
  std::size_t seeds = 5;
  std::uint64_t seed = 0;
  double tol = 1e-5;
  std::string out;
};

int run_gradcheck(const GradArgs& a) {
  std::vector<Variant> variants;
  const std::string vlist = a.variants == "all" ? "full,lowrank,kernel,flurka" : a.variants;
  for (const auto& v : split_list(vlist)) variants.push_back(parse_variant(v));
  std::vector<FeatureKind> kinds;
  if (a.kernel == "both")
    kinds = {FeatureKind::prf, FeatureKind::elu};
  else
    kinds = {parse_feature_kind(a.kernel)};

  Output out(a.out);
  out.stream() << "seed,variant,kernel,entries,max_rel_err,worst_param\n";
  double worst = 0.0;
  std::string worst_label;
  for (std::size_t s = 0; s < a.seeds; ++s) {
    const std::uint64_t seed = a.seed + s;
    const AttentionConfig cfg{a.n, a.heads * a.dh, a.dh, a.heads, a.dk, seed};
    const SampledParams params = sample_params(cfg);
    RngStream rng(seed ^ 0xC0FFEEULL);
    const Matrix q = gaussian(rng, cfg.n, cfg.d_model, 1.0);
    const Matrix k = gaussian(rng, cfg.n, cfg.d_model, 1.0);
    const Matrix v = gaussian(rng, cfg.n, cfg.d_model, 1.0);
    const std::uint64_t feature_seed = rng.next_u64();
    for (Variant variant : variants) {
      for (FeatureKind kind : kinds) {
        if (!uses_feature_map(variant) && kind != kinds.front()) continue;
        const FeatureMapSpec spec{kind, 0, feature_seed, true};
        const auto report = gradient_check(variant, q, k, v, params.heads, params.projections, spec, cfg);
        out.stream() << seed << ',' << to_string(variant) << ','
                     << (uses_feature_map(variant) ? to_string(kind) : "none") << ',' << report.entries << ','
                     << report.max_rel_error << ',' << report.worst_param << '\n';
        if (report.max_rel_error >= worst) {
          worst = report.max_rel_error;
          worst_label = std::string(to_string(variant)) + "/" + to_string(kind) + " seed " +
                        std::to_string(seed) + " " + report.worst_param;
        }
      }
    }
  }
  std::cerr << "max relative error: " << worst << " (" << worst_label << ")\n";
  if (worst > a.tol) {
    std::cerr << "assertion failed: max relative error " << worst << " exceeds " << a.tol << '\n';
    return kExitAssertion;
  }
  return kExitOk;
}

// --- train -----------------------------------------------------------------

struct TrainArgs {
  TrainConfig cfg;
  std::string variant = "flurka";
  std::string kernel = "prf";
  std::string base = "lowrank";
  std::optional<double> alpha;
  std::string out;
};

int run_train(TrainArgs a) {
  a.cfg.variant = parse_variant(a.variant);
  a.cfg.kernel = parse_feature_kind(a.kernel);
  if (a.base == "lowrank")
    a.cfg.base = ModelKind::lowrank;
  else if (a.base == "kernel")
    a.cfg.base = ModelKind::kernel;
  else
    throw ConfigError("--base must be lowrank or kernel");
  a.cfg.alpha = a.alpha;
  a.cfg.d_head = a.cfg.d_model / a.cfg.heads;
  TrainResult result;
  try {
    result = toy_train(a.cfg);
  } catch (const NumericError& e) {
    std::cerr << "assertion failed: " << e.what() << '\n';
    return kExitAssertion;
  }
  Output out(a.out);
  out.stream() << kLossCsvHeader << '\n';
  out.stream().precision(17);
  for (std::size_t i = 0; i < result.losses.size(); ++i) out.stream() << i << ',' << result.losses[i] << '\n';
  if (result.transfer_step) std::cerr << "transferred to flurka at step " << *result.transfer_step << '\n';
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"FLuRKA attention: benchmarks, cost model and numerical experiments"};
  app.require_subcommand(1);

  BenchArgs bench;
  auto* cmd_bench = app.add_subcommand("bench", "time forward passes over a configuration sweep");
  bench.dims.add_to(cmd_bench);
  cmd_bench->add_option("--variant", bench.variants, "comma list of full,lowrank,kernel,flurka,flurka-naive");
  cmd_bench->add_option("--kernel", bench.kernel, "prf or elu");
  cmd_bench->add_option("--m", bench.m, "PRF feature count (0 = d_h)");
  cmd_bench->add_option("--reps", bench.reps, "timed repetitions")->check(CLI::PositiveNumber);
  cmd_bench->add_option("--warmup", bench.warmup, "untimed warmup runs");
  cmd_bench->add_option("--seed", bench.seed);
  cmd_bench->add_option("--precision", bench.precision, "f64 or f32");
  cmd_bench->add_option("--out", bench.out, "CSV path (default stdout)");

  CostArgs cost;
  auto* cmd_cost = app.add_subcommand("costmodel", "analytic FLOP counts and regime predicates");
  cost.dims.add_to(cmd_cost);
  cmd_cost->add_flag("--crossover", cost.crossover, "append the smallest n where flurka beats both");
  cmd_cost->add_option("--n-max", cost.n_max, "upper bound for the crossover scan");
  cmd_cost->add_option("--out", cost.out);

  RankArgs rank;
  auto* cmd_rank = app.add_subcommand("rank", "numerical rank of kernelized attention matrices");
  cmd_rank->add_option("--n", rank.n);
  cmd_rank->add_option("--dp", rank.dp, "feature dimension d_p");
  cmd_rank->add_option("--dh", rank.dh, "head dimension (PRF only; default 64)");
  cmd_rank->add_option("--layers", rank.layers);
  cmd_rank->add_option("--heads", rank.heads);
  cmd_rank->add_option("--kernel", rank.kernel);
  cmd_rank->add_option("--seed", rank.seed);
  cmd_rank->add_option("--tol", rank.tol, "absolute singular-value cutoff");
  cmd_rank->add_option("--out", rank.out);

  ErrArgs err;
  auto* cmd_err = app.add_subcommand("errbound", "decomposed approximation errors against full attention");
  cmd_err->add_option("--n", err.n);
  cmd_err->add_option("--dk", err.dk);
  cmd_err->add_option("--dm", err.dm);
  cmd_err->add_option("--dh", err.dh);
  cmd_err->add_option("--heads", err.heads);
  cmd_err->add_option("--m", err.m);
  cmd_err->add_option("--kernel", err.kernel);
  cmd_err->add_option("--proj", err.proj, "practical, theorem or identity");
  cmd_err->add_option("--delta", err.delta);
  cmd_err->add_option("--trials", err.trials);
  cmd_err->add_option("--seed", err.seed);
  cmd_err->add_option("--input-std", err.input_std);
  cmd_err->add_option("--out", err.out);

  GradArgs grad;
  auto* cmd_grad = app.add_subcommand("gradcheck", "backward pass against central differences");
  cmd_grad->add_option("--n", grad.n);
  cmd_grad->add_option("--dk", grad.dk);
  cmd_grad->add_option("--dh", grad.dh);
  cmd_grad->add_option("--heads", grad.heads);
  cmd_grad->add_option("--kernel", grad.kernel, "prf, elu or both");
  cmd_grad->add_option("--variant", grad.variants, "comma list or 'all'");
  cmd_grad->add_option("--seeds", grad.seeds);
  cmd_grad->add_option("--seed", grad.seed);
  cmd_grad->add_option("--tol", grad.tol);
  cmd_grad->add_option("--out", grad.out);

  TrainArgs train;
  auto* cmd_train = app.add_subcommand("train", "toy regression trainer");
  cmd_train->add_option("--variant", train.variant, "full, lowrank, kernel or flurka");
  cmd_train->add_option("--steps", train.cfg.steps);
  cmd_train->add_option("--lr", train.cfg.lr);
  cmd_train->add_option("--seed", train.cfg.task_seed);
  cmd_train->add_option("--n", train.cfg.n);
  cmd_train->add_option("--dm", train.cfg.d_model);
  cmd_train->add_option("--heads", train.cfg.heads);
  cmd_train->add_option("--dk", train.cfg.d_k);
  cmd_train->add_option("--m", train.cfg.m);
  cmd_train->add_option("--kernel", train.kernel);
  cmd_train->add_option("--alpha", train.alpha, "up-training fraction spent on the base model");
  cmd_train->add_option("--base", train.base, "lowrank or kernel");
  cmd_train->add_flag("--learn-projections", train.cfg.learn_projections);
  cmd_train->add_option("--out", train.out);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*cmd_bench) return run_bench(bench);
    if (*cmd_cost) return run_costmodel(cost);
    if (*cmd_rank) return run_rank(rank);
    if (*cmd_err) return run_errbound(err);
    if (*cmd_grad) return run_gradcheck(grad);
    if (*cmd_train) return run_train(train);
  } catch (const OverflowError& e) {
    std::cerr << "overflow: " << e.what() << '\n';
    return kExitOverflow;
  } catch (const ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const TransferError& e) {
    std::cerr << "transfer error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << '\n';
    return kExitAssertion;
  }
  return kExitUsage;
}
