#pragma once

// Reverse-mode derivatives for the attention variants, a central-difference
// checker, and a toy regression trainer that drives backward end to end.
//
// The backward pass mirrors the forward pass exactly: optional low-rank
// contraction (E1 K, E2 V), one wide projection per role, a scaled query
// projection, then per head either softmax attention or normalized kernel
// attention.

#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "flurka/attention.hpp"
#include "flurka/error.hpp"
#include "flurka/fusion.hpp"
#include "flurka/tensor.hpp"
#include "flurka/variants.hpp"

namespace flurka {

struct AttentionGradients {
  Matrix dq;
  Matrix dk;
  Matrix dv;
  std::vector<HeadWeights> dweights;
  std::optional<Matrix> de1;  // only when projection gradients are requested
  std::optional<Matrix> de2;
};

namespace detail {

struct HeadGrad {
  Matrix dqp;
  Matrix dkp;
  Matrix dvp;
};

/// Softmax head: out = softmax(qp kp^T) vp.
inline HeadGrad softmax_head_backward(const Matrix& qp, const Matrix& kp, const Matrix& vp, const Matrix& g) {
  const Matrix a = row_softmax(matmul_nt(qp, kp));
  const Matrix da = matmul_nt(g, vp);
  Matrix ds = a;
  for (std::size_t i = 0; i < a.rows(); ++i) {
    double inner = 0.0;
    for (std::size_t j = 0; j < a.cols(); ++j) inner += da(i, j) * a(i, j);
    for (std::size_t j = 0; j < a.cols(); ++j) ds(i, j) = a(i, j) * (da(i, j) - inner);
  }
  return {matmul(ds, kp), matmul_tn(ds, qp), matmul_tn(a, g)};
}

/// dL/dx given dL/dphi(x).
inline Matrix feature_map_backward(const FeatureMap& phi, const Matrix& x, const Matrix& fx, const Matrix& dfx) {
  if (phi.kind() == FeatureKind::elu) {
    Matrix dx = dfx;
    for (std::size_t i = 0; i < x.size(); ++i)
      if (x.values()[i] < 0.0) dx.values()[i] *= fx.values()[i];
    return dx;
  }
  // phi_p(x) = c exp(w_p.x - |x|^2/2)  =>  d phi_p / dx = phi_p (w_p - x)
  const Matrix weighted = hadamard(dfx, fx);
  Matrix dx = matmul_nt(weighted, phi.omega());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    double s = 0.0;
    for (double e : weighted.row(i)) s += e;
    for (std::size_t j = 0; j < x.cols(); ++j) dx(i, j) -= s * x(i, j);
  }
  return dx;
}

/// Kernel head: out = (fq (fk^T vp)) / max(fq (fk^T 1), floor), fq = phi(qp), fk = phi(kp).
inline HeadGrad kernel_head_backward(const FeatureMap& phi, const Matrix& qp, const Matrix& kp, const Matrix& vp,
                                     const Matrix& g) {
  const Matrix fq = phi.apply(qp);
  const Matrix fk = phi.apply(kp);
  const Matrix kv = matmul_tn(fk, vp);
  const Matrix ksum = matmul_tn(fk, Matrix(fk.rows(), 1, 1.0));
  const Matrix num = matmul(fq, kv);
  const Matrix den = matmul(fq, ksum);

  Matrix dnum = g;
  Matrix dden(g.rows(), 1);
  for (std::size_t i = 0; i < g.rows(); ++i) {
    const double d = den(i, 0);
    const bool clamped = !(d >= kDenominatorFloor);
    const double dc = clamped ? kDenominatorFloor : d;
    double acc = 0.0;
    for (std::size_t j = 0; j < g.cols(); ++j) {
      dnum(i, j) = g(i, j) / dc;
      acc += g(i, j) * num(i, j);
    }
    dden(i, 0) = clamped ? 0.0 : -acc / (dc * dc);
  }

  const Matrix dfq = matmul_nt(dnum, kv) + matmul_nt(dden, ksum);
  const Matrix dkv = matmul_tn(fq, dnum);
  const Matrix dksum = matmul_tn(fq, dden);  // d_p x 1
  Matrix dfk = matmul_nt(vp, dkv);
  for (std::size_t s = 0; s < dfk.rows(); ++s)
    for (std::size_t p = 0; p < dfk.cols(); ++p) dfk(s, p) += dksum(p, 0);
  const Matrix dvp = matmul(fk, dkv);

  return {feature_map_backward(phi, qp, fq, dfq), feature_map_backward(phi, kp, fk, dfk), dvp};
}

inline std::vector<HeadWeights> split_heads(const Matrix& dwq, const Matrix& dwk, const Matrix& dwv,
                                            std::size_t heads, std::size_t d_head) {
  std::vector<HeadWeights> out;
  out.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    const std::size_t c0 = h * d_head;
    out.push_back({slice_cols(dwq, c0, d_head), slice_cols(dwk, c0, d_head), slice_cols(dwv, c0, d_head)});
  }
  return out;
}

inline Matrix wide_weights(std::span<const HeadWeights> params, Role role) {
  std::vector<Matrix> blocks;
  for (const auto& w : params) blocks.push_back(pick(w, role));
  return hcat<double>(blocks);
}

}  // namespace detail

/// Gradients of <upstream, variant(q, k, v)> with respect to the inputs and
/// every head weight. E1/E2 are treated as constants unless
/// `projection_grads` is set. The naive fused form has no backward.
inline AttentionGradients attention_backward(Variant variant, const Matrix& q, const Matrix& k, const Matrix& v,
                                             std::span<const HeadWeights> params, const LowRankProjections& proj,
                                             const FeatureMapSpec& spec, const AttentionConfig& cfg,
                                             const Matrix& upstream, bool projection_grads = false) {
  if (variant == Variant::flurka_naive) throw ConfigError("no backward for the naive fused form");
  check_attention_inputs(q, k, v, params, cfg);
  if (upstream.rows() != cfg.n || upstream.cols() != cfg.d_model)
    throw ConfigError("upstream gradient is " + upstream.shape() + ", expected " +
                      shape_string(cfg.n, cfg.d_model));
  const bool contracted = uses_projections(variant);
  const bool kernelized = uses_feature_map(variant);
  if (contracted) check_projections(proj, cfg);

  const Matrix kc = contracted ? matmul(proj.e1, k) : k;
  const Matrix vc = contracted ? matmul(proj.e2, v) : v;
  const double qscale = (!kernelized || spec.scale_inputs) ? query_scale(cfg) : 1.0;

  const Matrix wq = detail::wide_weights(params, Role::query);
  const Matrix wk = detail::wide_weights(params, Role::key);
  const Matrix wv = detail::wide_weights(params, Role::value);
  const Matrix qp = qscale * matmul(q, wq);
  const Matrix kp = matmul(kc, wk);
  const Matrix vp = matmul(vc, wv);

  Matrix dqp(qp.rows(), qp.cols());
  Matrix dkp(kp.rows(), kp.cols());
  Matrix dvp(vp.rows(), vp.cols());
  std::optional<FeatureMap> phi;
  if (kernelized) phi.emplace(spec, cfg.d_head);
  for (std::size_t h = 0; h < cfg.heads; ++h) {
    const std::size_t c0 = h * cfg.d_head;
    const Matrix qh = slice_cols(qp, c0, cfg.d_head);
    const Matrix kh = slice_cols(kp, c0, cfg.d_head);
    const Matrix vh = slice_cols(vp, c0, cfg.d_head);
    const Matrix gh = slice_cols(upstream, c0, cfg.d_head);
    const detail::HeadGrad hg = kernelized ? detail::kernel_head_backward(*phi, qh, kh, vh, gh)
                                           : detail::softmax_head_backward(qh, kh, vh, gh);
    set_cols(dqp, c0, hg.dqp);
    set_cols(dkp, c0, hg.dkp);
    set_cols(dvp, c0, hg.dvp);
  }

  // qp = s q wq, kp = kc wk, vp = vc wv
  const Matrix dwq = qscale * matmul_tn(q, dqp);
  const Matrix dwk = matmul_tn(kc, dkp);
  const Matrix dwv = matmul_tn(vc, dvp);
  const Matrix dkc = matmul_nt(dkp, wk);
  const Matrix dvc = matmul_nt(dvp, wv);

  AttentionGradients out{qscale * matmul_nt(dqp, wq),
                         contracted ? matmul_tn(proj.e1, dkc) : dkc,
                         contracted ? matmul_tn(proj.e2, dvc) : dvc,
                         detail::split_heads(dwq, dwk, dwv, cfg.heads, cfg.d_head),
                         std::nullopt,
                         std::nullopt};
  if (contracted && projection_grads) {
    out.de1 = matmul_nt(dkc, k);
    out.de2 = matmul_nt(dvc, v);
  }
  return out;
}

/// Backward of the optimized fused forward pass.
inline AttentionGradients flurka_backward(const Matrix& q, const Matrix& k, const Matrix& v,
                                          std::span<const HeadWeights> params, const LowRankProjections& proj,
                                          const FeatureMapSpec& spec, const AttentionConfig& cfg,
                                          const Matrix& upstream, bool projection_grads = false) {
  return attention_backward(Variant::flurka, q, k, v, params, proj, spec, cfg, upstream, projection_grads);
}

// ---------------------------------------------------------------------------
// Finite-difference verification.

inline constexpr double kFiniteDifferenceStep = 1e-5;
inline constexpr double kRelativeErrorFloor = 1e-8;

inline double relative_error(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), kRelativeErrorFloor});
}

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t entries = 0;
};

struct GradCheckOptions {
  double step = kFiniteDifferenceStep;
  bool check_projections = false;
  /// Probe f = sum(output) when empty, f = <probe, output> otherwise.
  std::optional<Matrix> probe;
};

/// Compares attention_backward against central differences of the real
/// forward pass, entry by entry, over q, k, v and every head weight (and
/// E1/E2 when requested).
inline GradCheckReport gradient_check(Variant variant, const Matrix& q, const Matrix& k, const Matrix& v,
                                      const std::vector<HeadWeights>& params, const LowRankProjections& proj,
                                      const FeatureMapSpec& spec, const AttentionConfig& cfg,
                                      const GradCheckOptions& options = {}) {
  const Matrix upstream = options.probe.value_or(Matrix(cfg.n, cfg.d_model, 1.0));
  const AttentionGradients grads =
      attention_backward(variant, q, k, v, params, proj, spec, cfg, upstream, options.check_projections);

  Matrix qw = q, kw = k, vw = v;
  std::vector<HeadWeights> pw = params;
  LowRankProjections projw = proj;
  // The reference forward runs in extended precision: with h = 1e-5, double
  // roundoff in the outputs is about 1e-11 after division by 2h, which is
  // not negligible against gradient entries that cancel down to 1e-6.
  using Wide = long double;
  auto forward = [&] {
    return run_variant<Wide>(variant, qw.cast<Wide>(), kw.cast<Wide>(), vw.cast<Wide>(),
                             std::span<const HeadWeights>(pw), projw, spec, cfg);
  };

  // Outputs are differenced before the probe reduction, over the step that
  // is actually representable at x.
  GradCheckReport report;
  auto check = [&](const std::string& name, Matrix& param, const Matrix& analytic) {
    for (std::size_t i = 0; i < param.size(); ++i) {
      double& x = param.values()[i];
      const double saved = x;
      const double up = saved + options.step;
      const double down = saved - options.step;
      x = up;
      const auto fp = forward();
      x = down;
      const auto fm = forward();
      x = saved;
      Wide df = 0.0L;
      for (std::size_t j = 0; j < fp.size(); ++j) df += Wide(upstream.values()[j]) * (fp.values()[j] - fm.values()[j]);
      const double numeric = double(df / Wide(up - down));
      const double err = relative_error(analytic.values()[i], numeric);
      ++report.entries;
      if (report.entries == 1 || err > report.max_rel_error) {
        report.max_rel_error = err;
        report.worst_param = name;
        report.worst_index = i;
        report.worst_analytic = analytic.values()[i];
        report.worst_numeric = numeric;
      }
    }
  };
  check("q", qw, grads.dq);
  check("k", kw, grads.dk);
  check("v", vw, grads.dv);
  for (std::size_t h = 0; h < pw.size(); ++h) {
    const std::string tag = "head" + std::to_string(h) + ".";
    check(tag + "wq", pw[h].wq, grads.dweights[h].wq);
    check(tag + "wk", pw[h].wk, grads.dweights[h].wk);
    check(tag + "wv", pw[h].wv, grads.dweights[h].wv);
  }
  if (options.check_projections && grads.de1) {
    check("e1", projw.e1, *grads.de1);
    check("e2", projw.e2, *grads.de2);
  }
  return report;
}

// ---------------------------------------------------------------------------
// Toy training.

/// Synthetic regression: each sequence is [content | sinusoidal position];
/// the target at position i is the mean content over the window
/// [i - radius, i + radius] with i itself masked out.
struct ToyTask {
  std::vector<Matrix> inputs;   // n x d_model
  std::vector<Matrix> targets;  // n x d_content
  std::size_t d_content = 0;
};

inline ToyTask make_toy_task(std::size_t batch, std::size_t n, std::size_t d_model, std::size_t radius,
                             std::uint64_t seed) {
  if (d_model < 2) throw ConfigError("toy task needs d_model >= 2");
  RngStream rng(seed);
  ToyTask task;
  task.d_content = d_model / 2;
  const std::size_t d_pos = d_model - task.d_content;
  for (std::size_t b = 0; b < batch; ++b) {
    const Matrix content = gaussian(rng, n, task.d_content, 1.0);
    Matrix x(n, d_model);
    Matrix t(n, task.d_content);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t c = 0; c < task.d_content; ++c) x(i, c) = content(i, c);
      for (std::size_t p = 0; p < d_pos; ++p) {
        const double freq = std::pow(10000.0, -static_cast<double>(p / 2 * 2) / static_cast<double>(d_pos));
        const double angle = static_cast<double>(i) * freq;
        x(i, task.d_content + p) = p % 2 == 0 ? std::sin(angle) : std::cos(angle);
      }
      std::size_t count = 0;
      const std::size_t lo = i >= radius ? i - radius : 0;
      const std::size_t hi = std::min(n - 1, i + radius);
      for (std::size_t j = lo; j <= hi; ++j) {
        if (j == i) continue;
        for (std::size_t c = 0; c < task.d_content; ++c) t(i, c) += content(j, c);
        ++count;
      }
      for (std::size_t c = 0; c < task.d_content; ++c) t(i, c) /= static_cast<double>(count);
    }
    task.inputs.push_back(std::move(x));
    task.targets.push_back(std::move(t));
  }
  return task;
}

struct TrainConfig {
  Variant variant = Variant::flurka;  // full | lowrank | kernel | flurka
  std::size_t steps = 500;
  double lr = 1e-2;
  std::uint64_t task_seed = 0;
  std::size_t n = 32;
  std::size_t d_model = 16;
  std::size_t heads = 2;
  std::size_t d_head = 8;
  std::size_t d_k = 8;
  std::size_t batch = 8;
  std::size_t radius = 2;
  FeatureKind kernel = FeatureKind::prf;
  std::size_t m = 0;
  bool learn_projections = false;
  /// Up-training: train `base` for ceil(alpha * steps), then transfer and
  /// finish as flurka.
  std::optional<double> alpha;
  ModelKind base = ModelKind::lowrank;
};

struct TrainResult {
  std::vector<double> losses;  // loss before the update at each step
  std::optional<std::size_t> transfer_step;
};

inline constexpr const char* kLossCsvHeader = "step,loss";

namespace detail {

struct ToyModel {
  ModelParams attention;
  Matrix readout;  // d_model x d_content
};

inline Variant variant_for(ModelKind kind) {
  switch (kind) {
    case ModelKind::lowrank: return Variant::lowrank;
    case ModelKind::kernel: return Variant::kernel;
    case ModelKind::flurka: return Variant::flurka;
  }
  return Variant::flurka;
}

/// One full-batch step. Returns the loss (mean over sequences and positions
/// of the squared error norm) at the current parameters, then applies the
/// gradient update in place.
inline double train_step(Variant variant, ToyModel& model, const ToyTask& task, const AttentionConfig& cfg,
                         double lr, bool learn_projections) {
  const auto& heads = model.attention.heads;
  const LowRankProjections proj = model.attention.projections.value_or(identity_projections(cfg.n));
  const FeatureMapSpec spec = model.attention.feature_map.value_or(FeatureMapSpec{});
  const double scale = 1.0 / static_cast<double>(task.inputs.size() * cfg.n);

  double loss = 0.0;
  Matrix dreadout(model.readout.rows(), model.readout.cols());
  std::vector<HeadWeights> dheads;
  for (const auto& w : heads)
    dheads.push_back({Matrix(w.wq.rows(), w.wq.cols()), Matrix(w.wk.rows(), w.wk.cols()),
                      Matrix(w.wv.rows(), w.wv.cols())});
  Matrix de1(proj.e1.rows(), proj.e1.cols());
  Matrix de2(proj.e2.rows(), proj.e2.cols());

  for (std::size_t b = 0; b < task.inputs.size(); ++b) {
    const Matrix& x = task.inputs[b];
    const Matrix hidden = run_variant(variant, x, x, x, std::span<const HeadWeights>(heads), proj, spec, cfg);
    const Matrix residual = matmul(hidden, model.readout) - task.targets[b];
    for (double r : residual.values()) loss += scale * r * r;
    const Matrix dy = (2.0 * scale) * residual;
    add_in_place(dreadout, matmul_tn(hidden, dy));
    const Matrix dhidden = matmul_nt(dy, model.readout);
    const bool want_e = learn_projections && uses_projections(variant);
    const AttentionGradients g = attention_backward(variant, x, x, x, heads, proj, spec, cfg, dhidden, want_e);
    for (std::size_t h = 0; h < dheads.size(); ++h) {
      add_in_place(dheads[h].wq, g.dweights[h].wq);
      add_in_place(dheads[h].wk, g.dweights[h].wk);
      add_in_place(dheads[h].wv, g.dweights[h].wv);
    }
    if (g.de1) {
      add_in_place(de1, *g.de1);
      add_in_place(de2, *g.de2);
    }
  }

  if (lr != 0.0) {
    add_in_place(model.readout, -lr * dreadout);
    for (std::size_t h = 0; h < dheads.size(); ++h) {
      add_in_place(model.attention.heads[h].wq, -lr * dheads[h].wq);
      add_in_place(model.attention.heads[h].wk, -lr * dheads[h].wk);
      add_in_place(model.attention.heads[h].wv, -lr * dheads[h].wv);
    }
    if (learn_projections && model.attention.projections && uses_projections(variant)) {
      add_in_place(model.attention.projections->e1, -lr * de1);
      add_in_place(model.attention.projections->e2, -lr * de2);
    }
  }
  return loss;
}

}  // namespace detail

/// Plain full-batch gradient descent on the toy task. Throws NumericError
/// naming the step at which the loss stopped being finite.
inline TrainResult toy_train(const TrainConfig& tc) {
  if (tc.steps < 1) throw ConfigError("toy_train needs steps >= 1");
  if (tc.variant == Variant::flurka_naive) throw ConfigError("toy_train does not support flurka-naive");
  const AttentionConfig cfg{tc.n, tc.d_model, tc.d_head, tc.heads, tc.d_k, tc.task_seed ^ 0x5DEECE66DULL};
  cfg.validate();
  const ToyTask task = make_toy_task(tc.batch, tc.n, tc.d_model, tc.radius, tc.task_seed);

  SampledParams sampled = sample_params(cfg);
  RngStream rng(cfg.seed ^ 0x9E3779B97F4A7C15ULL);
  const FeatureMapSpec spec{tc.kernel, tc.m, rng.next_u64(), true};
  detail::ToyModel model{{}, gaussian(rng, tc.d_model, task.d_content, 1.0 / std::sqrt(double(tc.d_model)))};

  Variant current = tc.variant;
  std::size_t switch_at = tc.steps;
  TrainResult result;
  if (tc.alpha) {
    if (!(*tc.alpha > 0.0 && *tc.alpha < 1.0)) throw ConfigError("alpha must lie in (0, 1)");
    if (tc.base == ModelKind::flurka) throw ConfigError("up-training base must be lowrank or kernel");
    current = detail::variant_for(tc.base);
    switch_at = static_cast<std::size_t>(std::ceil(*tc.alpha * static_cast<double>(tc.steps)));
    result.transfer_step = switch_at;
  }
  model.attention.kind = tc.alpha ? tc.base : ModelKind::flurka;
  model.attention.heads = std::move(sampled.heads);
  if (uses_projections(current)) model.attention.projections = std::move(sampled.projections);
  if (uses_feature_map(current)) model.attention.feature_map = spec;
  if (current == Variant::full || current == Variant::lowrank) model.attention.feature_map.reset();

  for (std::size_t step = 0; step < tc.steps; ++step) {
    if (tc.alpha && step == switch_at) {
      model.attention = uptrain_transfer(model.attention, cfg, TransferOptions{tc.kernel, tc.m, true});
      current = Variant::flurka;
    }
    const double loss = detail::train_step(current, model, task, cfg, tc.lr, tc.learn_projections);
    if (!std::isfinite(loss)) throw NumericError("training diverged at step " + std::to_string(step));
    result.losses.push_back(loss);
  }
  return result;
}

}  // namespace flurka
