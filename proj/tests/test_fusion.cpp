#include <gtest/gtest.h>

#include <cmath>
#include <string>

#include "flurka/fusion.hpp"
#include "flurka/variants.hpp"

using namespace flurka;

namespace {

struct Inputs {
  Matrix q, k, v;
};

Inputs random_inputs(const AttentionConfig& cfg, std::uint64_t seed) {
  RngStream rng(seed);
  Matrix q = gaussian(rng, cfg.n, cfg.d_model, 1.0);
  Matrix k = gaussian(rng, cfg.n, cfg.d_model, 1.0);
  Matrix v = gaussian(rng, cfg.n, cfg.d_model, 1.0);
  return {std::move(q), std::move(k), std::move(v)};
}

// normalize(phi(Q') phi(K~')^T) V~' built from explicit matrices.
Matrix explicit_fused(const Inputs& x, const SampledParams& p, const LowRankProjections& proj,
                      const FeatureMapSpec& spec, const AttentionConfig& cfg) {
  const FeatureMap phi(spec, cfg.d_head);
  Matrix out(cfg.n, cfg.d_model);
  for (std::size_t h = 0; h < cfg.heads; ++h) {
    const auto& w = p.heads[h];
    Matrix qp = matmul(x.q, w.wq);
    scale_in_place(qp, query_scale(cfg));
    const Matrix kt = matmul(matmul(proj.e1, x.k), w.wk);
    const Matrix vt = matmul(matmul(proj.e2, x.v), w.wv);
    set_cols(out, h * cfg.d_head, matmul(normalized_kernel_matrix(phi.apply(qp), phi.apply(kt)), vt));
  }
  return out;
}

}  // namespace

TEST(Fused, MatchesExplicitConstruction) {
  for (std::uint64_t seed = 0; seed < 4; ++seed) {
    const AttentionConfig cfg{20, 12, 4, 3, 6, seed};
    const auto p = sample_params(cfg);
    const auto x = random_inputs(cfg, seed + 9);
    for (auto kind : {FeatureKind::prf, FeatureKind::elu}) {
      const FeatureMapSpec spec{kind, 16, seed, true};
      const auto got = flurka_attention(x.q, x.k, x.v, p.heads, p.projections, spec, cfg).output;
      EXPECT_LT(norm_inf(got - explicit_fused(x, p, p.projections, spec, cfg)), 1e-12);
    }
  }
}

TEST(Fused, IdentityProjectionsAreBitExact) {
  const AttentionConfig cfg{24, 8, 4, 2, 24, 3};
  const auto p = sample_params(cfg);
  const auto x = random_inputs(cfg, 4);
  const auto id = identity_projections(cfg.n);
  for (auto kind : {FeatureKind::prf, FeatureKind::elu}) {
    const FeatureMapSpec spec{kind, 0, 5, true};
    EXPECT_EQ(flurka_attention(x.q, x.k, x.v, p.heads, id, spec, cfg).output,
              kernel_attention(x.q, x.k, x.v, p.heads, spec, cfg).output);
  }
  EXPECT_EQ(linformer_attention(x.q, x.k, x.v, p.heads, id, cfg), full_attention(x.q, x.k, x.v, p.heads, cfg));
}

TEST(Fused, NaiveOrderingIsADifferentOperator) {
  // Contracting before or after the feature map only agrees for identity E.
  const AttentionConfig cfg{16, 8, 4, 2, 5, 7};
  const auto p = sample_params(cfg);
  const auto x = random_inputs(cfg, 8);
  for (auto kind : {FeatureKind::prf, FeatureKind::elu}) {
    const FeatureMapSpec spec{kind, 8, 1, true};
    const auto fast = flurka_attention(x.q, x.k, x.v, p.heads, p.projections, spec, cfg).output;
    const auto naive = flurka_naive_attention(x.q, x.k, x.v, p.heads, p.projections, spec, cfg).output;
    EXPECT_TRUE(naive.all_finite());
    EXPECT_GT(norm_inf(fast - naive), 1e-3);
    const auto id = identity_projections(cfg.n);
    AttentionConfig full_k = cfg;
    full_k.d_k = cfg.n;
    EXPECT_LT(norm_inf(flurka_naive_attention(x.q, x.k, x.v, p.heads, id, spec, full_k).output -
                       flurka_attention(x.q, x.k, x.v, p.heads, id, spec, full_k).output),
              1e-12);
  }
}

TEST(Fused, NaiveMatchesExplicitOrdering) {
  // Nonnegative projections keep every denominator positive.
  const AttentionConfig cfg{10, 4, 2, 2, 3, 12};
  const auto p = sample_params(cfg);
  const auto x = random_inputs(cfg, 13);
  LowRankProjections proj = p.projections;
  for (double& e : proj.e1.values()) e = std::abs(e);
  for (double& e : proj.e2.values()) e = std::abs(e);
  const FeatureMapSpec spec{FeatureKind::elu, 0, 0, true};
  const FeatureMap phi(spec, cfg.d_head);
  const auto res = flurka_naive_attention(x.q, x.k, x.v, p.heads, proj, spec, cfg);
  EXPECT_FALSE(res.denominator_clamped);
  const Matrix& got = res.output;
  for (std::size_t h = 0; h < cfg.heads; ++h) {
    Matrix qp = matmul(x.q, p.heads[h].wq);
    scale_in_place(qp, query_scale(cfg));
    const Matrix fk = matmul(proj.e1, phi.apply(matmul(x.k, p.heads[h].wk)));
    const Matrix vt = matmul(proj.e2, matmul(x.v, p.heads[h].wv));
    const Matrix want = matmul(normalized_kernel_matrix(phi.apply(qp), fk), vt);
    EXPECT_LT(norm_inf(slice_cols(got, h * cfg.d_head, cfg.d_head) - want), 1e-12);
  }
}

TEST(Fused, NaiveOrderingCanLoseItsNormalizer) {
  // Signed Gaussian E1 applied after the feature map leaves the row sums
  // sign-indefinite; the floor is hit and reported.
  const AttentionConfig cfg{10, 4, 2, 2, 3, 12};
  const auto p = sample_params(cfg);
  const auto x = random_inputs(cfg, 13);
  const auto res = flurka_naive_attention(x.q, x.k, x.v, p.heads, p.projections, {FeatureKind::elu, 0, 0, true}, cfg);
  EXPECT_TRUE(res.denominator_clamped);
  EXPECT_FALSE(flurka_attention(x.q, x.k, x.v, p.heads, p.projections, {FeatureKind::elu, 0, 0, true}, cfg)
                   .denominator_clamped);
}

TEST(Fused, NoSquareIntermediates) {
  const AttentionConfig cfg{2048, 16, 8, 2, 16, 1};
  const auto p = sample_params(cfg);
  const auto x = random_inputs(cfg, 2);
  reset_allocation_watermark();
  flurka_attention(x.q, x.k, x.v, p.heads, p.projections, {FeatureKind::prf, 0, 3, true}, cfg);
  EXPECT_LE(allocation_watermark(), 16u);
  reset_allocation_watermark();
  linformer_attention(x.q, x.k, x.v, p.heads, p.projections, cfg);
  EXPECT_LE(allocation_watermark(), 16u);
}

TEST(Fused, RejectsMismatchedProjections) {
  const AttentionConfig cfg{16, 8, 4, 2, 4, 1};
  const auto p = sample_params(cfg);
  const auto x = random_inputs(cfg, 2);
  const LowRankProjections bad{Matrix(5, 16), Matrix(4, 16), ProjectionMode::practical, 0.0};
  EXPECT_THROW(flurka_attention(x.q, x.k, x.v, p.heads, bad, {}, cfg), ConfigError);
}

TEST(Theorem, ProjectionRatio) {
  const double delta = 0.3;
  const auto proj = make_theorem_projections(12, 5, delta, 4);
  EXPECT_EQ(proj.mode, ProjectionMode::theorem);
  EXPECT_EQ(proj.e1.rows(), 5u);
  EXPECT_EQ(proj.e1.cols(), 12u);
  for (std::size_t i = 0; i < proj.e1.size(); ++i)
    EXPECT_NEAR(proj.e1.values()[i] / proj.e2.values()[i], delta * std::exp(delta), 1e-14);
  EXPECT_THROW(make_theorem_projections(12, 5, 0.0, 4), ConfigError);
}

TEST(Theorem, ProjectionEntriesHaveUnitColumnScale) {
  // Entries are N(0, 1/k) before scaling.
  const std::size_t n = 400, k = 50;
  const auto proj = make_theorem_projections(n, k, 1.0, 8);
  double s2 = 0.0;
  for (double e : proj.e1.values()) s2 += e * e;
  EXPECT_NEAR(s2 / static_cast<double>(n), 1.0, 0.05);
}

TEST(Theorem, VanishingDeltaGivesUniformAttention) {
  // E1 -> 0 flattens every contracted key, so each output row becomes the
  // mean of the contracted values.
  const AttentionConfig cfg{12, 6, 3, 2, 4, 9};
  const auto p = sample_params(cfg);
  const auto x = random_inputs(cfg, 10);
  const auto proj = make_theorem_projections(cfg.n, cfg.d_k, 1e-12, 11);
  const Matrix out =
      flurka_attention(x.q, x.k, x.v, p.heads, proj, {FeatureKind::prf, 6, 2, true}, cfg).output;
  const Matrix vt = project_all_heads(matmul(proj.e2, x.v), p.heads, Role::value);
  for (std::size_t c = 0; c < cfg.d_model; ++c) {
    double mean = 0.0;
    for (std::size_t j = 0; j < cfg.d_k; ++j) mean += vt(j, c);
    mean /= static_cast<double>(cfg.d_k);
    for (std::size_t i = 0; i < cfg.n; ++i) EXPECT_NEAR(out(i, c), mean, 1e-10);
  }
}

TEST(Theorem, ProjectionDimension) {
  EXPECT_EQ(theorem_k(64, 0.5), 42u);
  EXPECT_EQ(theorem_k(2, 5.0 * std::log(2.0)), 1u);
  EXPECT_THROW(theorem_k(1, 0.5), ConfigError);
  EXPECT_THROW(theorem_k(64, 0.0), ConfigError);
}

TEST(Transfer, FromLowRankKeepsWeightsAndProjections) {
  const AttentionConfig cfg{16, 8, 4, 2, 4, 31};
  const auto sampled = sample_params(cfg);
  const ModelParams base{ModelKind::lowrank, sampled.heads, sampled.projections, std::nullopt};
  const ModelParams fused = uptrain_transfer(base, cfg, {FeatureKind::elu, 0, true});
  EXPECT_EQ(fused.kind, ModelKind::flurka);
  for (std::size_t h = 0; h < cfg.heads; ++h) {
    EXPECT_EQ(fused.heads[h].wq, base.heads[h].wq);
    EXPECT_EQ(fused.heads[h].wk, base.heads[h].wk);
    EXPECT_EQ(fused.heads[h].wv, base.heads[h].wv);
  }
  EXPECT_EQ(fused.projections->e1, base.projections->e1);
  EXPECT_EQ(fused.projections->e2, base.projections->e2);
  ASSERT_TRUE(fused.feature_map);
  EXPECT_EQ(fused.feature_map->kind, FeatureKind::elu);
  EXPECT_EQ(fused.feature_map->seed, cfg.seed);
}

TEST(Transfer, FromKernelKeepsFeatureMap) {
  const AttentionConfig cfg{16, 8, 4, 2, 4, 32};
  const auto sampled = sample_params(cfg);
  const FeatureMapSpec spec{FeatureKind::prf, 12, 99, true};
  const ModelParams base{ModelKind::kernel, sampled.heads, std::nullopt, spec};
  const ModelParams fused = uptrain_transfer(base, cfg);
  EXPECT_EQ(*fused.feature_map, spec);
  EXPECT_EQ(fused.projections->e1, sampled.projections.e1);
  EXPECT_EQ(fused.heads[1].wk, sampled.heads[1].wk);
}

TEST(Transfer, ShapeErrorsNameTheDimension) {
  const AttentionConfig cfg{16, 8, 4, 2, 4, 33};
  const auto sampled = sample_params(cfg);
  const AttentionConfig other_k{16, 8, 4, 2, 6, 33};
  const ModelParams lowrank{ModelKind::lowrank, sampled.heads, sampled.projections, std::nullopt};
  try {
    uptrain_transfer(lowrank, other_k);
    FAIL() << "expected TransferError";
  } catch (const TransferError& e) {
    EXPECT_NE(std::string(e.what()).find("d_k"), std::string::npos);
  }
  const AttentionConfig narrow{16, 8, 2, 4, 4, 33};
  try {
    uptrain_transfer(lowrank, narrow);
    FAIL() << "expected TransferError";
  } catch (const TransferError& e) {
    EXPECT_NE(std::string(e.what()).find("heads"), std::string::npos);
  }
  ModelParams fused = lowrank;
  fused.kind = ModelKind::flurka;
  EXPECT_THROW(uptrain_transfer(fused, cfg), TransferError);
  ModelParams missing{ModelKind::kernel, sampled.heads, std::nullopt, std::nullopt};
  EXPECT_THROW(uptrain_transfer(missing, cfg), TransferError);
}

TEST(Variants, ParseAndDispatch) {
  EXPECT_EQ(parse_variant("linformer"), Variant::lowrank);
  EXPECT_EQ(parse_variant("flurka-naive"), Variant::flurka_naive);
  EXPECT_THROW(parse_variant("performer"), ConfigError);
  EXPECT_THROW(parse_feature_kind("relu"), ConfigError);
  for (Variant v : {Variant::full, Variant::lowrank, Variant::kernel, Variant::flurka, Variant::flurka_naive})
    EXPECT_EQ(parse_variant(to_string(v)), v);

  const AttentionConfig cfg{8, 4, 2, 2, 4, 1};
  const auto p = sample_params(cfg);
  const auto x = random_inputs(cfg, 2);
  const FeatureMapSpec spec{};
  EXPECT_EQ(run_variant(Variant::kernel, x.q, x.k, x.v, std::span<const HeadWeights>(p.heads), p.projections,
                        spec, cfg),
            kernel_attention(x.q, x.k, x.v, p.heads, spec, cfg).output);
}
