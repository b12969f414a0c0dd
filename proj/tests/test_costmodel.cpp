#include <gtest/gtest.h>

#include <limits>
#include <random>
#include <string>

#include "flurka/costmodel.hpp"

using namespace flurka;

// Totals from tests/oracles/cost_reference.py.
TEST(Golden, SmallestConfiguration) {
  EXPECT_EQ(flops_lowrank(2, 1, 1, 1).total, 14u);
  EXPECT_EQ(flops_kernel(2, 1, 1).total, 14u);
  EXPECT_EQ(flops_flurka(2, 1, 1, 1).total, 14u);
  EXPECT_EQ(flops_full(2, 1, 1).total, 18u);
}

TEST(Golden, LargeConfiguration) {
  const auto lr = flops_lowrank(20000, 2600, 1500, 8);
  const auto ke = flops_kernel(20000, 2600, 325);
  const auto fu = flops_flurka(20000, 2600, 1500, 325);
  EXPECT_EQ(lr.total, 467720000000ULL);
  EXPECT_EQ(ke.total, 439504000000ULL);
  EXPECT_EQ(fu.total, 329703400000ULL);
  EXPECT_LT(fu.total, std::min(lr.total, ke.total));
  EXPECT_EQ(flops_full(20000, 2600, 8).total, 2488800000000ULL);
}

TEST(Golden, ScaledBenchmarkConfiguration) {
  EXPECT_EQ(flops_lowrank(4096, 320, 192, 8).total, 1471676416ULL);
  EXPECT_EQ(flops_kernel(4096, 320, 40).total, 1365770240ULL);
  EXPECT_EQ(flops_flurka(4096, 320, 192, 40).total, 1018327040ULL);
  EXPECT_EQ(flops_full(4096, 320, 8).total, 12129927168ULL);
}

TEST(Breakdown, TermsSumToTotal) {
  const auto c = flops_flurka(1000, 64, 32, 8);
  EXPECT_EQ(c.downsampling + c.linear_transform + c.qk_product + c.kernel_map + c.softmax + c.av_product, c.total);
  EXPECT_EQ(c.downsampling, 2u * 1000 * 32 * 64);
  EXPECT_EQ(c.softmax, 0u);
  EXPECT_EQ(flops_lowrank(1000, 64, 32, 8).softmax, 1000u * 8 * 32);
  EXPECT_EQ(flops_kernel(1000, 64, 8).kernel_map, 2u * 1000 * 64);
}

TEST(Breakdown, KernelIsLinearInSequenceLength) {
  for (flop_t n : {1u, 7u, 1000u}) {
    EXPECT_EQ(flops_kernel(2 * n, 96, 12).total, 2 * flops_kernel(n, 96, 12).total);
  }
  // Low-rank and fused counts are affine in n: equal second differences.
  auto second = [](auto f) { return f(300) - 2 * f(200) + f(100); };
  EXPECT_EQ(second([](flop_t n) { return flops_lowrank(n, 96, 24, 8).total; }), 0u);
  EXPECT_EQ(second([](flop_t n) { return flops_flurka(n, 96, 24, 12).total; }), 0u);
}

TEST(Breakdown, RejectsZeroDimensions) {
  EXPECT_THROW(flops_lowrank(0, 1, 1, 1), ConfigError);
  EXPECT_THROW(flops_kernel(1, 0, 1), ConfigError);
  EXPECT_THROW(flops_flurka(1, 1, 1, 0), ConfigError);
}

TEST(Overflow, HugeDimensionsThrow) {
  const flop_t big = flop_t{1} << 40;
  EXPECT_THROW(flops_kernel(big, big, 1), OverflowError);
  EXPECT_THROW(flops_full(big, 1, 1), OverflowError);
  EXPECT_NO_THROW(flops_kernel(1 << 20, 1 << 10, 64));
}

TEST(Regimes, PredicateExamples) {
  EXPECT_TRUE(claim1_regime(20000, 2600, 1500, 325, 8));
  EXPECT_FALSE(claim1_regime(15000, 2600, 1500, 325, 8));  // N must exceed d_k (H + 2)
  EXPECT_TRUE(claim2_regime(100, 8, 4));
  EXPECT_FALSE(claim2_regime(9, 8, 4));  // N - 1 > d_k is strict
  EXPECT_FALSE(claim2_regime(100, 4, 4));
  EXPECT_TRUE(claim3_regime(20000, 2600, 1500, 8));
  EXPECT_FALSE(claim3_regime(20000, 1000, 1500, 8));
  EXPECT_FALSE(claim3_regime(15000, 2600, 1500, 8));
}

TEST(Regimes, PredicatesSurviveWideProducts) {
  const flop_t huge = std::numeric_limits<flop_t>::max();
  // d_k (H + 2) would wrap in 64 bits.
  EXPECT_FALSE(claim3_regime(huge, huge, flop_t{1} << 62, 8));
}

namespace {

struct Tuple {
  flop_t n, dm, dk, dh, h;
};

// Half uniform draws, half aimed at the claim-1 region, always d_m = H d_h.
Tuple draw_tuple(std::mt19937_64& gen, int t) {
  auto pick = [&](flop_t lo, flop_t hi) { return std::uniform_int_distribution<flop_t>(lo, hi)(gen); };
  const flop_t h = pick(1, 16);
  const flop_t dh = pick(1, 256);
  const flop_t dm = h * dh;
  if (t % 2 == 0) return {pick(1, 200000), dm, pick(1, 2 * dm + 2), dh, h};
  const flop_t dk = dm > dh + 1 ? pick(dh + 1, dm - 1) : pick(1, dm + 1);
  const flop_t bound = dk * (h + 2);
  return {pick(bound > 3 ? bound - 2 : 1, 3 * bound + 3), dm, dk, dh, h};
}

}  // namespace

TEST(Regimes, ClaimTwoIsSound) {
  std::mt19937_64 gen(20240601);
  std::size_t hits = 0;
  for (int t = 0; t < 20000; ++t) {
    const Tuple u = draw_tuple(gen, t);
    if (!claim2_regime(u.n, u.dk, u.dh)) continue;
    ++hits;
    ASSERT_LT(flops_flurka(u.n, u.dm, u.dk, u.dh).total, flops_lowrank(u.n, u.dm, u.dk, u.h).total)
        << u.n << ' ' << u.dm << ' ' << u.dk << ' ' << u.dh << ' ' << u.h;
  }
  EXPECT_GT(hits, 1000u);
}

TEST(Regimes, ExactKernelConditionIsAnEquivalence) {
  std::mt19937_64 gen(7);
  for (int t = 0; t < 20000; ++t) {
    const Tuple u = draw_tuple(gen, t);
    const bool beats = flops_flurka(u.n, u.dm, u.dk, u.dh).total < flops_kernel(u.n, u.dm, u.dh).total;
    ASSERT_EQ(kernel_regime_exact(u.n, u.dm, u.dk, u.dh), beats)
        << u.n << ' ' << u.dm << ' ' << u.dk << ' ' << u.dh << ' ' << u.h;
  }
}

TEST(Regimes, ClaimThreeBoundIsNotSufficient) {
  // N > d_k (H + 2) and d_m > d_k hold, yet the fused count exceeds the
  // kernel count: the margin 2N(d_m - d_k) is too small to cover
  // d_k(2 d_m + 1 + d_h) - N(1 + d_h).
  const flop_t n = 40386, dm = 2060, dk = 2056, dh = 206, h = 10;
  EXPECT_TRUE(claim3_regime(n, dm, dk, h));
  EXPECT_TRUE(claim1_regime(n, dm, dk, dh, h));
  EXPECT_FALSE(kernel_regime_exact(n, dm, dk, dh));
  EXPECT_GT(flops_flurka(n, dm, dk, dh).total, flops_kernel(n, dm, dh).total);
  // With d_m close to d_k the threshold sits near d_k (2H + 1), not d_k (H + 2).
  EXPECT_FALSE(kernel_regime_exact(41378, dm, dk, dh));
  EXPECT_TRUE(kernel_regime_exact(41379, dm, dk, dh));
  EXPECT_TRUE(kernel_regime_exact((2 * h + 1) * dk, dm, dk, dh));
}

TEST(Regimes, ReferenceConfigurationsSatisfyExactCondition) {
  EXPECT_TRUE(kernel_regime_exact(20000, 2600, 1500, 325));
  EXPECT_TRUE(kernel_regime_exact(4096, 320, 192, 40));
}

TEST(Crossover, ScanFindsMinimalPoint) {
  const auto n_star = crossover_n(2600, 1500, 325, 8, 60000);
  ASSERT_TRUE(n_star);
  EXPECT_LE(*n_star, 15001u);
  EXPECT_TRUE(flurka_beats_both(*n_star, 2600, 1500, 325, 8));
  for (flop_t n = 1; n < *n_star; ++n) ASSERT_FALSE(flurka_beats_both(n, 2600, 1500, 325, 8));
}

TEST(Crossover, ReportsAbsence) {
  // d_k >= d_m: the fused count never drops below the kernel count.
  EXPECT_FALSE(crossover_n(8, 64, 4, 2, 5000));
  EXPECT_THROW(crossover_n(8, 4, 4, 2, 0), ConfigError);
}

TEST(Csv, RowLayout) {
  EXPECT_EQ(std::string(kCostCsvHeader),
            "N,d_m,d_k,d_h,H,flops_full,flops_lowrank,flops_kernel,flops_flurka,claim1,claim2,claim3");
  EXPECT_EQ(cost_csv_row({2, 1, 1, 1, 1}), "2,1,1,1,1,18,14,14,14,0,0,0");
  const std::string large = cost_csv_row({20000, 2600, 1500, 325, 8});
  EXPECT_EQ(large, "20000,2600,1500,325,8,2488800000000,467720000000,439504000000,329703400000,1,1,1");
}
