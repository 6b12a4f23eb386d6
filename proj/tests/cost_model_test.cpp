#include "sectmoe/cost_model.hpp"

#include <gtest/gtest.h>

#include <cmath>

#include "oracles.hpp"
#include "sectmoe/prng.hpp"

using namespace sectmoe;

namespace {

ModelDims dims(double l, double e, double d0, double alpha = 0.0,
               Convention conv = Convention::consistent) {
  ModelDims d;
  d.tokens_per_expert = l;
  d.experts = e;
  d.d0 = d0;
  d.alpha = alpha;
  d.convention = conv;
  return d;
}

TEST(TraditionalCosts, DirectEvaluations) {
  {
    auto [a, r] = traditional_costs(dims(2, 2, 4));
    EXPECT_EQ(a, 192.0);
    EXPECT_EQ(r, 64.0);
  }
  {
    auto [a, r] = traditional_costs(dims(1, 1, 1));
    EXPECT_EQ(a, 3.0);
    EXPECT_EQ(r, 2.0);
  }
  {
    auto [a, r] =
        traditional_costs(dims(2, 2, 4, 0.0, Convention::paper_literal));
    EXPECT_EQ(a, 192.0);
    EXPECT_EQ(r, 32.0);
  }
}

TEST(SectionalQkv, DirectEvaluations) {
  {
    const QkvCosts c = sectional_qkv_costs(dims(1, 1, 1));
    EXPECT_EQ(c.pre, 3.0);
    EXPECT_EQ(c.experts, 3.0);
    EXPECT_EQ(c.total, 6.0);
  }
  {
    const QkvCosts c = sectional_qkv_costs(dims(2, 2, 4));
    EXPECT_EQ(c.pre, 192.0);
    EXPECT_EQ(c.experts, 24.0);
    EXPECT_EQ(c.total, 216.0);
  }
  {
    const QkvCosts base = sectional_qkv_costs(dims(3, 2, 4));
    const QkvCosts doubled = sectional_qkv_costs(dims(3, 2, 8));
    EXPECT_EQ(doubled.pre, 4.0 * base.pre);
    EXPECT_EQ(doubled.experts, 4.0 * base.experts);
    EXPECT_EQ(doubled.total, 4.0 * base.total);
  }
}

TEST(SectionalQkv, ClosedFormIdentity) {
  Prng rng(1);
  for (int i = 0; i < 20; ++i) {
    const double l = 1 + rng.next_u64() % 16;
    const double e = 1 + rng.next_u64() % 16;
    const double d0 = 1 + rng.next_u64() % 64;
    const QkvCosts c = sectional_qkv_costs(dims(l, e, d0));
    const double closed = 3.0 * l * d0 * d0 * (e * e * e + 1.0) / (e * e);
    EXPECT_LE(oracle::rel_err(c.total, closed), 1e-12);
    EXPECT_EQ(c.total, c.pre + c.experts);
  }
}

TEST(SectionalQkvHeads, ReducesToBaseAtSingleHead) {
  for (double e : {1.0, 2.0, 4.0}) {
    ModelDims d = dims(3, e, 8);
    d.heads_pre = 1;
    d.heads_exp = 1;
    const QkvCosts with_heads = sectional_qkv_costs_heads(d);
    const QkvCosts base = sectional_qkv_costs(d);
    EXPECT_EQ(with_heads.pre, base.pre);
    EXPECT_EQ(with_heads.experts, base.experts);
    EXPECT_EQ(with_heads.total, base.total);
  }
}

TEST(SectionalQkvHeads, DirectEvaluationAndScaling) {
  ModelDims d = dims(2, 2, 4);
  d.heads_pre = 2;
  d.heads_exp = 1;
  const QkvCosts c = sectional_qkv_costs_heads(d);
  EXPECT_EQ(c.pre, 96.0);
  EXPECT_EQ(c.experts, 24.0);
  EXPECT_EQ(c.total, 120.0);

  ModelDims d2 = d;
  d2.heads_pre = 4;
  EXPECT_EQ(sectional_qkv_costs_heads(d2).pre, 48.0);
}

TEST(SectionalAttn, DirectEvaluations) {
  {
    const AttnCosts c = sectional_attn_costs(dims(1, 1, 1));
    EXPECT_EQ(c.pre, 2.0);
    EXPECT_EQ(c.experts, 2.0);
    EXPECT_EQ(c.total, 4.0);
  }
  {
    const AttnCosts c = sectional_attn_costs(dims(2, 2, 4));
    EXPECT_EQ(c.pre, 64.0);
    EXPECT_EQ(c.experts, 8.0);
    EXPECT_EQ(c.total, 72.0);
  }
  {
    const AttnCosts base = sectional_attn_costs(dims(2, 2, 4));
    const AttnCosts quad = sectional_attn_costs(dims(8, 2, 4));
    EXPECT_EQ(quad.pre, 16.0 * base.pre);
    EXPECT_EQ(quad.experts, 16.0 * base.experts);
  }
}

TEST(Overhead, QuadraticAndPairwiseForms) {
  EXPECT_EQ(overhead_cost(2, 1.0), 4.0);
  EXPECT_EQ(pairwise_overhead(3, 1.0, 2.0), 9.0);
  EXPECT_EQ(pairwise_overhead(1, 5.0, 100.0), 5.0);  // no pairs at E=1
}

TEST(Overhead, PairwiseRatioApproachesQuadratic) {
  const double e = 1e4;
  const double ratio = pairwise_overhead(e, 1.0, 1.0) / (0.5 * 1.0 * e * e);
  EXPECT_LE(std::abs(ratio - 1.0), 1e-3);
}

TEST(TotalCost, AssembledBreakdown) {
  {
    const CostBreakdown b = total_cost(dims(2, 2, 4, 1.0));
    EXPECT_EQ(b.a_total, 216.0);
    EXPECT_EQ(b.r_total, 72.0);
    EXPECT_EQ(b.overhead, 4.0);
    EXPECT_EQ(b.s_total, 292.0);
  }
  {
    const CostBreakdown b = total_cost(dims(1, 1, 1, 0.0));
    EXPECT_EQ(b.s_total, 10.0);  // 6 + 4 + 0
  }
  {
    const double s0 = total_cost(dims(3, 2, 8, 0.5)).s_total;
    const double s1 = total_cost(dims(3, 2, 8, 1.5)).s_total;
    EXPECT_LT(s0, s1);
  }
}

TEST(TotalCost, BreakdownIdentities) {
  Prng rng(2);
  for (int i = 0; i < 20; ++i) {
    const ModelDims d = dims(1 + rng.next_u64() % 12, 1 + rng.next_u64() % 12,
                             1 + rng.next_u64() % 32, 5.0 * rng.uniform01());
    const CostBreakdown b = total_cost(d);
    EXPECT_LE(oracle::rel_err(b.a_total, b.a_pre + b.a_experts), 1e-12);
    EXPECT_LE(oracle::rel_err(b.r_total, b.r_pre + b.r_experts), 1e-12);
    EXPECT_LE(oracle::rel_err(b.s_total, b.a_total + b.r_total + b.overhead),
              1e-12);
    EXPECT_LE(oracle::rel_err(
                  b.s_total, oracle::ref_total_cost(d.tokens_per_expert,
                                                    d.experts, d.d0, d.alpha)),
              1e-12);
  }
}

TEST(TotalCost, ScalingLaws) {
  // projection costs: linear in L, quadratic in d0
  const CostBreakdown base = total_cost(dims(3, 2, 8));
  const CostBreakdown l2 = total_cost(dims(6, 2, 8));
  const CostBreakdown d2 = total_cost(dims(3, 2, 16));
  EXPECT_EQ(l2.a_total, 2.0 * base.a_total);
  EXPECT_EQ(d2.a_total, 4.0 * base.a_total);
  // attention-score costs: quadratic in L, linear in d0
  EXPECT_EQ(l2.r_total, 4.0 * base.r_total);
  EXPECT_EQ(d2.r_total, 2.0 * base.r_total);
}

TEST(Derivative, HandEvaluatedPoint) {
  EXPECT_EQ(ds_de(dims(2, 2, 4, 1.0), 2.0), 100.0);
}

TEST(Derivative, MatchesFiniteDifferencesAtFixedPoints) {
  const ModelDims d = dims(2, 2, 4, 1.0);
  for (double e : {1.5, 2.0, 5.0, 17.0}) {
    const double h = 1e-6 * e;
    const double fd = (s_of_e(d, e + h) - s_of_e(d, e - h)) / (2.0 * h);
    EXPECT_LE(oracle::rel_err(ds_de(d, e), fd), 1e-8) << "E = " << e;
  }
}

TEST(Derivative, MatchesFiniteDifferencesAtRandomPoints) {
  Prng rng(3);
  for (int i = 0; i < 20; ++i) {
    const ModelDims d = dims(1 + rng.next_u64() % 16, 1, 2 + rng.next_u64() % 63,
                             10.0 * rng.uniform01());
    const double e = 1.2 + 30.0 * rng.uniform01();
    const double h = 1e-6 * e;
    const double fd = (s_of_e(d, e + h) - s_of_e(d, e - h)) / (2.0 * h);
    EXPECT_LE(oracle::rel_err(ds_de(d, e), fd), 1e-8)
        << "sample " << i << " at E = " << e;
  }
}

TEST(Derivative, LiteralVariantFailsTheFiniteDifferenceCheck) {
  // the 1/E^4 first-term correction is not the derivative of S(E)
  const ModelDims d = dims(2, 2, 4, 1.0);
  const double e = 2.0;
  const double h = 1e-6 * e;
  const double fd = (s_of_e(d, e + h) - s_of_e(d, e - h)) / (2.0 * h);
  EXPECT_LE(oracle::rel_err(ds_de(d, e), fd), 1e-8);
  EXPECT_GT(oracle::rel_err(ds_de_literal(d, e), fd), 1e-3);
}

TEST(Derivative, LargeExpertCountAsymptotics) {
  const ModelDims d = dims(2, 2, 4, 1.0);
  const double e = 1e6;
  const double expected = 3.0 * 2 * 16 + 2.0 * 4 * 4 + 2.0 * 1.0 * e;
  EXPECT_LE(oracle::rel_err(ds_de(d, e), expected), 1e-9);
}

TEST(Derivative, RejectsNonPositiveExpertCount) {
  EXPECT_THROW(ds_de(dims(1, 1, 1), 0.0), DomainError);
  EXPECT_THROW(ds_de(dims(1, 1, 1), -2.0), DomainError);
}

TEST(ReductionFactors, DerivedAndLiteralForms) {
  {
    const ReductionFactors f = reduction_factors(dims(2, 2, 4));
    EXPECT_LE(oracle::rel_err(f.qkv_derived, 8.0 / 9.0), 1e-15);
    EXPECT_LE(oracle::rel_err(f.qkv_literal, 32.0 / 27.0), 1e-15);
    EXPECT_LE(oracle::rel_err(f.attn_derived, 8.0 / 9.0), 1e-15);
    EXPECT_EQ(f.attn_literal, 8.0 / 50.0);  // 0.16 at L = 2
  }
  {
    // sectional projections double the traditional work at E=1
    const ReductionFactors f = reduction_factors(dims(2, 1, 4));
    EXPECT_EQ(f.qkv_derived, 0.5);
  }
  {
    const ReductionFactors f =
        reduction_factors(dims(2, 2, 4, 0.0, Convention::paper_literal));
    EXPECT_LE(oracle::rel_err(f.attn_derived, 8.0 / 18.0), 1e-15);
  }
  // derived qkv ratio is the quotient of the component costs
  Prng rng(4);
  for (int i = 0; i < 10; ++i) {
    const ModelDims d = dims(1 + rng.next_u64() % 8, 1 + rng.next_u64() % 8,
                             1 + rng.next_u64() % 16);
    const ReductionFactors f = reduction_factors(d);
    auto [a_trad, r_trad] = traditional_costs(d);
    (void)r_trad;
    const QkvCosts q = sectional_qkv_costs(d);
    EXPECT_LE(oracle::rel_err(f.qkv_derived, a_trad / q.total), 1e-12);
  }
}

TEST(Optimizer, KnownMinimumAndScan) {
  const OptResult res = optimize_experts(dims(2, 2, 4, 1.0), 1, 16);
  EXPECT_EQ(res.e_opt_int, 1);
  EXPECT_EQ(res.s_at_opt, 257.0);
  EXPECT_GE(res.e_opt_cont, 1.0);
  EXPECT_LE(res.e_opt_cont, 2.0);
  // the continuous optimum is interior here, so the derivative must vanish
  EXPECT_TRUE(res.interior);
  EXPECT_LE(std::abs(res.derivative_at_opt),
            1e-6 * ds_de_scale(dims(2, 2, 4, 1.0), res.e_opt_cont));
}

TEST(Optimizer, HugeAlphaPinsMinimumAtOne) {
  const OptResult res = optimize_experts(dims(2, 2, 4, 1e12), 1, 16);
  EXPECT_EQ(res.e_opt_int, 1);
}

TEST(Optimizer, DegenerateRange) {
  const OptResult res = optimize_experts(dims(2, 2, 4, 1.0), 3, 3);
  EXPECT_EQ(res.e_opt_int, 3);
  EXPECT_EQ(res.s_at_opt, s_of_e(dims(2, 2, 4, 1.0), 3.0));
}

TEST(Optimizer, MatchesIndependentBruteForce) {
  Prng rng(5);
  for (int i = 0; i < 10; ++i) {
    const double l = 1 + rng.next_u64() % 8;
    const double d0 = 2 + rng.next_u64() % 31;
    const double alpha = 20.0 * rng.uniform01();
    const ModelDims d = dims(l, 1, d0, alpha);

    long long best_e = 1;
    double best_s = oracle::ref_total_cost(l, 1.0, d0, alpha);
    for (long long e = 2; e <= 64; ++e) {
      const double s = oracle::ref_total_cost(l, static_cast<double>(e), d0,
                                              alpha);
      if (s < best_s) {
        best_s = s;
        best_e = e;
      }
    }
    const OptResult res = optimize_experts(d, 1, 64);
    EXPECT_EQ(res.e_opt_int, best_e) << "sample " << i;
    EXPECT_LE(oracle::rel_err(res.s_at_opt, best_s), 1e-12);
  }
}

TEST(Optimizer, ContinuousConsistentWithDenseScanAndIntegerResult) {
  Prng rng(6);
  for (int i = 0; i < 5; ++i) {
    const ModelDims d = dims(1 + rng.next_u64() % 6, 1, 2 + rng.next_u64() % 15,
                             5.0 * rng.uniform01());
    const OptResult res = optimize_experts(d, 1, 32);

    // dense scan at 1e-3 resolution
    double best_e = 1.0, best_s = s_of_e(d, 1.0);
    for (double e = 1.0; e <= 32.0 + 1e-9; e += 1e-3) {
      const double s = s_of_e(d, e);
      if (s < best_s) {
        best_s = s;
        best_e = e;
      }
    }
    EXPECT_LE(std::abs(res.e_opt_cont - best_e), 2e-3) << "sample " << i;

    const double fl = std::max(1.0, std::floor(res.e_opt_cont));
    const double ce = std::min(32.0, std::ceil(res.e_opt_cont));
    EXPECT_TRUE(res.e_opt_int == static_cast<long long>(fl) ||
                res.e_opt_int == static_cast<long long>(ce))
        << "cont " << res.e_opt_cont << " int " << res.e_opt_int;
  }
}

TEST(Optimizer, RejectsEmptyOrInvalidRange) {
  EXPECT_THROW(optimize_experts(dims(1, 1, 1), 5, 4), ConfigError);
  EXPECT_THROW(optimize_experts(dims(1, 1, 1), 0, 4), ConfigError);
}

TEST(Sweep, RowsMatchTotalCost) {
  const ModelDims d = dims(2, 1, 4, 1.0);
  {
    const std::vector<double> es = {1.0};
    const auto rows = sweep(d, es);
    ASSERT_EQ(rows.size(), 1u);
    EXPECT_EQ(rows[0].s_total, 257.0);
  }
  {
    const std::vector<double> es = {2.0, 2.0};
    const auto rows = sweep(d, es);
    ASSERT_EQ(rows.size(), 2u);
    EXPECT_EQ(rows[0].s_total, rows[1].s_total);
    EXPECT_EQ(rows[0].s_total, 292.0);
  }
  {
    const std::vector<double> es = {1.0, 2.0};
    const auto rows = sweep(d, es);
    EXPECT_EQ(rows[0].s_total, 257.0);
    EXPECT_EQ(rows[1].s_total, 292.0);
  }
  const std::vector<double> bad = {2.0, 0.5};
  try {
    (void)sweep(d, bad);
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("0.5"), std::string::npos);
  }
}

TEST(ModelDims, Validation) {
  EXPECT_THROW(dims(0, 1, 1).validate(), ConfigError);
  EXPECT_THROW(dims(1, 1, -3).validate(), ConfigError);
  ModelDims d = dims(1, 1, 1);
  d.alpha = -1.0;
  EXPECT_THROW(d.validate(), ConfigError);
}

}  // namespace
