#pragma once

// Analytic operation-count model for the sectional architecture: projection
// (QKV) and attention-score costs for the traditional and sectional designs,
// reduction factors, the total system cost S(E) with quadratic coordination
// overhead, its derivative in E, and numeric optimal-expert-count solving.
//
// Two tally conventions coexist for the traditional attention term:
//   consistent    - both score steps (QK^T and weighting V) are counted,
//                   2 E L^2 d0, matching what an instrumented forward measures
//   paper_literal - the single-step total L^2 d0 per expert kept verbatim
//                   from the published closed forms for comparison
// The derived reduction ratios follow from the component costs; the *_literal
// closed forms are reported alongside but never drive any decision.

#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "sectmoe/tensor.hpp"

namespace sectmoe {

enum class Convention { consistent, paper_literal };

inline const char* convention_name(Convention c) {
  return c == Convention::consistent ? "consistent" : "paper_literal";
}

struct ModelDims {
  double tokens_per_expert = 1;  // L
  double experts = 1;            // E (real-valued for continuous analysis)
  double d0 = 1;
  double heads_pre = 1;
  double heads_exp = 1;
  double alpha = 0.0;  // coordination cost coefficient (per expert-pair unit)
  Convention convention = Convention::consistent;

  void validate() const {
    if (!(tokens_per_expert > 0) || !(experts > 0) || !(d0 > 0) ||
        !(heads_pre >= 1) || !(heads_exp >= 1)) {
      throw ConfigError("model dims: L, E, d0 must be positive and head "
                        "counts >= 1");
    }
    if (!(alpha >= 0)) throw ConfigError("model dims: alpha must be >= 0");
  }

  ModelDims with_experts(double e) const {
    ModelDims d = *this;
    d.experts = e;
    return d;
  }
};

struct CostBreakdown {
  double a_trad = 0, r_trad = 0;
  double a_pre = 0, a_experts = 0, a_total = 0;
  double r_pre = 0, r_experts = 0, r_total = 0;
  double overhead = 0, s_total = 0;
};

struct QkvCosts {
  double pre = 0, experts = 0, total = 0;
};
struct AttnCosts {
  double pre = 0, experts = 0, total = 0;
};

struct ReductionFactors {
  double qkv_derived = 0;   // component ratio: E^3 / (E^3 + 1)
  double attn_derived = 0;  // component ratio under the active convention
  double qkv_literal = 0;   // closed form E^5 / (3 (E^3 + 1))
  double attn_literal = 0;  // closed form E^3 / (2 + 3 E^3 L)
};

struct OptResult {
  long long e_opt_int = 0;
  double s_at_opt = 0;
  double e_opt_cont = 0;
  double s_at_cont = 0;
  double derivative_at_opt = 0;
  double bracket_lo = 0, bracket_hi = 0;
  bool interior = false;  // continuous minimum bracketed inside the range
};

// Traditional MoE, all E experts active: projections 3 E L d0^2 and scores
// 2 E L^2 d0 (consistent) or E L^2 d0 (paper_literal).
inline std::pair<double, double> traditional_costs(const ModelDims& dims) {
  dims.validate();
  const double l = dims.tokens_per_expert, e = dims.experts, d = dims.d0;
  const double a = e * l * 3.0 * d * d;
  const double r = dims.convention == Convention::consistent
                       ? 2.0 * e * l * l * d
                       : e * l * l * d;
  return {a, r};
}

// Sectional projections: full-width pre block over E L tokens plus E experts
// at width d0/E over L/E rows each.
inline QkvCosts sectional_qkv_costs(const ModelDims& dims) {
  dims.validate();
  const double l = dims.tokens_per_expert, e = dims.experts, d = dims.d0;
  QkvCosts c;
  c.pre = 3.0 * e * l * d * d;
  c.experts = 3.0 * l * d * d / (e * e);
  c.total = c.pre + c.experts;  // equals 3 L d0^2 (E^3 + 1) / E^2
  return c;
}

// Per-head-square variant with distinct head counts. Note this contradicts
// standard multi-head projections (whose cost is head-count independent);
// audits use the standard convention, this is exposed for comparison.
inline QkvCosts sectional_qkv_costs_heads(const ModelDims& dims) {
  dims.validate();
  const double l = dims.tokens_per_expert, e = dims.experts, d = dims.d0;
  QkvCosts c;
  c.pre = 3.0 * e * l * d * d / dims.heads_pre;
  c.experts = 3.0 * l * d * d / (e * e * dims.heads_exp);
  c.total = c.pre + c.experts;
  return c;
}

// Sectional attention scores. The pre term is the linear-in-E form used by
// the total-cost model; an instrumented pre block actually measures
// 2 (E L)^2 d0 (see the audit module, which predicts that form).
inline AttnCosts sectional_attn_costs(const ModelDims& dims) {
  dims.validate();
  const double l = dims.tokens_per_expert, e = dims.experts, d = dims.d0;
  AttnCosts c;
  c.pre = 2.0 * e * l * l * d;
  c.experts = 2.0 * l * l * d / (e * e);
  c.total = c.pre + c.experts;
  return c;
}

// Coordination overhead alpha E^2.
inline double overhead_cost(double experts, double alpha) {
  if (!(experts >= 1)) throw DomainError("overhead_cost: E must be >= 1");
  if (!(alpha >= 0)) throw ConfigError("overhead_cost: alpha must be >= 0");
  return alpha * experts * experts;
}

// Pairwise derivation of the quadratic overhead: E per-expert costs plus
// c_pair/2 * E (E-1) pairwise interactions; the ratio to (c_pair/2) E^2
// approaches 1 as E grows.
inline double pairwise_overhead(double experts, double c_e, double c_pair) {
  if (!(experts >= 1)) throw DomainError("pairwise_overhead: E must be >= 1");
  if (!(c_e >= 0) || !(c_pair >= 0)) {
    throw ConfigError("pairwise_overhead: coefficients must be >= 0");
  }
  return experts * c_e + 0.5 * c_pair * experts * (experts - 1.0);
}

// S(E) = 3 L d0^2 (E^3 + 1)/E^2 + 2 E L^2 d0 + 2 L^2 d0 / E^2 + alpha E^2,
// assembled from the component operations so the breakdown identities hold.
inline CostBreakdown total_cost(const ModelDims& dims) {
  dims.validate();
  CostBreakdown b;
  auto [at, rt] = traditional_costs(dims);
  b.a_trad = at;
  b.r_trad = rt;
  const QkvCosts q = sectional_qkv_costs(dims);
  b.a_pre = q.pre;
  b.a_experts = q.experts;
  b.a_total = q.total;
  const AttnCosts r = sectional_attn_costs(dims);
  b.r_pre = r.pre;
  b.r_experts = r.experts;
  b.r_total = r.total;
  b.overhead = overhead_cost(dims.experts, dims.alpha);
  b.s_total = b.a_total + b.r_total + b.overhead;
  return b;
}

inline double s_of_e(const ModelDims& dims, double e) {
  return total_cost(dims.with_experts(e)).s_total;
}

// dS/dE = 3 L d0^2 (1 - 2/E^3) + 2 L^2 d0 - 4 L^2 d0 / E^3 + 2 alpha E.
// This is the exact derivative of S(E); it is verified against central
// finite differences in the tests.
inline double ds_de(const ModelDims& dims, double e) {
  dims.validate();
  if (!(e > 0)) throw DomainError("ds_de: E must be positive");
  const double l = dims.tokens_per_expert, d = dims.d0;
  const double e3 = e * e * e;
  return 3.0 * l * d * d * (1.0 - 2.0 / e3) + 2.0 * l * l * d -
         4.0 * l * l * d / e3 + 2.0 * dims.alpha * e;
}

// As-published derivative variant with a 1/E^4 first correction term. It is
// NOT the derivative of S(E) (the finite-difference check fails); kept only
// so the discrepancy stays demonstrable.
inline double ds_de_literal(const ModelDims& dims, double e) {
  dims.validate();
  if (!(e > 0)) throw DomainError("ds_de_literal: E must be positive");
  const double l = dims.tokens_per_expert, d = dims.d0;
  const double e3 = e * e * e;
  const double e4 = e3 * e;
  return 3.0 * l * d * d * (1.0 - 2.0 / e4) + 2.0 * l * l * d -
         4.0 * l * l * d / e3 + 2.0 * dims.alpha * e;
}

// Derived ratios are literal traditional/sectional quotients of the
// component costs; the closed forms are evaluated verbatim alongside.
inline ReductionFactors reduction_factors(const ModelDims& dims) {
  dims.validate();
  const double l = dims.tokens_per_expert, e = dims.experts;
  const double e3 = e * e * e;
  ReductionFactors f;
  f.qkv_derived = e3 / (e3 + 1.0);
  f.attn_derived = dims.convention == Convention::consistent
                       ? e3 / (e3 + 1.0)
                       : e3 / (2.0 * (e3 + 1.0));
  f.qkv_literal = e3 * e * e / (3.0 * (e3 + 1.0));
  f.attn_literal = e3 / (2.0 + 3.0 * e3 * l);
  return f;
}

// Exhaustive integer argmin over [e_min, e_max] (ties toward smaller E),
// plus a continuous minimizer: bracket a sign change of dS/dE on a geometric
// grid, then shrink with golden-section minimization of S until the interval
// is below 1e-9 relative.
inline OptResult optimize_experts(const ModelDims& dims, long long e_min,
                                  long long e_max) {
  dims.validate();
  if (e_min < 1 || e_min > e_max || e_max > (1LL << 20)) {
    throw ConfigError("optimize_experts: invalid range [" +
                      std::to_string(e_min) + ", " + std::to_string(e_max) +
                      "]");
  }

  OptResult res;
  res.e_opt_int = e_min;
  res.s_at_opt = s_of_e(dims, static_cast<double>(e_min));
  for (long long e = e_min + 1; e <= e_max; ++e) {
    const double s = s_of_e(dims, static_cast<double>(e));
    if (s < res.s_at_opt) {
      res.s_at_opt = s;
      res.e_opt_int = e;
    }
  }

  const double lo = static_cast<double>(e_min);
  const double hi = static_cast<double>(e_max);
  double a = lo, b = hi;
  res.interior = false;
  if (lo == hi) {
    a = b = lo;
  } else {
    double prev = lo, dprev = ds_de(dims, lo);
    if (dprev >= 0.0) {
      // S is already rising at the left edge; minimum sits there.
      a = b = lo;
    } else {
      bool bracketed = false;
      double x = lo;
      while (x < hi) {
        x = std::min(hi, std::max(x * 1.25, x + 1e-6));
        const double dx = ds_de(dims, x);
        if (dprev < 0.0 && dx >= 0.0) {
          a = prev;
          b = x;
          bracketed = true;
          break;
        }
        prev = x;
        dprev = dx;
      }
      if (bracketed) {
        res.interior = true;
      } else {
        // derivative stays negative across the range: minimum at the right edge
        a = b = hi;
      }
    }
  }
  res.bracket_lo = a;
  res.bracket_hi = b;

  if (a < b) {
    // golden-section shrink of [a, b] on S
    constexpr double kInvPhi = 0.6180339887498949;
    double x1 = b - kInvPhi * (b - a);
    double x2 = a + kInvPhi * (b - a);
    double f1 = s_of_e(dims, x1);
    double f2 = s_of_e(dims, x2);
    while (b - a > 1e-9 * std::max(1.0, 0.5 * (a + b))) {
      if (f1 <= f2) {
        b = x2;
        x2 = x1;
        f2 = f1;
        x1 = b - kInvPhi * (b - a);
        f1 = s_of_e(dims, x1);
      } else {
        a = x1;
        x1 = x2;
        f1 = f2;
        x2 = a + kInvPhi * (b - a);
        f2 = s_of_e(dims, x2);
      }
    }
  }
  res.e_opt_cont = 0.5 * (a + b);
  res.s_at_cont = s_of_e(dims, res.e_opt_cont);
  res.derivative_at_opt = ds_de(dims, res.e_opt_cont);
  return res;
}

// Magnitude scale of the derivative terms, for relative residual checks.
inline double ds_de_scale(const ModelDims& dims, double e) {
  const double l = dims.tokens_per_expert, d = dims.d0;
  const double e3 = e * e * e;
  return 3.0 * l * d * d * (1.0 + 2.0 / e3) + 2.0 * l * l * d +
         4.0 * l * l * d / e3 + 2.0 * dims.alpha * e;
}

inline std::vector<CostBreakdown> sweep(const ModelDims& dims,
                                        std::span<const double> e_values) {
  dims.validate();
  if (e_values.empty()) throw ConfigError("sweep: empty expert-count list");
  std::vector<CostBreakdown> rows;
  rows.reserve(e_values.size());
  for (double e : e_values) {
    if (!(e >= 1.0)) {
      throw ConfigError("sweep: invalid expert count " + std::to_string(e));
    }
    rows.push_back(total_cost(dims.with_experts(e)));
  }
  return rows;
}

}  // namespace sectmoe
