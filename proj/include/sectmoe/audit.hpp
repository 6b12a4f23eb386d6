#pragma once

// Measurement audit: runs instrumented forward passes of the sectional and
// traditional architectures with per-stage counters and compares the
// category tallies against the analytic predictions, row by row. Projection
// and score categories must match with integer equality; output projections,
// FFNs, pooling, residuals and the aggregation layer are measured and
// reported but excluded from pass/fail since the score/projection model has
// no slot for them.

#include <cstdint>
#include <cstdio>
#include <string>
#include <vector>

#include "sectmoe/cost_model.hpp"
#include "sectmoe/sectional.hpp"
#include "sectmoe/traditional.hpp"

namespace sectmoe {

struct AuditRow {
  std::string equation;
  std::uint64_t predicted = 0;
  std::uint64_t measured = 0;
  bool match = false;
  bool required = false;
  std::string note;
};

struct AuditReport {
  std::vector<AuditRow> rows;
  bool overall_pass = true;

  void add(std::string equation, std::uint64_t predicted,
           std::uint64_t measured, bool required, std::string note) {
    AuditRow row{std::move(equation), predicted, measured,
                 predicted == measured, required, std::move(note)};
    if (required && !row.match) overall_pass = false;
    rows.push_back(std::move(row));
  }
};

namespace detail {

inline void check_dims_match(const SectionalConfig& cfg,
                             const ModelDims& dims) {
  auto same = [](double a, std::size_t b) {
    return a == static_cast<double>(b);
  };
  if (!same(dims.tokens_per_expert, cfg.tokens_per_expert) ||
      !same(dims.experts, cfg.experts) || !same(dims.d0, cfg.d0) ||
      !same(dims.heads_pre, cfg.heads_pre) ||
      !same(dims.heads_exp, cfg.heads_exp)) {
    throw ConfigError("audit: model dims do not mirror the sectional config");
  }
}

}  // namespace detail

// Audits one sectional forward pass against the component cost formulas.
// Requires the on-model reduction ratio r = E^2 so the expert rows have
// exactly L/E tokens.
inline AuditReport audit_sectional(const SectionalConfig& cfg,
                                   const ModelDims& dims) {
  cfg.validate();
  detail::check_dims_match(cfg, dims);
  if (!cfg.on_model()) {
    throw ConfigError(
        "audit_sectional: reduction ratio r = " + std::to_string(cfg.r()) +
        " is off-model; the cost formulas assume r = E^2 = " +
        std::to_string(cfg.experts * cfg.experts) +
        " (expert input of L/E rows)");
  }

  const std::uint64_t e = cfg.experts;
  const std::uint64_t l = cfg.tokens_per_expert;
  const std::uint64_t d = cfg.d0;
  const std::uint64_t el = e * l;
  const std::uint64_t l_red = cfg.l_reduced();
  const std::uint64_t slice = cfg.d_slice();
  const std::uint64_t dff_pre = cfg.ffn_mult_pre * d;
  const std::uint64_t dff_exp = cfg.ffn_mult_expert * slice;
  const std::uint64_t dff_agg = cfg.ffn_mult_agg * d;

  SectionalParams params = init_sectional_params(cfg);
  Prng rng(cfg.seed ^ 0xa0d17ull);
  Tensor x = random_normal({el, d}, rng);

  OpCounter pre_counter, expert_counter, agg_counter;
  Tensor z = pre_expert_block(pre_counter, x, params.pre_layer, cfg);
  std::vector<Tensor> slices = split_embedding(z, cfg.experts);
  std::vector<Tensor> outs(cfg.experts);
  for (std::size_t i = 0; i < cfg.experts; ++i) {
    outs[i] = expert_block_forward(expert_counter, slices[i],
                                   params.expert_layers[i], cfg.causal);
  }
  (void)aggregate(agg_counter, outs, params.agg_layer, cfg.causal);

  AuditReport report;
  report.add("sectional pre-block qkv", 3 * el * d * d,
             pre_counter.count(Category::Qkv), true,
             "3*E*L*d0^2; required");
  report.add("sectional expert qkv total", e * 3 * l_red * slice * slice,
             expert_counter.count(Category::Qkv), true,
             "3*L*d0^2/E^2; required");
  report.add("sectional pre-block attn scores", 2 * el * el * d,
             pre_counter.count(Category::AttnScores), true,
             "2*(E*L)^2*d0; required");
  report.add("sectional expert attn scores total",
             e * 2 * l_red * l_red * slice,
             expert_counter.count(Category::AttnScores), true,
             "2*L^2*d0/E^2; required");

  report.add("sectional pooling adds", el * d,
             pre_counter.count(Category::Pooling), false,
             "E*L*d0 adds; informational");
  report.add("sectional pre-block ffn", 2 * el * d * dff_pre,
             pre_counter.count(Category::Ffn), false,
             "2*E*L*d0*dff_pre; informational");
  report.add("sectional expert ffn total", e * 2 * l_red * slice * dff_exp,
             expert_counter.count(Category::Ffn), false,
             "informational");
  report.add("sectional pre-block out-proj and residuals",
             el * d * d + 2 * el * d, pre_counter.count(Category::Other),
             false, "output projection excluded from the projection model");
  report.add("sectional expert out-proj and residuals",
             e * (l_red * slice * slice + 2 * l_red * slice),
             expert_counter.count(Category::Other), false, "informational");
  report.add("sectional aggregation layer total",
             4 * l_red * d * d + 2 * l_red * l_red * d +
                 2 * l_red * d * dff_agg + 2 * l_red * d,
             agg_counter.count(Category::Aggregation), false,
             "aggregation has no slot in the component model");
  return report;
}

// Audits the traditional design with a forced uniform routing realization:
// expert e receives exactly L contiguous tokens and runs a full-width
// transformer layer on them. The gate is not run (router tally stays 0).
inline AuditReport audit_traditional(const ModelDims& dims,
                                     std::size_t ffn_mult = 4,
                                     std::uint64_t seed = 1) {
  dims.validate();
  auto integral = [](double v) {
    return v >= 1 && v == std::floor(v);
  };
  if (!integral(dims.tokens_per_expert) || !integral(dims.experts) ||
      !integral(dims.d0)) {
    throw ConfigError("audit_traditional: L, E, d0 must be integers");
  }
  const std::uint64_t e = static_cast<std::uint64_t>(dims.experts);
  const std::uint64_t l = static_cast<std::uint64_t>(dims.tokens_per_expert);
  const std::uint64_t d = static_cast<std::uint64_t>(dims.d0);
  const std::uint64_t dff = ffn_mult * d;

  Prng rng(seed ^ 0x72adull);
  Tensor x = random_normal({e * l, d}, rng);
  RoutingAssignment assignment = uniform_assignment(e * l, e);

  OpCounter counter;
  Prng param_rng(seed ^ 0x9127ull);
  for (std::uint64_t expert = 0; expert < e; ++expert) {
    LayerParams layer = init_layer_params(d, 1, dff, param_rng);
    Tensor batch({l, d});
    for (std::uint64_t i = 0; i < l; ++i)
      for (std::uint64_t j = 0; j < d; ++j)
        batch.at(i, j) = x.at(expert * l + i, j);
    (void)transformer_layer(counter, batch, layer);
  }

  AuditReport report;
  report.add("traditional expert qkv total", e * l * 3 * d * d,
             counter.count(Category::Qkv), true, "E*L*3*d0^2; required");
  report.add("traditional attn scores (consistent)", 2 * e * l * l * d,
             counter.count(Category::AttnScores), true,
             "both score steps counted; required");
  report.add("traditional attn scores (single-step literal)", e * l * l * d,
             counter.count(Category::AttnScores), false,
             "E*L^2*d0 literal form; expected mismatch with measurement");
  report.add("traditional expert ffn total", e * 2 * l * d * dff,
             counter.count(Category::Ffn), false, "informational");
  report.add("traditional out-proj and residuals", e * (l * d * d + 2 * l * d),
             counter.count(Category::Other), false, "informational");
  report.add("traditional router", 0, counter.count(Category::Router), false,
             "forced uniform assignment; gate not run");
  return report;
}

inline AuditReport merge(const AuditReport& a, const AuditReport& b) {
  AuditReport out = a;
  out.rows.insert(out.rows.end(), b.rows.begin(), b.rows.end());
  out.overall_pass = a.overall_pass && b.overall_pass;
  return out;
}

inline std::string render_text(const AuditReport& report) {
  std::string out;
  char line[256];
  std::snprintf(line, sizeof(line), "%-44s %14s %14s %-6s %s\n", "equation",
                "predicted", "measured", "match", "note");
  out += line;
  for (const AuditRow& r : report.rows) {
    std::snprintf(line, sizeof(line), "%-44s %14llu %14llu %-6s %s\n",
                  r.equation.c_str(),
                  static_cast<unsigned long long>(r.predicted),
                  static_cast<unsigned long long>(r.measured),
                  r.match ? "true" : "false", r.note.c_str());
    out += line;
  }
  out += report.overall_pass ? "overall: PASS\n" : "overall: FAIL\n";
  return out;
}

inline std::string render_csv(const AuditReport& report) {
  std::string out = "equation,predicted,measured,match,note\n";
  char line[256];
  for (const AuditRow& r : report.rows) {
    std::snprintf(line, sizeof(line), "%s,%llu,%llu,%s,%s\n",
                  r.equation.c_str(),
                  static_cast<unsigned long long>(r.predicted),
                  static_cast<unsigned long long>(r.measured),
                  r.match ? "true" : "false", r.note.c_str());
    out += line;
  }
  return out;
}

}  // namespace sectmoe
