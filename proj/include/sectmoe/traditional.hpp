#pragma once

// Baseline token-routed mixture of experts: softmax gating with top-k
// selection, capacity-limited dispatch, full-width expert FFNs, weighted
// combination with a residual path, and routing statistics.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <utility>
#include <vector>

#include "sectmoe/blocks.hpp"

namespace sectmoe {

struct TokenRoute {
  std::size_t expert = 0;
  double weight = 0.0;
  bool dropped = false;  // set when dispatch exceeds the expert's capacity
};

struct RoutingAssignment {
  std::size_t num_experts = 0;
  std::size_t k = 0;
  // per token, `k` routes sorted by expert index
  std::vector<std::vector<TokenRoute>> per_token;

  std::size_t num_tokens() const { return per_token.size(); }
};

struct RoutingStats {
  std::vector<std::uint64_t> tokens_per_expert;
  double coefficient_of_variation = 0.0;
  double entropy = 0.0;  // nats
  std::uint64_t overflow_count = 0;
};

// logits = X.Wg (tallied under `router`); per token the k largest logits are
// selected (ties broken toward the lower expert index) and renormalized with
// a softmax over the selected entries.
inline RoutingAssignment gate(OpCounter& counter, const Tensor& x,
                              const Tensor& w_gate, std::size_t k) {
  if (x.rank() != 2 || w_gate.rank() != 2 || w_gate.dim(0) != x.dim(1)) {
    throw DimensionError("gate: input " + x.shape_str() +
                         " incompatible with gate weights " +
                         w_gate.shape_str());
  }
  const std::size_t experts = w_gate.dim(1);
  if (k < 1 || k > experts) {
    throw ConfigError("gate: k = " + std::to_string(k) +
                      " out of range [1, " + std::to_string(experts) + "]");
  }
  Tensor logits = matmul(counter, x, w_gate, Category::Router);

  RoutingAssignment assignment;
  assignment.num_experts = experts;
  assignment.k = k;
  assignment.per_token.resize(x.dim(0));
  std::vector<std::size_t> order(experts);
  for (std::size_t t = 0; t < x.dim(0); ++t) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) {
                       return logits.at(t, a) > logits.at(t, b);
                     });
    std::vector<std::size_t> selected(order.begin(), order.begin() + k);
    std::sort(selected.begin(), selected.end());

    double mx = logits.at(t, selected[0]);
    for (std::size_t e : selected) mx = std::max(mx, logits.at(t, e));
    double sum = 0.0;
    std::vector<double> expd(k);
    for (std::size_t i = 0; i < k; ++i) {
      expd[i] = std::exp(logits.at(t, selected[i]) - mx);
      sum += expd[i];
    }
    auto& routes = assignment.per_token[t];
    routes.reserve(k);
    for (std::size_t i = 0; i < k; ++i) {
      routes.push_back({selected[i], expd[i] / sum, false});
    }
  }
  return assignment;
}

// Counts, coefficient of variation (population std / mean, 0 for an empty
// tally) and empirical routing entropy in nats, over non-dropped routes.
inline RoutingStats routing_stats(const RoutingAssignment& assignment,
                                  std::size_t experts) {
  if (experts == 0 || (assignment.num_experts != 0 &&
                       assignment.num_experts != experts)) {
    throw ConfigError("routing_stats: expert count mismatch");
  }
  RoutingStats stats;
  stats.tokens_per_expert.assign(experts, 0);
  for (const auto& routes : assignment.per_token) {
    for (const TokenRoute& r : routes) {
      if (r.dropped) {
        ++stats.overflow_count;
      } else {
        ++stats.tokens_per_expert[r.expert];
      }
    }
  }
  const double n = static_cast<double>(experts);
  double total = 0.0;
  for (std::uint64_t c : stats.tokens_per_expert)
    total += static_cast<double>(c);
  const double mean = total / n;
  if (mean > 0.0) {
    double var = 0.0;
    for (std::uint64_t c : stats.tokens_per_expert) {
      const double d = static_cast<double>(c) - mean;
      var += d * d;
    }
    var /= n;
    stats.coefficient_of_variation = std::sqrt(var) / mean;
    for (std::uint64_t c : stats.tokens_per_expert) {
      if (c == 0) continue;
      const double p = static_cast<double>(c) / total;
      stats.entropy -= p * std::log(p);
    }
  }
  return stats;
}

// Capacity per expert: ceil(capacity_factor * k * T / E). Tokens are
// dispatched in token order; routes beyond capacity are dropped and their
// tokens keep only the residual contribution. capacity_factor = 0 is allowed
// as the starvation limit (everything dropped).
inline std::pair<Tensor, RoutingStats> dispatch_combine(
    OpCounter& counter, const Tensor& x, RoutingAssignment& assignment,
    std::span<const FfnParams> experts, double capacity_factor) {
  const std::size_t t_count = x.dim(0);
  const std::size_t e_count = experts.size();
  if (assignment.num_experts != e_count ||
      assignment.num_tokens() != t_count) {
    throw ConfigError("dispatch_combine: assignment does not match input or "
                      "expert list");
  }
  if (capacity_factor < 0.0) {
    throw ConfigError("dispatch_combine: capacity_factor must be >= 0");
  }
  const std::uint64_t capacity =
      capacity_factor == 0.0
          ? 0
          : static_cast<std::uint64_t>(
                std::ceil(capacity_factor *
                          static_cast<double>(assignment.k * t_count) /
                          static_cast<double>(e_count)));

  // Capacity pass, in token order.
  std::vector<std::uint64_t> used(e_count, 0);
  std::vector<std::vector<std::size_t>> expert_tokens(e_count);
  for (std::size_t t = 0; t < t_count; ++t) {
    for (TokenRoute& r : assignment.per_token[t]) {
      if (used[r.expert] < capacity) {
        ++used[r.expert];
        r.dropped = false;
        expert_tokens[r.expert].push_back(t);
      } else {
        r.dropped = true;
      }
    }
  }

  // Residual path, then weighted expert contributions.
  Tensor out = x;
  for (std::size_t e = 0; e < e_count; ++e) {
    const auto& tokens = expert_tokens[e];
    if (tokens.empty()) continue;
    Tensor batch({tokens.size(), x.dim(1)});
    for (std::size_t i = 0; i < tokens.size(); ++i)
      for (std::size_t j = 0; j < x.dim(1); ++j)
        batch.at(i, j) = x.at(tokens[i], j);
    Tensor y = ffn_forward(counter, batch, experts[e]);
    for (std::size_t i = 0; i < tokens.size(); ++i) {
      const std::size_t t = tokens[i];
      double weight = 0.0;
      for (const TokenRoute& r : assignment.per_token[t]) {
        if (r.expert == e && !r.dropped) weight = r.weight;
      }
      for (std::size_t j = 0; j < x.dim(1); ++j)
        out.at(t, j) += weight * y.at(i, j);
    }
  }
  out.ensure_finite("dispatch_combine");
  return {std::move(out), routing_stats(assignment, e_count)};
}

inline std::pair<Tensor, RoutingStats> traditional_forward(
    OpCounter& counter, const Tensor& x, const Tensor& w_gate,
    std::span<const FfnParams> experts, std::size_t k,
    double capacity_factor) {
  RoutingAssignment assignment = gate(counter, x, w_gate, k);
  return dispatch_combine(counter, x, assignment, experts, capacity_factor);
}

inline std::vector<FfnParams> init_expert_ffns(std::size_t experts,
                                               std::size_t d0,
                                               std::size_t d_ff,
                                               std::uint64_t seed) {
  Prng rng(seed);
  std::vector<FfnParams> out;
  out.reserve(experts);
  for (std::size_t e = 0; e < experts; ++e)
    out.push_back(init_ffn_params(d0, d_ff, rng));
  return out;
}

// Forced routing realization where expert e receives exactly the contiguous
// tokens [e*L, (e+1)*L) with weight 1. Used by the measurement audits.
inline RoutingAssignment uniform_assignment(std::size_t num_tokens,
                                            std::size_t experts) {
  if (experts == 0 || num_tokens % experts != 0) {
    throw ConfigError("uniform_assignment: token count " +
                      std::to_string(num_tokens) + " not divisible by " +
                      std::to_string(experts) + " experts");
  }
  const std::size_t per = num_tokens / experts;
  RoutingAssignment a;
  a.num_experts = experts;
  a.k = 1;
  a.per_token.resize(num_tokens);
  for (std::size_t t = 0; t < num_tokens; ++t) {
    a.per_token[t].push_back({t / per, 1.0, false});
  }
  return a;
}

}  // namespace sectmoe
