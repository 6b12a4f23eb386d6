#pragma once

// Sectional mixture of experts: a full-width pre-expert transformer layer
// with sequence reduction, an embedding split into E column slices, one
// narrow transformer layer per expert, and a full-width aggregation layer
// over the re-concatenated slices.

#include <cstdint>
#include <future>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "sectmoe/blocks.hpp"

namespace sectmoe {

struct SectionalConfig {
  std::size_t tokens_per_expert = 2;  // L
  std::size_t experts = 2;            // E
  std::size_t d0 = 8;
  std::size_t heads_pre = 1;
  std::size_t heads_exp = 1;
  std::size_t reduction_ratio = 0;  // 0 selects the on-model default E*E
  std::size_t ffn_mult_pre = 4;
  std::size_t ffn_mult_expert = 4;
  std::size_t ffn_mult_agg = 4;
  bool causal = false;
  bool parallel_experts = false;
  std::uint64_t seed = 1;

  std::size_t r() const {
    return reduction_ratio == 0 ? experts * experts : reduction_ratio;
  }
  std::size_t total_tokens() const { return experts * tokens_per_expert; }
  std::size_t l_reduced() const { return total_tokens() / r(); }
  std::size_t d_slice() const { return d0 / experts; }
  // The cost formulas assume the reduction ratio E^2 (expert input L/E rows);
  // other ratios run fine but are off-model for audits.
  bool on_model() const { return r() == experts * experts; }

  void validate() const {
    if (tokens_per_expert == 0 || experts == 0 || d0 == 0) {
      throw ConfigError("sectional config: L, E, d0 must be positive");
    }
    if (d0 % experts != 0) {
      throw ConfigError("sectional config: d0 " + std::to_string(d0) +
                        " not divisible by expert count " +
                        std::to_string(experts));
    }
    if (heads_pre == 0 || d0 % heads_pre != 0) {
      throw ConfigError("sectional config: d0 not divisible by heads_pre");
    }
    if (heads_exp == 0 || d_slice() % heads_exp != 0) {
      throw ConfigError("sectional config: d0/E " + std::to_string(d_slice()) +
                        " not divisible by heads_exp " +
                        std::to_string(heads_exp));
    }
    if (total_tokens() % r() != 0) {
      throw ConfigError("sectional config: token count " +
                        std::to_string(total_tokens()) +
                        " not divisible by reduction ratio " +
                        std::to_string(r()));
    }
    if (l_reduced() == 0) {
      throw ConfigError("sectional config: reduction ratio leaves no rows");
    }
    if (ffn_mult_pre == 0 || ffn_mult_expert == 0 || ffn_mult_agg == 0) {
      throw ConfigError("sectional config: ffn multipliers must be positive");
    }
  }
};

struct SectionalParams {
  LayerParams pre_layer;                 // width d0
  std::vector<LayerParams> expert_layers;  // width d0/E each
  LayerParams agg_layer;                 // width d0
};

inline SectionalParams init_sectional_params(const SectionalConfig& cfg) {
  cfg.validate();
  Prng rng(cfg.seed);
  SectionalParams p;
  p.pre_layer = init_layer_params(cfg.d0, cfg.heads_pre,
                                  cfg.ffn_mult_pre * cfg.d0, rng);
  p.expert_layers.reserve(cfg.experts);
  for (std::size_t e = 0; e < cfg.experts; ++e) {
    p.expert_layers.push_back(init_layer_params(
        cfg.d_slice(), cfg.heads_exp, cfg.ffn_mult_expert * cfg.d_slice(),
        rng));
  }
  p.agg_layer = init_layer_params(cfg.d0, cfg.heads_pre,
                                  cfg.ffn_mult_agg * cfg.d0, rng);
  return p;
}

// ---------------------------------------------------------------------------
// Stage operations (tensor level)
// ---------------------------------------------------------------------------

// Full self-attention over all E*L tokens, then strided mean pooling down to
// L_reduced rows.
inline Tensor pre_expert_block(OpCounter& counter, const Tensor& x,
                               const LayerParams& layer,
                               const SectionalConfig& cfg) {
  cfg.validate();
  if (x.rank() != 2 || x.dim(0) != cfg.total_tokens() || x.dim(1) != cfg.d0) {
    throw ConfigError("pre_expert_block: input " + x.shape_str() +
                      " does not match (E*L, d0) = (" +
                      std::to_string(cfg.total_tokens()) + ", " +
                      std::to_string(cfg.d0) + ")");
  }
  Tensor y = transformer_layer(counter, x, layer,
                               LayerOptions{.causal = cfg.causal});
  return mean_pool_strided(counter, y, cfg.r());
}

// Column partition into E contiguous slices of width d0/E.
inline std::vector<Tensor> split_embedding(const Tensor& z,
                                           std::size_t experts) {
  if (z.rank() != 2 || experts == 0 || z.dim(1) % experts != 0) {
    throw ConfigError("split_embedding: width " +
                      (z.rank() == 2 ? std::to_string(z.dim(1)) : z.shape_str()) +
                      " not divisible by expert count " +
                      std::to_string(experts));
  }
  const std::size_t w = z.dim(1) / experts;
  std::vector<Tensor> slices;
  slices.reserve(experts);
  for (std::size_t e = 0; e < experts; ++e) {
    slices.push_back(slice_cols(z, e * w, (e + 1) * w));
  }
  return slices;
}

// One transformer layer at slice width d0/E.
inline Tensor expert_block_forward(OpCounter& counter, const Tensor& slice,
                                   const LayerParams& layer,
                                   bool causal = false) {
  if (slice.rank() != 2 || slice.dim(1) != layer.width()) {
    throw DimensionError("expert_block_forward: slice " + slice.shape_str() +
                         " does not match expert width " +
                         std::to_string(layer.width()));
  }
  return transformer_layer(counter, slice, layer,
                           LayerOptions{.causal = causal});
}

// Concatenate the expert outputs and run one full-width transformer layer;
// every MAC of that layer is tallied under `aggregation`.
inline Tensor aggregate(OpCounter& counter, std::span<const Tensor> slices,
                        const LayerParams& agg, bool causal = false) {
  if (slices.empty()) throw DimensionError("aggregate: no slices");
  for (const Tensor& s : slices) {
    if (!s.same_shape(slices[0])) {
      throw DimensionError("aggregate: inconsistent slice shapes " +
                           s.shape_str() + " vs " + slices[0].shape_str());
    }
  }
  Tensor merged = concat_cols(slices);
  return transformer_layer(
      counter, merged, agg,
      LayerOptions{.causal = causal, .categories = aggregation_categories()});
}

// ---------------------------------------------------------------------------
// Whole-architecture forward
// ---------------------------------------------------------------------------

inline Tensor sectional_forward(OpCounter& counter, const Tensor& x,
                                const SectionalParams& params,
                                const SectionalConfig& cfg) {
  cfg.validate();
  if (params.expert_layers.size() != cfg.experts) {
    throw ConfigError("sectional_forward: expected " +
                      std::to_string(cfg.experts) + " expert layers, got " +
                      std::to_string(params.expert_layers.size()));
  }
  Tensor z = pre_expert_block(counter, x, params.pre_layer, cfg);
  std::vector<Tensor> slices = split_embedding(z, cfg.experts);
  std::vector<Tensor> outs(cfg.experts);
  if (cfg.parallel_experts && cfg.experts > 1) {
    std::vector<std::future<Tensor>> jobs;
    jobs.reserve(cfg.experts);
    for (std::size_t e = 0; e < cfg.experts; ++e) {
      jobs.push_back(std::async(std::launch::async, [&, e] {
        return expert_block_forward(counter, slices[e],
                                    params.expert_layers[e], cfg.causal);
      }));
    }
    for (std::size_t e = 0; e < cfg.experts; ++e) outs[e] = jobs[e].get();
  } else {
    for (std::size_t e = 0; e < cfg.experts; ++e) {
      outs[e] = expert_block_forward(counter, slices[e],
                                     params.expert_layers[e], cfg.causal);
    }
  }
  return aggregate(counter, outs, params.agg_layer, cfg.causal);
}

// ---------------------------------------------------------------------------
// Graph-level stack for gradient checking
// ---------------------------------------------------------------------------

struct SectionalVars {
  LayerVars pre;
  std::vector<LayerVars> experts;
  LayerVars agg;
};

inline std::vector<Tensor> flatten(const SectionalParams& p) {
  std::vector<Tensor> out = flatten(p.pre_layer);
  for (const LayerParams& e : p.expert_layers) {
    auto t = flatten(e);
    out.insert(out.end(), t.begin(), t.end());
  }
  auto t = flatten(p.agg_layer);
  out.insert(out.end(), t.begin(), t.end());
  return out;
}

inline SectionalVars bind_sectional(std::span<const Var> vars,
                                    const SectionalConfig& cfg,
                                    double eps = 1e-5) {
  const std::size_t expected = kLayerTensorCount * (cfg.experts + 2);
  if (vars.size() != expected) {
    throw DimensionError("bind_sectional: expected " +
                         std::to_string(expected) + " tensors, got " +
                         std::to_string(vars.size()));
  }
  SectionalVars sv;
  sv.pre = bind_layer(vars.subspan(0, kLayerTensorCount), cfg.heads_pre, eps);
  for (std::size_t e = 0; e < cfg.experts; ++e) {
    sv.experts.push_back(bind_layer(
        vars.subspan((1 + e) * kLayerTensorCount, kLayerTensorCount),
        cfg.heads_exp, eps));
  }
  sv.agg = bind_layer(
      vars.subspan((1 + cfg.experts) * kLayerTensorCount, kLayerTensorCount),
      cfg.heads_pre, eps);
  return sv;
}

inline Var sectional_stack(Graph& g, Var x, const SectionalVars& sv,
                           const SectionalConfig& cfg) {
  Var y = transformer_layer(g, x, sv.pre, LayerOptions{.causal = cfg.causal});
  Var z = g.mean_pool_strided(y, cfg.r());
  const std::size_t w = cfg.d_slice();
  std::vector<Var> outs;
  outs.reserve(cfg.experts);
  for (std::size_t e = 0; e < cfg.experts; ++e) {
    Var slice = g.slice_cols(z, e * w, (e + 1) * w);
    outs.push_back(transformer_layer(g, slice, sv.experts[e],
                                     LayerOptions{.causal = cfg.causal}));
  }
  Var merged = cfg.experts == 1 ? outs[0] : g.concat_cols(outs);
  return transformer_layer(
      g, merged, sv.agg,
      LayerOptions{.causal = cfg.causal,
                   .categories = aggregation_categories()});
}

// ---------------------------------------------------------------------------
// Parameter accounting
// ---------------------------------------------------------------------------

struct ComponentParamCount {
  std::uint64_t attention = 0;
  std::uint64_t ffn = 0;
  std::uint64_t layer_norm = 0;
  std::uint64_t total() const { return attention + ffn + layer_norm; }
};

struct ParamCountReport {
  ComponentParamCount pre;
  ComponentParamCount per_expert;
  ComponentParamCount aggregation;
  std::uint64_t expert_count = 0;
  std::uint64_t experts_total() const {
    return per_expert.total() * expert_count;
  }
  std::uint64_t total() const {
    return pre.total() + experts_total() + aggregation.total();
  }
};

inline ComponentParamCount layer_param_count(std::uint64_t width,
                                             std::uint64_t d_ff) {
  ComponentParamCount c;
  c.attention = 4 * width * width;
  c.ffn = width * d_ff + d_ff + d_ff * width + width;
  c.layer_norm = 4 * width;
  return c;
}

inline ParamCountReport param_count(const SectionalConfig& cfg) {
  cfg.validate();
  ParamCountReport r;
  r.pre = layer_param_count(cfg.d0, cfg.ffn_mult_pre * cfg.d0);
  r.per_expert =
      layer_param_count(cfg.d_slice(), cfg.ffn_mult_expert * cfg.d_slice());
  r.aggregation = layer_param_count(cfg.d0, cfg.ffn_mult_agg * cfg.d0);
  r.expert_count = cfg.experts;
  return r;
}

// ---------------------------------------------------------------------------
// Gradient-check suite over every block and the full stack
// ---------------------------------------------------------------------------

struct BlockGradCheck {
  std::string name;
  GradCheckReport report;
};

inline std::vector<BlockGradCheck> run_gradcheck_suite(
    const SectionalConfig& cfg, double h = 1e-5, double tol = 1e-4,
    double adjoint_perturbation = 0.0) {
  cfg.validate();
  Prng rng(cfg.seed ^ 0x5ec7104ull);
  std::vector<BlockGradCheck> results;

  const std::size_t t = cfg.total_tokens();
  const std::size_t d = cfg.d0;
  const Tensor x = random_normal({t, d}, rng);

  auto check = [&](std::string name, const ScalarBuilder& f,
                   std::vector<Tensor> params) {
    results.push_back(
        {std::move(name),
         grad_check(f, params, h, tol, 200, 7, adjoint_perturbation)});
  };

  // linear
  {
    Tensor w = random_matrix(d, d, d, rng);
    Tensor b = random_normal({d}, rng);
    check("linear",
          [x](Graph& g, const std::vector<Var>& vars) {
            return g.sum_all(
                linear(g, g.leaf(x), vars[0], vars[1], Category::Other));
          },
          {w, b});
  }
  // ffn
  {
    FfnParams p = init_ffn_params(d, cfg.ffn_mult_pre * d, rng);
    check("ffn",
          [x](Graph& g, const std::vector<Var>& vars) {
            FfnVars fv{vars[0], vars[1], vars[2], vars[3]};
            return g.sum_all(ffn_forward(g, g.leaf(x), fv));
          },
          {p.w1, p.b1, p.w2, p.b2});
  }
  // attention
  {
    AttentionParams p = init_attention_params(d, cfg.heads_pre, rng);
    const bool causal = cfg.causal;
    check("mha",
          [x, heads = p.heads, causal](Graph& g, const std::vector<Var>& vars) {
            AttentionVars av{vars[0], vars[1], vars[2], vars[3], heads};
            Var in = g.leaf(x);
            return g.sum_all(
                mha_forward(g, in, in, av, MhaOptions{.causal = causal}));
          },
          {p.w_q, p.w_k, p.w_v, p.w_o});
  }
  // full layer
  {
    LayerParams p = init_layer_params(d, cfg.heads_pre,
                                      cfg.ffn_mult_pre * d, rng);
    const bool causal = cfg.causal;
    check("transformer_layer",
          [x, heads = p.attn.heads, eps = p.eps, causal](
              Graph& g, const std::vector<Var>& vars) {
            LayerVars lv = bind_layer(vars, heads, eps);
            return g.sum_all(transformer_layer(
                g, g.leaf(x), lv, LayerOptions{.causal = causal}));
          },
          flatten(p));
  }
  // full sectional stack
  {
    SectionalParams p = init_sectional_params(cfg);
    check("sectional_stack",
          [x, cfg](Graph& g, const std::vector<Var>& vars) {
            SectionalVars sv = bind_sectional(vars, cfg);
            return g.sum_all(sectional_stack(g, g.leaf(x), sv, cfg));
          },
          flatten(p));
  }
  return results;
}

}  // namespace sectmoe
