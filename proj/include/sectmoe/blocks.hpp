#pragma once

// Composable transformer pieces: linear projection, multi-head attention
// (self or cross, optional causal mask), feed-forward network and a pre-norm
// residual layer, plus seeded initialization and a finite-difference
// gradient checker for whole blocks.

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "sectmoe/graph.hpp"
#include "sectmoe/prng.hpp"
#include "sectmoe/tensor.hpp"

namespace sectmoe {

struct AttentionParams {
  Tensor w_q, w_k, w_v, w_o;  // all d_model x d_model
  std::size_t heads = 1;

  std::size_t width() const { return w_q.dim(0); }

  void validate() const {
    const std::size_t d = w_q.dim(0);
    for (const Tensor* w : {&w_q, &w_k, &w_v, &w_o}) {
      if (w->rank() != 2 || w->dim(0) != d || w->dim(1) != d) {
        throw DimensionError("attention weights must all be " +
                             std::to_string(d) + "x" + std::to_string(d));
      }
    }
    if (heads == 0 || d % heads != 0) {
      throw ConfigError("attention width " + std::to_string(d) +
                        " not divisible by head count " +
                        std::to_string(heads));
    }
  }
};

struct FfnParams {
  Tensor w1, b1, w2, b2;

  std::size_t width() const { return w1.dim(0); }
  std::size_t hidden() const { return w1.dim(1); }

  void validate() const {
    const std::size_t d = w1.dim(0), h = w1.dim(1);
    if (h < 1 || w2.rank() != 2 || w2.dim(0) != h || w2.dim(1) != d ||
        b1.rank() != 1 || b1.dim(0) != h || b2.rank() != 1 || b2.dim(0) != d) {
      throw DimensionError("ffn parameter shapes inconsistent");
    }
  }
};

struct LayerParams {
  AttentionParams attn;
  FfnParams ffn;
  Tensor ln1_gamma, ln1_beta, ln2_gamma, ln2_beta;
  double eps = 1e-5;

  std::size_t width() const { return attn.width(); }

  void validate() const {
    attn.validate();
    ffn.validate();
    const std::size_t d = attn.width();
    if (ffn.width() != d) {
      throw DimensionError("attention width and ffn width disagree");
    }
    for (const Tensor* t : {&ln1_gamma, &ln1_beta, &ln2_gamma, &ln2_beta}) {
      if (t->rank() != 1 || t->dim(0) != d) {
        throw DimensionError("layer norm parameters must be rank 1 of width " +
                             std::to_string(d));
      }
    }
    if (eps <= 0.0) throw DomainError("layer eps must be positive");
  }
};

// Category routing for one layer's tally. The aggregation block reassigns
// everything to `aggregation` so the audit categories stay clean; the
// attention output projection has no slot in the score/projection model and
// defaults to `other` together with residual additions.
struct LayerCategories {
  Category proj = Category::Qkv;
  Category scores = Category::AttnScores;
  Category ffn = Category::Ffn;
  Category out_proj = Category::Other;
  Category residual = Category::Other;
};

inline LayerCategories aggregation_categories() {
  return LayerCategories{Category::Aggregation, Category::Aggregation,
                         Category::Aggregation, Category::Aggregation,
                         Category::Aggregation};
}

// ---------------------------------------------------------------------------
// Graph-bound parameter handles
// ---------------------------------------------------------------------------

struct AttentionVars {
  Var w_q, w_k, w_v, w_o;
  std::size_t heads = 1;
};
struct FfnVars {
  Var w1, b1, w2, b2;
};
struct LayerVars {
  AttentionVars attn;
  FfnVars ffn;
  Var ln1_gamma, ln1_beta, ln2_gamma, ln2_beta;
  double eps = 1e-5;
};

inline AttentionVars bind(Graph& g, const AttentionParams& p) {
  p.validate();
  return {g.leaf(p.w_q), g.leaf(p.w_k), g.leaf(p.w_v), g.leaf(p.w_o), p.heads};
}
inline FfnVars bind(Graph& g, const FfnParams& p) {
  p.validate();
  return {g.leaf(p.w1), g.leaf(p.b1), g.leaf(p.w2), g.leaf(p.b2)};
}
inline LayerVars bind(Graph& g, const LayerParams& p) {
  p.validate();
  return {bind(g, p.attn),       bind(g, p.ffn),        g.leaf(p.ln1_gamma),
          g.leaf(p.ln1_beta),    g.leaf(p.ln2_gamma),   g.leaf(p.ln2_beta),
          p.eps};
}

// ---------------------------------------------------------------------------
// Builders
// ---------------------------------------------------------------------------

// X.W (+ bias broadcast). Tally: T * d_in * d_out under `category`.
inline Var linear(Graph& g, Var x, Var w, Var b, Category category) {
  Var y = g.matmul(x, w, category);
  if (b.valid()) y = g.add_bias_rows(y, b);
  return y;
}

struct MhaOptions {
  bool causal = false;
  bool scale_by_sqrt_dh = true;
  Category proj = Category::Qkv;
  Category scores = Category::AttnScores;
  Category out_proj = Category::Other;
};

// Per-head attention weights captured for inspection in tests.
struct MhaTrace {
  std::vector<Tensor> head_weights;
};

// Standard multi-head attention. Tally: (Tq + 2 Tkv) d^2 projections under
// `proj`, 2 Tq Tkv d for scores and weighted values under `scores` (summed
// over heads, independent of the head count), Tq d^2 under `out_proj`.
inline Var mha_forward(Graph& g, Var xq, Var xkv, const AttentionVars& p,
                       const MhaOptions& opt = {}, MhaTrace* trace = nullptr) {
  const Tensor& xqv = g.value(xq);
  const Tensor& xkvv = g.value(xkv);
  const std::size_t d = g.value(p.w_q).dim(0);
  if (xqv.rank() != 2 || xqv.dim(1) != d || xkvv.rank() != 2 ||
      xkvv.dim(1) != d) {
    throw DimensionError("mha_forward: inputs " + xqv.shape_str() + ", " +
                         xkvv.shape_str() + " do not match width " +
                         std::to_string(d));
  }
  if (opt.causal && xqv.dim(0) != xkvv.dim(0)) {
    throw ContractError("mha_forward: causal masking requires equal query and "
                        "key counts, got " +
                        std::to_string(xqv.dim(0)) + " and " +
                        std::to_string(xkvv.dim(0)));
  }
  const std::size_t heads = p.heads;
  if (heads == 0 || d % heads != 0) {
    throw ConfigError("mha_forward: width " + std::to_string(d) +
                      " not divisible by " + std::to_string(heads) + " heads");
  }
  const std::size_t dh = d / heads;

  Var q = g.matmul(xq, p.w_q, opt.proj);
  Var k = g.matmul(xkv, p.w_k, opt.proj);
  Var v = g.matmul(xkv, p.w_v, opt.proj);

  std::vector<Var> head_outputs;
  head_outputs.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    const std::size_t lo = h * dh, hi = (h + 1) * dh;
    Var qh = g.slice_cols(q, lo, hi);
    Var kh = g.slice_cols(k, lo, hi);
    Var vh = g.slice_cols(v, lo, hi);
    Var scores = g.matmul(qh, g.transpose(kh), opt.scores);
    if (opt.scale_by_sqrt_dh) {
      scores = g.scale(scores, 1.0 / std::sqrt(static_cast<double>(dh)));
    }
    if (opt.causal) scores = g.causal_mask(scores);
    Var weights = g.softmax_rows(scores);
    if (trace) trace->head_weights.push_back(g.value(weights));
    head_outputs.push_back(g.matmul(weights, vh, opt.scores));
  }
  Var merged = heads == 1 ? head_outputs[0] : g.concat_cols(head_outputs);
  return g.matmul(merged, p.w_o, opt.out_proj);
}

// relu(X.w1 + b1).w2 + b2. Tally: 2 T d d_ff under `category`.
inline Var ffn_forward(Graph& g, Var x, const FfnVars& p,
                       Category category = Category::Ffn) {
  Var h = g.relu(g.add_bias_rows(g.matmul(x, p.w1, category), p.b1));
  return g.add_bias_rows(g.matmul(h, p.w2, category), p.b2);
}

struct LayerOptions {
  bool causal = false;
  bool scale_by_sqrt_dh = true;
  LayerCategories categories{};
};

// Pre-norm residual layer: X + MHA(LN(X)), then Y + FFN(LN(Y)).
inline Var transformer_layer(Graph& g, Var x, const LayerVars& p,
                             const LayerOptions& opt = {}) {
  MhaOptions mha_opt{opt.causal, opt.scale_by_sqrt_dh, opt.categories.proj,
                     opt.categories.scores, opt.categories.out_proj};
  Var n1 = g.layer_norm_rows(x, p.ln1_gamma, p.ln1_beta, p.eps);
  Var y = g.add(x, mha_forward(g, n1, n1, p.attn, mha_opt));
  g.counter().add(opt.categories.residual, g.value(y).size());
  Var n2 = g.layer_norm_rows(y, p.ln2_gamma, p.ln2_beta, p.eps);
  Var z = g.add(y, ffn_forward(g, n2, p.ffn, opt.categories.ffn));
  g.counter().add(opt.categories.residual, g.value(z).size());
  return z;
}

// ---------------------------------------------------------------------------
// Tensor-level wrappers (each call records onto a throwaway tape)
// ---------------------------------------------------------------------------

inline Tensor linear(OpCounter& counter, const Tensor& x, const Tensor& w,
                     const Tensor* b, Category category) {
  Graph g(counter);
  Var bv{};
  if (b) bv = g.leaf(*b);
  return g.value(linear(g, g.leaf(x), g.leaf(w), bv, category));
}

inline Tensor mha_forward(OpCounter& counter, const Tensor& xq,
                          const Tensor& xkv, const AttentionParams& p,
                          const MhaOptions& opt = {},
                          MhaTrace* trace = nullptr) {
  Graph g(counter);
  return g.value(
      mha_forward(g, g.leaf(xq), g.leaf(xkv), bind(g, p), opt, trace));
}

inline Tensor ffn_forward(OpCounter& counter, const Tensor& x,
                          const FfnParams& p,
                          Category category = Category::Ffn) {
  Graph g(counter);
  return g.value(ffn_forward(g, g.leaf(x), bind(g, p), category));
}

inline Tensor transformer_layer(OpCounter& counter, const Tensor& x,
                                const LayerParams& p,
                                const LayerOptions& opt = {}) {
  Graph g(counter);
  return g.value(transformer_layer(g, g.leaf(x), bind(g, p), opt));
}

// ---------------------------------------------------------------------------
// Initialization
// ---------------------------------------------------------------------------

inline Tensor random_matrix(std::size_t rows, std::size_t cols,
                            std::size_t fan_in, Prng& rng) {
  Tensor w({rows, cols});
  const double sigma = 1.0 / std::sqrt(static_cast<double>(fan_in));
  for (std::size_t i = 0; i < w.size(); ++i)
    w.at(i) = rng.truncated_normal(sigma);
  return w;
}

inline Tensor random_normal(std::vector<std::size_t> shape, Prng& rng) {
  Tensor t(std::move(shape));
  for (std::size_t i = 0; i < t.size(); ++i) t.at(i) = rng.normal();
  return t;
}

inline AttentionParams init_attention_params(std::size_t d, std::size_t heads,
                                             Prng& rng) {
  AttentionParams p;
  p.w_q = random_matrix(d, d, d, rng);
  p.w_k = random_matrix(d, d, d, rng);
  p.w_v = random_matrix(d, d, d, rng);
  p.w_o = random_matrix(d, d, d, rng);
  p.heads = heads;
  p.validate();
  return p;
}

inline FfnParams init_ffn_params(std::size_t d, std::size_t d_ff, Prng& rng) {
  FfnParams p;
  p.w1 = random_matrix(d, d_ff, d, rng);
  p.b1 = Tensor({d_ff});
  p.w2 = random_matrix(d_ff, d, d_ff, rng);
  p.b2 = Tensor({d});
  p.validate();
  return p;
}

inline LayerParams init_layer_params(std::size_t d, std::size_t heads,
                                     std::size_t d_ff, Prng& rng,
                                     double eps = 1e-5) {
  LayerParams p;
  p.attn = init_attention_params(d, heads, rng);
  p.ffn = init_ffn_params(d, d_ff, rng);
  p.ln1_gamma = Tensor::full({d}, 1.0);
  p.ln1_beta = Tensor({d});
  p.ln2_gamma = Tensor::full({d}, 1.0);
  p.ln2_beta = Tensor({d});
  p.eps = eps;
  p.validate();
  return p;
}

inline AttentionParams init_attention_params(std::size_t d, std::size_t heads,
                                             std::uint64_t seed) {
  Prng rng(seed);
  return init_attention_params(d, heads, rng);
}
inline FfnParams init_ffn_params(std::size_t d, std::size_t d_ff,
                                 std::uint64_t seed) {
  Prng rng(seed);
  return init_ffn_params(d, d_ff, rng);
}
inline LayerParams init_layer_params(std::size_t d, std::size_t heads,
                                     std::size_t d_ff, std::uint64_t seed,
                                     double eps = 1e-5) {
  Prng rng(seed);
  return init_layer_params(d, heads, d_ff, rng, eps);
}

// Fixed flattening order so a layer's tensors can round-trip through the
// gradient checker: wq wk wv wo w1 b1 w2 b2 ln1g ln1b ln2g ln2b.
inline std::vector<Tensor> flatten(const LayerParams& p) {
  return {p.attn.w_q, p.attn.w_k, p.attn.w_v, p.attn.w_o,
          p.ffn.w1,   p.ffn.b1,   p.ffn.w2,   p.ffn.b2,
          p.ln1_gamma, p.ln1_beta, p.ln2_gamma, p.ln2_beta};
}

inline constexpr std::size_t kLayerTensorCount = 12;

inline LayerVars bind_layer(std::span<const Var> vars, std::size_t heads,
                            double eps) {
  if (vars.size() != kLayerTensorCount) {
    throw DimensionError("bind_layer: expected " +
                         std::to_string(kLayerTensorCount) + " tensors, got " +
                         std::to_string(vars.size()));
  }
  LayerVars lv;
  lv.attn = {vars[0], vars[1], vars[2], vars[3], heads};
  lv.ffn = {vars[4], vars[5], vars[6], vars[7]};
  lv.ln1_gamma = vars[8];
  lv.ln1_beta = vars[9];
  lv.ln2_gamma = vars[10];
  lv.ln2_beta = vars[11];
  lv.eps = eps;
  return lv;
}

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

struct GradCheckFailure {
  std::size_t coordinate;
  double adjoint;
  double finite_difference;
  double rel_error;
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t coords_checked = 0;
  std::size_t param_count = 0;
  std::vector<GradCheckFailure> failures;

  bool passed() const { return failures.empty(); }
};

// Builds the scalar objective on a tape from leaf vars bound to `params`.
using ScalarBuilder = std::function<Var(Graph&, const std::vector<Var>&)>;

// Compares the tape's adjoint gradient of f against central finite
// differences (f(t+h e) - f(t-h e)) / 2h over a deterministic sample of at
// least `min_coords` coordinates (all of them when there are fewer).
// `adjoint_perturbation` scales the adjoint before comparison; it exists as a
// negative control so callers can verify the checker actually fails.
inline GradCheckReport grad_check(const ScalarBuilder& f,
                                  const std::vector<Tensor>& params, double h,
                                  double tol, std::size_t min_coords = 200,
                                  std::uint64_t sample_seed = 7,
                                  double adjoint_perturbation = 0.0) {
  if (h <= 0.0) throw DomainError("grad_check: step h must be positive");

  auto evaluate = [&](const std::vector<Tensor>& theta) {
    OpCounter scratch;
    Graph g(scratch);
    std::vector<Var> leaves;
    leaves.reserve(theta.size());
    for (const Tensor& t : theta) leaves.push_back(g.leaf(t));
    Var out = f(g, leaves);
    const Tensor& v = g.value(out);
    if (v.size() != 1) {
      throw DimensionError("grad_check: objective must be scalar, got " +
                           v.shape_str());
    }
    if (!std::isfinite(v.at(0))) {
      throw EvaluationError("grad_check: objective is not finite");
    }
    return v.at(0);
  };

  // Adjoint pass.
  std::vector<double> adjoint;
  {
    OpCounter scratch;
    Graph g(scratch);
    std::vector<Var> leaves;
    leaves.reserve(params.size());
    for (const Tensor& t : params) leaves.push_back(g.leaf(t));
    Var out = f(g, leaves);
    if (!std::isfinite(g.value(out).at(0))) {
      throw EvaluationError("grad_check: objective is not finite");
    }
    g.backward(out);
    for (Var leaf : leaves) {
      Tensor gr = g.grad(leaf);
      for (std::size_t i = 0; i < gr.size(); ++i)
        adjoint.push_back(gr.at(i) * (1.0 + adjoint_perturbation));
    }
  }

  const std::size_t total = adjoint.size();
  std::vector<std::size_t> coords;
  if (total <= min_coords) {
    coords.resize(total);
    for (std::size_t i = 0; i < total; ++i) coords[i] = i;
  } else {
    // deterministic sample without replacement
    std::vector<std::size_t> pool(total);
    for (std::size_t i = 0; i < total; ++i) pool[i] = i;
    Prng rng(sample_seed);
    for (std::size_t i = 0; i < min_coords; ++i) {
      const std::size_t j = i + rng.next_u64() % (total - i);
      std::swap(pool[i], pool[j]);
      coords.push_back(pool[i]);
    }
  }

  auto locate = [&](std::size_t flat) {
    std::size_t tensor_idx = 0, offset = flat;
    while (offset >= params[tensor_idx].size()) {
      offset -= params[tensor_idx].size();
      ++tensor_idx;
    }
    return std::pair<std::size_t, std::size_t>{tensor_idx, offset};
  };

  GradCheckReport report;
  report.param_count = total;
  std::vector<Tensor> theta = params;
  for (std::size_t flat : coords) {
    const auto [ti, off] = locate(flat);
    const double saved = theta[ti].at(off);
    theta[ti].at(off) = saved + h;
    const double fp = evaluate(theta);
    theta[ti].at(off) = saved - h;
    const double fm = evaluate(theta);
    theta[ti].at(off) = saved;

    const double fd = (fp - fm) / (2.0 * h);
    const double a = adjoint[flat];
    const double denom = std::max(std::abs(a), std::abs(fd));
    const double abs_err = std::abs(a - fd);
    const double rel = denom > 1e-8 ? abs_err / denom : abs_err;
    report.max_rel_error = std::max(report.max_rel_error, rel);
    ++report.coords_checked;
    if (rel > tol) report.failures.push_back({flat, a, fd, rel});
  }
  return report;
}

}  // namespace sectmoe
