#pragma once

// Dense row-major tensors (rank 1-3, 64-bit reals) with exact
// multiply-accumulate counting, plus the adjoint rules used for
// gradient verification.

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <tuple>
#include <utility>
#include <vector>

namespace sectmoe {

struct DimensionError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};
struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};
struct ContractError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};
struct DomainError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};
struct UnsupportedOperationError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};
struct EvaluationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Cost categories for the MAC tally. One count per scalar multiply-add;
// pure additions (pooling, residuals) are tallied with multiplier 1 in
// their own buckets so the projection/score categories stay clean.
enum class Category : std::size_t {
  Qkv = 0,
  AttnScores,
  Ffn,
  Router,
  Pooling,
  Aggregation,
  Other,
};

inline constexpr std::size_t kCategoryCount = 7;

inline constexpr std::array<Category, kCategoryCount> kAllCategories = {
    Category::Qkv,      Category::AttnScores,  Category::Ffn,  Category::Router,
    Category::Pooling,  Category::Aggregation, Category::Other,
};

inline constexpr const char* category_name(Category c) {
  switch (c) {
    case Category::Qkv: return "qkv";
    case Category::AttnScores: return "attn_scores";
    case Category::Ffn: return "ffn";
    case Category::Router: return "router";
    case Category::Pooling: return "pooling";
    case Category::Aggregation: return "aggregation";
    case Category::Other: return "other";
  }
  return "?";
}

// Race-free MAC tally. Increments are atomic so parallel expert execution
// cannot lose counts; reads outside a measurement scope see a settled value.
class OpCounter {
 public:
  OpCounter() { reset(); }
  OpCounter(const OpCounter&) = delete;
  OpCounter& operator=(const OpCounter&) = delete;

  void add(Category c, std::uint64_t macs) {
    counts_[static_cast<std::size_t>(c)].fetch_add(macs,
                                                   std::memory_order_relaxed);
  }
  std::uint64_t count(Category c) const {
    return counts_[static_cast<std::size_t>(c)].load(std::memory_order_relaxed);
  }
  std::uint64_t total() const {
    std::uint64_t t = 0;
    for (const auto& c : counts_) t += c.load(std::memory_order_relaxed);
    return t;
  }
  std::array<std::uint64_t, kCategoryCount> snapshot() const {
    std::array<std::uint64_t, kCategoryCount> out{};
    for (std::size_t i = 0; i < kCategoryCount; ++i)
      out[i] = counts_[i].load(std::memory_order_relaxed);
    return out;
  }
  void reset() {
    for (auto& c : counts_) c.store(0, std::memory_order_relaxed);
  }

 private:
  std::array<std::atomic<std::uint64_t>, kCategoryCount> counts_;
};

inline std::string shape_string(std::span<const std::size_t> shape) {
  std::string s = "(";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ", ";
    s += std::to_string(shape[i]);
  }
  s += ")";
  return s;
}

class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<std::size_t> shape)
      : shape_(std::move(shape)), data_(checked_size(shape_), 0.0) {}

  Tensor(std::vector<std::size_t> shape, std::vector<double> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != checked_size(shape_)) {
      throw DimensionError("tensor: data length " +
                           std::to_string(data_.size()) +
                           " does not match shape " + shape_string(shape_));
    }
    ensure_finite("construction");
  }

  static Tensor zeros(std::vector<std::size_t> shape) {
    return Tensor(std::move(shape));
  }
  static Tensor full(std::vector<std::size_t> shape, double value) {
    Tensor t(std::move(shape));
    std::fill(t.data_.begin(), t.data_.end(), value);
    t.ensure_finite("construction");
    return t;
  }

  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t rows() const { return shape_.at(0); }
  std::size_t cols() const {
    if (rank() != 2) throw DimensionError("cols(): tensor is not rank 2");
    return shape_[1];
  }
  std::size_t size() const { return data_.size(); }
  const std::vector<std::size_t>& shape() const { return shape_; }
  std::string shape_str() const { return shape_string(shape_); }
  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

  double& at(std::size_t i) { return data_[i]; }
  double at(std::size_t i) const { return data_[i]; }
  double& at(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
  double at(std::size_t i, std::size_t j) const {
    return data_[i * shape_[1] + j];
  }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }

  void ensure_finite(const char* context) const {
    for (double v : data_) {
      if (!std::isfinite(v)) {
        throw EvaluationError(std::string("non-finite value produced by ") +
                              context);
      }
    }
  }

 private:
  static std::size_t checked_size(const std::vector<std::size_t>& shape) {
    if (shape.empty() || shape.size() > 3) {
      throw DimensionError("tensor: rank must be 1-3, got shape " +
                           shape_string(shape));
    }
    std::size_t n = 1;
    for (std::size_t d : shape) {
      if (d == 0) {
        throw DimensionError("tensor: dimensions must be positive, got " +
                             shape_string(shape));
      }
      n *= d;
    }
    return n;
  }

  std::vector<std::size_t> shape_;
  std::vector<double> data_;
};

namespace detail {

// Uncounted kernel shared by the counted op and the adjoint rules.
inline Tensor matmul_raw(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2) {
    throw DimensionError("matmul: operands must be rank 2, got " +
                         a.shape_str() + " and " + b.shape_str());
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw DimensionError("matmul: inner dimensions disagree: " +
                         a.shape_str() + " x " + b.shape_str());
  }
  Tensor c({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = a.at(i, p);
      for (std::size_t j = 0; j < n; ++j) c.at(i, j) += aip * b.at(p, j);
    }
  }
  return c;
}

}  // namespace detail

// C = A.B, tallying exactly m*n*k multiply-accumulates under `category`.
inline Tensor matmul(OpCounter& counter, const Tensor& a, const Tensor& b,
                     Category category) {
  Tensor c = detail::matmul_raw(a, b);
  counter.add(category, static_cast<std::uint64_t>(a.dim(0)) * a.dim(1) *
                            b.dim(1));
  c.ensure_finite("matmul");
  return c;
}

// Row-wise softmax with max subtraction.
inline Tensor softmax_rows(const Tensor& x) {
  if (x.rank() != 2) {
    throw DimensionError("softmax_rows: expected rank 2, got " + x.shape_str());
  }
  const std::size_t m = x.dim(0), n = x.dim(1);
  Tensor y({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    double mx = x.at(i, 0);
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, x.at(i, j));
    double sum = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const double e = std::exp(x.at(i, j) - mx);
      y.at(i, j) = e;
      sum += e;
    }
    for (std::size_t j = 0; j < n; ++j) y.at(i, j) /= sum;
  }
  y.ensure_finite("softmax_rows");
  return y;
}

// Row-wise layer norm with population variance, eps inside the square root.
inline Tensor layer_norm_rows(const Tensor& x, const Tensor& gamma,
                              const Tensor& beta, double eps) {
  if (x.rank() != 2) {
    throw DimensionError("layer_norm_rows: expected rank 2, got " +
                         x.shape_str());
  }
  const std::size_t m = x.dim(0), n = x.dim(1);
  if (n < 2) throw DimensionError("layer_norm_rows: row width must be >= 2");
  if (eps <= 0.0) throw DomainError("layer_norm_rows: eps must be positive");
  if (gamma.rank() != 1 || gamma.dim(0) != n || beta.rank() != 1 ||
      beta.dim(0) != n) {
    throw DimensionError("layer_norm_rows: gamma/beta must be rank 1 of width " +
                         std::to_string(n));
  }
  Tensor y({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    double mean = 0.0;
    for (std::size_t j = 0; j < n; ++j) mean += x.at(i, j);
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const double d = x.at(i, j) - mean;
      var += d * d;
    }
    var /= static_cast<double>(n);
    const double inv_std = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      y.at(i, j) = gamma.at(j) * ((x.at(i, j) - mean) * inv_std) + beta.at(j);
    }
  }
  y.ensure_finite("layer_norm_rows");
  return y;
}

// Strided mean pooling over groups of `ratio` consecutive rows. The T*d
// additions are tallied (multiplier 1) under `pooling`.
inline Tensor mean_pool_strided(OpCounter& counter, const Tensor& x,
                                std::size_t ratio) {
  if (x.rank() != 2) {
    throw DimensionError("mean_pool_strided: expected rank 2, got " +
                         x.shape_str());
  }
  if (ratio == 0) throw DomainError("mean_pool_strided: ratio must be >= 1");
  const std::size_t t = x.dim(0), d = x.dim(1);
  if (t % ratio != 0) {
    throw DimensionError("mean_pool_strided: row count " + std::to_string(t) +
                         " not divisible by ratio " + std::to_string(ratio));
  }
  Tensor y({t / ratio, d});
  for (std::size_t i = 0; i < t / ratio; ++i) {
    for (std::size_t j = 0; j < d; ++j) {
      double sum = 0.0;
      for (std::size_t q = 0; q < ratio; ++q) sum += x.at(i * ratio + q, j);
      y.at(i, j) = sum / static_cast<double>(ratio);
    }
  }
  counter.add(Category::Pooling, static_cast<std::uint64_t>(t) * d);
  y.ensure_finite("mean_pool_strided");
  return y;
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) {
    throw DimensionError("add: shape mismatch: " + a.shape_str() + " vs " +
                         b.shape_str());
  }
  Tensor y = a;
  for (std::size_t i = 0; i < y.size(); ++i) y.at(i) += b.at(i);
  y.ensure_finite("add");
  return y;
}

inline Tensor relu(const Tensor& x) {
  Tensor y = x;
  for (std::size_t i = 0; i < y.size(); ++i) y.at(i) = std::max(0.0, y.at(i));
  return y;
}

inline Tensor scale(const Tensor& x, double s) {
  Tensor y = x;
  for (std::size_t i = 0; i < y.size(); ++i) y.at(i) *= s;
  y.ensure_finite("scale");
  return y;
}

inline Tensor transpose(const Tensor& x) {
  if (x.rank() != 2) {
    throw DimensionError("transpose: expected rank 2, got " + x.shape_str());
  }
  Tensor y({x.dim(1), x.dim(0)});
  for (std::size_t i = 0; i < x.dim(0); ++i)
    for (std::size_t j = 0; j < x.dim(1); ++j) y.at(j, i) = x.at(i, j);
  return y;
}

inline Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t end) {
  if (x.rank() != 2) {
    throw DimensionError("slice_cols: expected rank 2, got " + x.shape_str());
  }
  if (begin >= end || end > x.dim(1)) {
    throw DimensionError("slice_cols: range [" + std::to_string(begin) + ", " +
                         std::to_string(end) + ") invalid for " +
                         x.shape_str());
  }
  Tensor y({x.dim(0), end - begin});
  for (std::size_t i = 0; i < x.dim(0); ++i)
    for (std::size_t j = begin; j < end; ++j) y.at(i, j - begin) = x.at(i, j);
  return y;
}

inline Tensor concat_cols(std::span<const Tensor> parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no inputs");
  const std::size_t m = parts[0].dim(0);
  std::size_t n = 0;
  for (const Tensor& p : parts) {
    if (p.rank() != 2 || p.dim(0) != m) {
      throw DimensionError("concat_cols: inconsistent part shape " +
                           p.shape_str());
    }
    n += p.dim(1);
  }
  Tensor y({m, n});
  std::size_t off = 0;
  for (const Tensor& p : parts) {
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < p.dim(1); ++j) y.at(i, off + j) = p.at(i, j);
    off += p.dim(1);
  }
  return y;
}

// ---------------------------------------------------------------------------
// Adjoint (vector-Jacobian) rules. Each takes the upstream cotangent and
// returns cotangents for the inputs. Verified against central finite
// differences in the test suite.
// ---------------------------------------------------------------------------

inline std::pair<Tensor, Tensor> matmul_adjoint(const Tensor& a,
                                                const Tensor& b,
                                                const Tensor& g) {
  Tensor da = detail::matmul_raw(g, transpose(b));
  Tensor db = detail::matmul_raw(transpose(a), g);
  return {std::move(da), std::move(db)};
}

// dX = Y .* (G - rowdot(G, Y)) per row, with Y the softmax output.
inline Tensor softmax_rows_adjoint(const Tensor& y, const Tensor& g) {
  const std::size_t m = y.dim(0), n = y.dim(1);
  Tensor dx({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    double dot = 0.0;
    for (std::size_t j = 0; j < n; ++j) dot += g.at(i, j) * y.at(i, j);
    for (std::size_t j = 0; j < n; ++j)
      dx.at(i, j) = y.at(i, j) * (g.at(i, j) - dot);
  }
  return dx;
}

inline std::tuple<Tensor, Tensor, Tensor> layer_norm_rows_adjoint(
    const Tensor& x, const Tensor& gamma, const Tensor& /*beta*/, double eps,
    const Tensor& g) {
  const std::size_t m = x.dim(0), n = x.dim(1);
  Tensor dx({m, n});
  Tensor dgamma({n});
  Tensor dbeta({n});
  for (std::size_t i = 0; i < m; ++i) {
    double mean = 0.0;
    for (std::size_t j = 0; j < n; ++j) mean += x.at(i, j);
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const double d = x.at(i, j) - mean;
      var += d * d;
    }
    var /= static_cast<double>(n);
    const double inv_std = 1.0 / std::sqrt(var + eps);

    // ghat = g .* gamma; dx = (ghat - mean(ghat) - xhat * mean(ghat .* xhat)) / std
    double mean_ghat = 0.0, mean_ghat_xhat = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const double xhat = (x.at(i, j) - mean) * inv_std;
      const double ghat = g.at(i, j) * gamma.at(j);
      mean_ghat += ghat;
      mean_ghat_xhat += ghat * xhat;
      dgamma.at(j) += g.at(i, j) * xhat;
      dbeta.at(j) += g.at(i, j);
    }
    mean_ghat /= static_cast<double>(n);
    mean_ghat_xhat /= static_cast<double>(n);
    for (std::size_t j = 0; j < n; ++j) {
      const double xhat = (x.at(i, j) - mean) * inv_std;
      const double ghat = g.at(i, j) * gamma.at(j);
      dx.at(i, j) = (ghat - mean_ghat - xhat * mean_ghat_xhat) * inv_std;
    }
  }
  return {std::move(dx), std::move(dgamma), std::move(dbeta)};
}

// Each pooled row spreads its cotangent equally over its `ratio` sources.
inline Tensor mean_pool_strided_adjoint(const Tensor& g, std::size_t ratio) {
  const std::size_t tr = g.dim(0), d = g.dim(1);
  Tensor dx({tr * ratio, d});
  for (std::size_t i = 0; i < tr; ++i)
    for (std::size_t q = 0; q < ratio; ++q)
      for (std::size_t j = 0; j < d; ++j)
        dx.at(i * ratio + q, j) = g.at(i, j) / static_cast<double>(ratio);
  return dx;
}

inline Tensor relu_adjoint(const Tensor& x, const Tensor& g) {
  Tensor dx = g;
  for (std::size_t i = 0; i < dx.size(); ++i)
    if (x.at(i) <= 0.0) dx.at(i) = 0.0;
  return dx;
}

// Attributes for vjp rules whose forward op carries a non-tensor argument.
struct VjpAttrs {
  double layer_norm_eps = 1e-5;
  std::size_t pool_ratio = 2;
};

// Named-op dispatch for the vector-Jacobian product of a single primitive.
// `upstream` must match the forward output shape.
inline std::vector<Tensor> vjp(std::string_view op,
                               const std::vector<Tensor>& inputs,
                               const Tensor& upstream,
                               const VjpAttrs& attrs = {}) {
  OpCounter scratch;
  auto expect_inputs = [&](std::size_t n) {
    if (inputs.size() != n) {
      throw DimensionError("vjp(" + std::string(op) + "): expected " +
                           std::to_string(n) + " inputs, got " +
                           std::to_string(inputs.size()));
    }
  };
  auto expect_upstream = [&](const Tensor& out) {
    if (!out.same_shape(upstream)) {
      throw DimensionError("vjp(" + std::string(op) + "): upstream shape " +
                           upstream.shape_str() + " does not match output " +
                           out.shape_str());
    }
  };

  if (op == "matmul") {
    expect_inputs(2);
    expect_upstream(detail::matmul_raw(inputs[0], inputs[1]));
    auto [da, db] = matmul_adjoint(inputs[0], inputs[1], upstream);
    return {std::move(da), std::move(db)};
  }
  if (op == "softmax_rows") {
    expect_inputs(1);
    Tensor y = softmax_rows(inputs[0]);
    expect_upstream(y);
    return {softmax_rows_adjoint(y, upstream)};
  }
  if (op == "layer_norm_rows") {
    expect_inputs(3);
    expect_upstream(layer_norm_rows(inputs[0], inputs[1], inputs[2],
                                    attrs.layer_norm_eps));
    auto [dx, dgamma, dbeta] = layer_norm_rows_adjoint(
        inputs[0], inputs[1], inputs[2], attrs.layer_norm_eps, upstream);
    return {std::move(dx), std::move(dgamma), std::move(dbeta)};
  }
  if (op == "mean_pool_strided") {
    expect_inputs(1);
    expect_upstream(mean_pool_strided(scratch, inputs[0], attrs.pool_ratio));
    return {mean_pool_strided_adjoint(upstream, attrs.pool_ratio)};
  }
  if (op == "add") {
    expect_inputs(2);
    expect_upstream(add(inputs[0], inputs[1]));
    return {upstream, upstream};
  }
  if (op == "relu") {
    expect_inputs(1);
    expect_upstream(inputs[0]);
    return {relu_adjoint(inputs[0], upstream)};
  }
  throw UnsupportedOperationError("vjp: unknown operation '" +
                                  std::string(op) + "'");
}

}  // namespace sectmoe
