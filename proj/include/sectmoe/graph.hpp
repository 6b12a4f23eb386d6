#pragma once

// Minimal reverse-mode tape over the tensor primitives. Nodes are created in
// topological order, so backpropagation is a single reverse sweep. Values are
// immutable once recorded; MACs are tallied at node-creation (forward) time.

#include <cstdint>
#include <functional>
#include <limits>
#include <utility>
#include <vector>

#include "sectmoe/tensor.hpp"

namespace sectmoe {

struct Var {
  std::uint32_t id = std::numeric_limits<std::uint32_t>::max();
  bool valid() const { return id != std::numeric_limits<std::uint32_t>::max(); }
};

class Graph {
 public:
  explicit Graph(OpCounter& counter) : counter_(&counter) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  OpCounter& counter() { return *counter_; }

  Var leaf(Tensor value) { return emplace(std::move(value), nullptr); }

  const Tensor& value(Var v) const { return nodes_.at(v.id).value; }

  // Zero tensor if the node was never reached by backward().
  Tensor grad(Var v) const {
    const Node& n = nodes_.at(v.id);
    if (n.grad.size() == 0) return Tensor(n.value.shape());
    return n.grad;
  }

  Var matmul(Var a, Var b, Category category) {
    Tensor out = sectmoe::matmul(*counter_, value(a), value(b), category);
    return emplace(std::move(out), [a, b, self = next_id()](Graph& g) {
      const Tensor& up = g.nodes_[self].grad;
      auto [da, db] = matmul_adjoint(g.value(a), g.value(b), up);
      g.accumulate(a, da);
      g.accumulate(b, db);
    });
  }

  Var add(Var a, Var b) {
    Tensor out = sectmoe::add(value(a), value(b));
    return emplace(std::move(out), [a, b, self = next_id()](Graph& g) {
      const Tensor& up = g.nodes_[self].grad;
      g.accumulate(a, up);
      g.accumulate(b, up);
    });
  }

  // X + b with b broadcast across rows.
  Var add_bias_rows(Var x, Var b) {
    const Tensor& xv = value(x);
    const Tensor& bv = value(b);
    if (xv.rank() != 2 || bv.rank() != 1 || bv.dim(0) != xv.dim(1)) {
      throw DimensionError("add_bias_rows: shapes " + xv.shape_str() + " and " +
                           bv.shape_str() + " do not broadcast");
    }
    Tensor out = xv;
    for (std::size_t i = 0; i < xv.dim(0); ++i)
      for (std::size_t j = 0; j < xv.dim(1); ++j) out.at(i, j) += bv.at(j);
    out.ensure_finite("add_bias_rows");
    return emplace(std::move(out), [x, b, self = next_id()](Graph& g) {
      const Tensor& up = g.nodes_[self].grad;
      g.accumulate(x, up);
      Tensor db({up.dim(1)});
      for (std::size_t i = 0; i < up.dim(0); ++i)
        for (std::size_t j = 0; j < up.dim(1); ++j) db.at(j) += up.at(i, j);
      g.accumulate(b, db);
    });
  }

  Var relu(Var x) {
    Tensor out = sectmoe::relu(value(x));
    return emplace(std::move(out), [x, self = next_id()](Graph& g) {
      g.accumulate(x, relu_adjoint(g.value(x), g.nodes_[self].grad));
    });
  }

  Var scale(Var x, double s) {
    Tensor out = sectmoe::scale(value(x), s);
    return emplace(std::move(out), [x, s, self = next_id()](Graph& g) {
      g.accumulate(x, sectmoe::scale(g.nodes_[self].grad, s));
    });
  }

  Var transpose(Var x) {
    Tensor out = sectmoe::transpose(value(x));
    return emplace(std::move(out), [x, self = next_id()](Graph& g) {
      g.accumulate(x, sectmoe::transpose(g.nodes_[self].grad));
    });
  }

  Var softmax_rows(Var x) {
    Tensor out = sectmoe::softmax_rows(value(x));
    return emplace(std::move(out), [x, self = next_id()](Graph& g) {
      g.accumulate(x, softmax_rows_adjoint(g.nodes_[self].value,
                                           g.nodes_[self].grad));
    });
  }

  Var layer_norm_rows(Var x, Var gamma, Var beta, double eps) {
    Tensor out =
        sectmoe::layer_norm_rows(value(x), value(gamma), value(beta), eps);
    return emplace(std::move(out),
                   [x, gamma, beta, eps, self = next_id()](Graph& g) {
                     auto [dx, dgamma, dbeta] = layer_norm_rows_adjoint(
                         g.value(x), g.value(gamma), g.value(beta), eps,
                         g.nodes_[self].grad);
                     g.accumulate(x, dx);
                     g.accumulate(gamma, dgamma);
                     g.accumulate(beta, dbeta);
                   });
  }

  Var mean_pool_strided(Var x, std::size_t ratio) {
    Tensor out = sectmoe::mean_pool_strided(*counter_, value(x), ratio);
    return emplace(std::move(out), [x, ratio, self = next_id()](Graph& g) {
      g.accumulate(x,
                   mean_pool_strided_adjoint(g.nodes_[self].grad, ratio));
    });
  }

  Var slice_cols(Var x, std::size_t begin, std::size_t end) {
    Tensor out = sectmoe::slice_cols(value(x), begin, end);
    return emplace(std::move(out), [x, begin, end, self = next_id()](Graph& g) {
      const Tensor& up = g.nodes_[self].grad;
      Tensor dx(g.value(x).shape());
      for (std::size_t i = 0; i < up.dim(0); ++i)
        for (std::size_t j = 0; j < up.dim(1); ++j)
          dx.at(i, begin + j) = up.at(i, j);
      g.accumulate(x, dx);
    });
  }

  Var concat_cols(std::vector<Var> parts) {
    std::vector<Tensor> values;
    values.reserve(parts.size());
    for (Var p : parts) values.push_back(value(p));
    Tensor out = sectmoe::concat_cols(values);
    return emplace(std::move(out),
                   [parts = std::move(parts), self = next_id()](Graph& g) {
                     const Tensor& up = g.nodes_[self].grad;
                     std::size_t off = 0;
                     for (Var p : parts) {
                       const std::size_t w = g.value(p).dim(1);
                       g.accumulate(p, sectmoe::slice_cols(up, off, off + w));
                       off += w;
                     }
                   });
  }

  // Replaces entries above the diagonal with a large negative constant so the
  // subsequent softmax assigns them weight exactly 0 (exp underflows).
  Var causal_mask(Var scores) {
    const Tensor& sv = value(scores);
    if (sv.rank() != 2 || sv.dim(0) != sv.dim(1)) {
      throw ContractError("causal_mask: scores must be square, got " +
                          sv.shape_str());
    }
    Tensor out = sv;
    for (std::size_t i = 0; i < sv.dim(0); ++i)
      for (std::size_t j = i + 1; j < sv.dim(1); ++j) out.at(i, j) = -1e30;
    return emplace(std::move(out), [scores, self = next_id()](Graph& g) {
      Tensor dx = g.nodes_[self].grad;
      for (std::size_t i = 0; i < dx.dim(0); ++i)
        for (std::size_t j = i + 1; j < dx.dim(1); ++j) dx.at(i, j) = 0.0;
      g.accumulate(scores, dx);
    });
  }

  // Scalar probe: sums every entry into a rank-1 tensor of size 1.
  Var sum_all(Var x) {
    const Tensor& xv = value(x);
    double s = 0.0;
    for (std::size_t i = 0; i < xv.size(); ++i) s += xv.at(i);
    Tensor out({1}, {s});
    return emplace(std::move(out), [x, self = next_id()](Graph& g) {
      const double up = g.nodes_[self].grad.at(0);
      Tensor dx = Tensor::full(g.value(x).shape(), up);
      g.accumulate(x, dx);
    });
  }

  void backward(Var root) { backward(root, Tensor::full(value(root).shape(), 1.0)); }

  void backward(Var root, const Tensor& seed) {
    if (!seed.same_shape(value(root))) {
      throw DimensionError("backward: seed shape " + seed.shape_str() +
                           " does not match root " + value(root).shape_str());
    }
    accumulate(root, seed);
    for (std::size_t i = root.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.back && n.grad.size() != 0) n.back(*this);
    }
  }

 private:
  struct Node {
    Tensor value;
    Tensor grad;  // empty until reached
    std::function<void(Graph&)> back;
  };

  std::uint32_t next_id() const {
    return static_cast<std::uint32_t>(nodes_.size());
  }

  Var emplace(Tensor value, std::function<void(Graph&)> back) {
    Var v{next_id()};
    nodes_.push_back(Node{std::move(value), Tensor{}, std::move(back)});
    return v;
  }

  void accumulate(Var v, const Tensor& g) {
    Node& n = nodes_[v.id];
    if (n.grad.size() == 0) {
      n.grad = g;
    } else {
      n.grad = sectmoe::add(n.grad, g);
    }
  }

  std::vector<Node> nodes_;
  OpCounter* counter_;
};

}  // namespace sectmoe
