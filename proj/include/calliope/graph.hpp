#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "calliope/tensor.hpp"

namespace calliope {

/// Handle to a node on a GraphT tape.
struct Var {
  int id = -1;
};

/// Reverse-mode autodiff tape over rank-2 tensors.
///
/// Every op records its output and a backward rule in execution order;
/// backward() walks the tape in exact reverse order. Each op checks its
/// output for NaN/Inf and throws NonFiniteValue on the first offender.
/// A graph is single-threaded; independent graphs are independent.
template <typename S>
class GraphT {
 public:
  GraphT() = default;
  GraphT(const GraphT&) = delete;
  GraphT& operator=(const GraphT&) = delete;

  /// Inserts a leaf tensor. Parameters pass requires_grad=true.
  Var leaf(TensorT<S> value, bool requires_grad);
  Var constant(TensorT<S> value) { return leaf(std::move(value), false); }

  const TensorT<S>& value(Var v) const;
  /// Gradient of the last backward() w.r.t. node v; zeros if untouched.
  TensorT<S> grad(Var v) const;
  bool requires_grad(Var v) const;

  /// While disabled, ops record values only (no backward rules); used for
  /// inference passes and the frozen-encoder half of adversarial training.
  void set_grad_enabled(bool enabled) { grad_enabled_ = enabled; }
  bool grad_enabled() const { return grad_enabled_; }

  std::size_t size() const { return nodes_.size(); }

  // ---- forward ops ----
  Var matmul(Var a, Var b);
  Var transpose(Var a);
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);
  Var scale(Var a, S c);
  /// (m,n) + (1,n) broadcast over rows.
  Var add_rowvec(Var a, Var b);
  /// x(m,k) * w(k,n) + b(1,n); pass b.id = -1 for no bias.
  Var linear(Var x, Var w, Var b);
  Var embedding_lookup(Var table, const std::vector<int>& ids);
  /// Row-wise softmax.
  Var softmax(Var x);
  /// Row-wise softmax over permitted entries only. key_valid (may be empty
  /// = all valid) disallows columns; causal disallows j > i. Disallowed
  /// entries get exactly 0 weight. A row with no permitted entry is an error.
  Var masked_softmax(Var scores, const std::vector<std::uint8_t>& key_valid,
                     bool causal);
  /// Row-wise layer norm: gain (1,n), bias (1,n).
  Var layer_norm(Var x, Var gain, Var bias);
  Var gelu(Var x);
  Var sigmoid(Var x);
  Var log(Var x);
  Var softplus(Var x);
  Var concat_rows(const std::vector<Var>& xs);
  Var concat_cols(const std::vector<Var>& xs);
  Var slice_rows(Var x, int r0, int r1);
  Var slice_cols(Var x, int c0, int c1);
  std::vector<Var> split_rows(Var x, int parts);
  std::vector<Var> split_cols(Var x, int parts);
  /// Mean over axis 0: (m,n) -> (1,n).
  Var mean_rows(Var x);
  /// Mean over rows flagged valid; (m,n) -> (1,n).
  Var masked_mean_rows(Var x, const std::vector<std::uint8_t>& row_valid);
  Var sum(Var x);
  Var mean_all(Var x);
  /// Token cross entropy: logits (L,V), targets length L. Positions whose
  /// target equals ignore_id contribute no loss and no gradient. Returns
  /// the mean over counted positions (mean_reduction) or their sum.
  Var cross_entropy(Var logits, const std::vector<int>& targets,
                    int ignore_id, bool mean_reduction = true);
  /// Relative-position attention scores:
  ///   s(i,j) = [q_i*k_j + q_i*r_{i-j} + u*k_j + v*r_{i-j}] / sqrt(d)
  /// q,k (L,d); rel (R,d) indexed by i-j around its center row (R >= 2L-1);
  /// u,v (1,d) global biases.
  Var rel_scores(Var q, Var k, Var rel, Var u, Var v);

  /// Populates gradients of everything loss depends on. NotScalar unless
  /// loss is (1,1).
  void backward(Var loss);

 private:
  struct Node {
    TensorT<S> value;
    TensorT<S> grad;  // empty until touched
    std::vector<int> inputs;
    std::function<void(GraphT&)> bw;
    bool requires_grad = false;
  };

  std::vector<Node> nodes_;
  bool grad_enabled_ = true;

  Var add_node(TensorT<S> value, std::vector<int> inputs,
               std::function<void(GraphT&)> bw, const char* op);
  bool any_requires(const std::vector<int>& ids) const;
  TensorT<S>& grad_buf(int id);
  bool grad_present(int id) const;
  void accum(int id, const TensorT<S>& g);
  const TensorT<S>& val(int id) const { return nodes_[id].value; }
};

using Graph = GraphT<float>;
using Graph64 = GraphT<double>;

/// Max relative error between reverse-mode gradients and 64-bit central
/// differences, over sampled coordinates of every input tensor. The build
/// callback must be pure: it is re-invoked on perturbed copies. Relative
/// error uses a 1e-6 floor so near-zero gradients compare absolutely.
struct GradCheckSpec {
  int samples_per_tensor = 6;  // <= 0 checks every coordinate
  double step = 1e-3;
  std::uint64_t seed = 0;
};
double grad_check(
    const std::vector<Tensor64>& inputs,
    const std::function<Var(Graph64&, const std::vector<Var>&)>& build,
    const GradCheckSpec& spec = {});

}  // namespace calliope
