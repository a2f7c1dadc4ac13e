#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <vector>

#include "uqal/rng.hpp"
#include "uqal/tensor.hpp"

namespace uqal {

enum class EwKind { kAdd, kSub, kMul, kNeg, kExp, kLog, kRelu, kClamp };
enum class ReduceKind { kSum, kMean, kMax };

class Gradients;

/// Recorded computation graph (define-by-run tape). Nodes are appended in
/// execution order, which is also the topological order; backward walks them
/// in exact reverse. One graph is built per forward pass and is single
/// threaded; tensors detached from any graph are plain values and may be
/// shared freely.
class Graph {
 public:
  Graph();

  /// Registers an input tensor as a graph node so gradients can be asked
  /// for it later.
  Tensor leaf(const Tensor& value);

  /// Registers a value the graph treats as fixed: backward reports a zero
  /// gradient for it and skips whole subtrees that depend on constants only.
  /// Interning shared values (e.g. network parameters) once per graph avoids
  /// re-copying them on every forward pass.
  Tensor constant(const Tensor& value);

  /// Generic elementwise entry point; `b` is required for binary kinds and
  /// must be null for unary ones. Binary kinds accept identical shapes or a
  /// scalar on either side.
  Tensor elementwise(EwKind kind, const Tensor& a, const Tensor* b = nullptr,
                     double lo = 0.0, double hi = 0.0);

  Tensor add(const Tensor& a, const Tensor& b);
  Tensor sub(const Tensor& a, const Tensor& b);
  Tensor mul(const Tensor& a, const Tensor& b);
  Tensor neg(const Tensor& a);
  Tensor exp(const Tensor& a);
  Tensor log(const Tensor& a);  // requires strictly positive inputs
  Tensor relu(const Tensor& a);
  Tensor clamp(const Tensor& a, double lo, double hi);

  Tensor matmul(const Tensor& a, const Tensor& b);

  /// Cross-correlation of a [C,H,W] input with [F,C,kh,kw] kernels.
  /// Output spatial extent is floor((H + 2*padding - kh) / stride) + 1.
  Tensor conv2d(const Tensor& input, const Tensor& kernels, int stride,
                int padding);

  /// Softmax over the last axis, stabilized by max subtraction.
  Tensor softmax(const Tensor& logits);

  /// Inverted dropout: each element is zeroed with probability `rate` and
  /// kept scaled by 1/(1-rate) otherwise. A fresh mask is drawn from `rng`
  /// on every call and recorded for backward.
  Tensor dropout(const Tensor& a, double rate, RngStream& rng);

  Tensor reduce(ReduceKind kind, const Tensor& a,
                std::optional<std::size_t> axis = std::nullopt);
  Tensor sum(const Tensor& a);
  Tensor mean(const Tensor& a);

  Tensor reshape(const Tensor& a, Shape shape);
  Tensor upsample_nearest(const Tensor& a, int factor);

  /// Permutes a [C,H,W] tensor to [H,W,C] so per-pixel class axes land last.
  Tensor chw_to_hwc(const Tensor& a);

  /// Gradient of a scalar output with respect to every node. Unreachable
  /// nodes get zero gradients. The graph is left unchanged.
  Gradients backward(const Tensor& output) const;

  std::size_t size() const { return nodes_.size(); }
  std::uint64_t serial() const { return serial_; }
  const Tensor& value(int node) const;

 private:
  struct Node {
    int op;
    int a = -1;
    int b = -1;
    Tensor out;
    double x0 = 0.0;             // clamp lo / dropout rate
    double x1 = 0.0;             // clamp hi
    int k0 = 0;                  // conv stride / upsample factor
    int k1 = 0;                  // conv padding
    bool has_axis = false;
    std::size_t axis = 0;
    bool requires_grad = true;   // false for constants and constant-only results
    std::vector<double> mask;    // dropout mask
  };

  int ensure_node(const Tensor& t);
  Tensor record(Node node);
  void check_owned(const Tensor& t, const char* op) const;

  std::uint64_t serial_;
  std::vector<Node> nodes_;
};

/// Gradient map returned by Graph::backward, indexed by node id.
class Gradients {
 public:
  explicit Gradients(std::vector<Tensor> by_node)
      : by_node_(std::move(by_node)) {}

  /// Gradient for a tensor that participated in the graph.
  const Tensor& at(const Tensor& t) const;
  const Tensor& at_node(int node) const;
  std::size_t size() const { return by_node_.size(); }

 private:
  std::vector<Tensor> by_node_;
};

/// Builds a scalar from a leaf derived from `x`; must be deterministic
/// across calls (freeze any RNG it uses).
using ScalarFn = std::function<Tensor(Graph&, const Tensor&)>;

/// Max over coordinates of |analytic - central| / (|analytic| + |central|
/// + 1e-12), with the analytic gradient from backward and the central
/// difference at step h.
double finite_diff_check(const ScalarFn& f, const Tensor& x, double h);

}  // namespace uqal
