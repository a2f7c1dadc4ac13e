#include "uqal/graph.hpp"

#include <atomic>
#include <cmath>
#include <stdexcept>
#include <string>

namespace uqal {

namespace {

enum Op : int {
  kLeaf,
  kConstant,
  kAdd,
  kSub,
  kMul,
  kNeg,
  kExp,
  kLog,
  kRelu,
  kClamp,
  kMatmul,
  kConv2d,
  kSoftmax,
  kDropout,
  kReduceSum,
  kReduceMean,
  kReduceMax,
  kReshape,
  kUpsample,
  kChwToHwc,
};

std::atomic<std::uint64_t> g_graph_serial{1};

// outer * len * inner decomposition around a reduction axis
struct AxisSplit {
  std::size_t outer = 1, len = 1, inner = 1;
};

AxisSplit split_axis(const Shape& shape, std::size_t axis) {
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.len = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

Shape drop_axis(const Shape& shape, std::size_t axis) {
  Shape out;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i != axis) out.push_back(shape[i]);
  }
  if (out.empty()) out.push_back(1);
  return out;
}

}  // namespace

Graph::Graph() : serial_(g_graph_serial.fetch_add(1)) {}

const Tensor& Graph::value(int node) const {
  if (node < 0 || node >= static_cast<int>(nodes_.size())) {
    throw std::invalid_argument("graph: node id out of range");
  }
  return nodes_[static_cast<std::size_t>(node)].out;
}

void Graph::check_owned(const Tensor& t, const char* op) const {
  if (t.node < 0) return;
  if (t.graph_serial != serial_ ||
      t.node >= static_cast<int>(nodes_.size())) {
    throw std::invalid_argument(std::string(op) +
                                ": tensor belongs to a different graph");
  }
}

int Graph::ensure_node(const Tensor& t) {
  if (t.node >= 0) return t.node;
  Node node;
  node.op = kConstant;
  node.out = t.detached();
  node.requires_grad = false;
  nodes_.push_back(std::move(node));
  const int id = static_cast<int>(nodes_.size()) - 1;
  nodes_.back().out.node = id;
  nodes_.back().out.graph_serial = serial_;
  return id;
}

Tensor Graph::record(Node node) {
  if (node.op != kLeaf && node.op != kConstant) {
    bool needs_grad = false;
    if (node.a >= 0) needs_grad |= nodes_[static_cast<std::size_t>(node.a)].requires_grad;
    if (node.b >= 0) needs_grad |= nodes_[static_cast<std::size_t>(node.b)].requires_grad;
    node.requires_grad = needs_grad;
  }
  nodes_.push_back(std::move(node));
  const int id = static_cast<int>(nodes_.size()) - 1;
  nodes_.back().out.node = id;
  nodes_.back().out.graph_serial = serial_;
  return nodes_.back().out;
}

Tensor Graph::leaf(const Tensor& value) {
  Node node;
  node.op = kLeaf;
  node.out = value.detached();
  return record(std::move(node));
}

Tensor Graph::constant(const Tensor& value) {
  Node node;
  node.op = kConstant;
  node.out = value.detached();
  node.requires_grad = false;
  return record(std::move(node));
}

Tensor Graph::elementwise(EwKind kind, const Tensor& a, const Tensor* b,
                          double lo, double hi) {
  check_owned(a, "elementwise");
  const bool binary =
      kind == EwKind::kAdd || kind == EwKind::kSub || kind == EwKind::kMul;
  if (binary != (b != nullptr)) {
    throw std::invalid_argument("elementwise: operand count does not match kind");
  }

  Node node;
  node.a = ensure_node(a);
  const std::size_t n = a.numel();

  if (binary) {
    check_owned(*b, "elementwise");
    const bool a_scalar = a.is_scalar();
    const bool b_scalar = b->is_scalar();
    if (!same_shape(a, *b) && !a_scalar && !b_scalar) {
      throw std::invalid_argument(
          "elementwise: shape mismatch " + shape_to_string(a.shape) + " vs " +
          shape_to_string(b->shape) + " (only scalar broadcast is supported)");
    }
    node.b = ensure_node(*b);
    const Shape& out_shape = b_scalar ? a.shape : b->shape;
    const std::size_t m = shape_numel(out_shape);
    std::vector<double> out(m);
    const auto& av = a.values;
    const auto& bv = b->values;
    for (std::size_t i = 0; i < m; ++i) {
      const double x = av[a_scalar ? 0 : i];
      const double y = bv[b_scalar ? 0 : i];
      switch (kind) {
        case EwKind::kAdd: out[i] = x + y; break;
        case EwKind::kSub: out[i] = x - y; break;
        case EwKind::kMul: out[i] = x * y; break;
        default: break;
      }
    }
    node.op = kind == EwKind::kAdd ? kAdd : kind == EwKind::kSub ? kSub : kMul;
    node.out = Tensor(out_shape, std::move(out));
    return record(std::move(node));
  }

  std::vector<double> out(n);
  switch (kind) {
    case EwKind::kNeg:
      node.op = kNeg;
      for (std::size_t i = 0; i < n; ++i) out[i] = -a.values[i];
      break;
    case EwKind::kExp:
      node.op = kExp;
      for (std::size_t i = 0; i < n; ++i) out[i] = std::exp(a.values[i]);
      break;
    case EwKind::kLog:
      node.op = kLog;
      for (std::size_t i = 0; i < n; ++i) {
        if (!(a.values[i] > 0.0)) {
          throw std::invalid_argument(
              "log: input must be strictly positive, got " +
              std::to_string(a.values[i]));
        }
        out[i] = std::log(a.values[i]);
      }
      break;
    case EwKind::kRelu:
      node.op = kRelu;
      for (std::size_t i = 0; i < n; ++i)
        out[i] = a.values[i] > 0.0 ? a.values[i] : 0.0;
      break;
    case EwKind::kClamp:
      node.op = kClamp;
      node.x0 = lo;
      node.x1 = hi;
      if (!(lo <= hi)) throw std::invalid_argument("clamp: lo must be <= hi");
      for (std::size_t i = 0; i < n; ++i) {
        double v = a.values[i];
        out[i] = v < lo ? lo : (v > hi ? hi : v);
      }
      break;
    default:
      throw std::invalid_argument("elementwise: unknown kind");
  }
  node.out = Tensor(a.shape, std::move(out));
  return record(std::move(node));
}

Tensor Graph::add(const Tensor& a, const Tensor& b) {
  return elementwise(EwKind::kAdd, a, &b);
}
Tensor Graph::sub(const Tensor& a, const Tensor& b) {
  return elementwise(EwKind::kSub, a, &b);
}
Tensor Graph::mul(const Tensor& a, const Tensor& b) {
  return elementwise(EwKind::kMul, a, &b);
}
Tensor Graph::neg(const Tensor& a) { return elementwise(EwKind::kNeg, a); }
Tensor Graph::exp(const Tensor& a) { return elementwise(EwKind::kExp, a); }
Tensor Graph::log(const Tensor& a) { return elementwise(EwKind::kLog, a); }
Tensor Graph::relu(const Tensor& a) { return elementwise(EwKind::kRelu, a); }
Tensor Graph::clamp(const Tensor& a, double lo, double hi) {
  return elementwise(EwKind::kClamp, a, nullptr, lo, hi);
}

Tensor Graph::matmul(const Tensor& a, const Tensor& b) {
  check_owned(a, "matmul");
  check_owned(b, "matmul");
  if (a.shape.size() != 2 || b.shape.size() != 2) {
    throw std::invalid_argument("matmul: operands must be 2-D");
  }
  const std::size_t m = a.shape[0], k = a.shape[1];
  const std::size_t k2 = b.shape[0], n = b.shape[1];
  if (k != k2) {
    throw std::invalid_argument("matmul: inner dimensions disagree, " +
                                shape_to_string(a.shape) + " vs " +
                                shape_to_string(b.shape));
  }
  std::vector<double> out(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t kk = 0; kk < k; ++kk) {
      const double av = a.values[i * k + kk];
      const double* brow = &b.values[kk * n];
      double* orow = &out[i * n];
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
  Node node;
  node.op = kMatmul;
  node.a = ensure_node(a);
  node.b = ensure_node(b);
  node.out = Tensor({m, n}, std::move(out));
  return record(std::move(node));
}

Tensor Graph::conv2d(const Tensor& input, const Tensor& kernels, int stride,
                     int padding) {
  check_owned(input, "conv2d");
  check_owned(kernels, "conv2d");
  if (input.shape.size() != 3 || kernels.shape.size() != 4) {
    throw std::invalid_argument("conv2d: expected [C,H,W] input and [F,C,kh,kw] kernels");
  }
  if (stride < 1) throw std::invalid_argument("conv2d: stride must be >= 1");
  if (padding < 0) throw std::invalid_argument("conv2d: padding must be >= 0");
  const std::size_t C = input.shape[0], H = input.shape[1], W = input.shape[2];
  const std::size_t F = kernels.shape[0], KC = kernels.shape[1];
  const std::size_t kh = kernels.shape[2], kw = kernels.shape[3];
  if (KC != C) {
    throw std::invalid_argument("conv2d: kernel channels disagree with input");
  }
  if (kh > H + 2 * static_cast<std::size_t>(padding) ||
      kw > W + 2 * static_cast<std::size_t>(padding)) {
    throw std::invalid_argument("conv2d: kernel larger than padded input");
  }
  const std::size_t s = static_cast<std::size_t>(stride);
  const std::size_t OH = (H + 2 * padding - kh) / s + 1;
  const std::size_t OW = (W + 2 * padding - kw) / s + 1;

  std::vector<double> out(F * OH * OW, 0.0);
  for (std::size_t f = 0; f < F; ++f) {
    for (std::size_t oi = 0; oi < OH; ++oi) {
      for (std::size_t oj = 0; oj < OW; ++oj) {
        double acc = 0.0;
        for (std::size_t c = 0; c < C; ++c) {
          for (std::size_t u = 0; u < kh; ++u) {
            const long long y =
                static_cast<long long>(oi * s + u) - padding;
            if (y < 0 || y >= static_cast<long long>(H)) continue;
            for (std::size_t v = 0; v < kw; ++v) {
              const long long x =
                  static_cast<long long>(oj * s + v) - padding;
              if (x < 0 || x >= static_cast<long long>(W)) continue;
              acc += input.values[(c * H + y) * W + x] *
                     kernels.values[((f * C + c) * kh + u) * kw + v];
            }
          }
        }
        out[(f * OH + oi) * OW + oj] = acc;
      }
    }
  }
  Node node;
  node.op = kConv2d;
  node.a = ensure_node(input);
  node.b = ensure_node(kernels);
  node.k0 = stride;
  node.k1 = padding;
  node.out = Tensor({F, OH, OW}, std::move(out));
  return record(std::move(node));
}

Tensor Graph::softmax(const Tensor& logits) {
  check_owned(logits, "softmax");
  if (logits.shape.empty()) {
    throw std::invalid_argument("softmax: rank-0 input");
  }
  const std::size_t L = logits.shape.back();
  if (L < 2) throw std::invalid_argument("softmax: last axis must have length >= 2");
  const std::size_t rows = logits.numel() / L;
  std::vector<double> out(logits.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* z = &logits.values[r * L];
    double m = z[0];
    for (std::size_t i = 1; i < L; ++i) m = z[i] > m ? z[i] : m;
    double total = 0.0;
    for (std::size_t i = 0; i < L; ++i) {
      out[r * L + i] = std::exp(z[i] - m);
      total += out[r * L + i];
    }
    for (std::size_t i = 0; i < L; ++i) out[r * L + i] /= total;
  }
  Node node;
  node.op = kSoftmax;
  node.a = ensure_node(logits);
  node.out = Tensor(logits.shape, std::move(out));
  return record(std::move(node));
}

Tensor Graph::dropout(const Tensor& a, double rate, RngStream& rng) {
  check_owned(a, "dropout");
  if (!(rate >= 0.0 && rate < 1.0)) {
    throw std::invalid_argument("dropout: rate must lie in [0, 1), got " +
                                std::to_string(rate));
  }
  const std::size_t n = a.numel();
  const double keep_scale = 1.0 / (1.0 - rate);
  std::vector<double> mask(n);
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    mask[i] = rng.uniform() >= rate ? keep_scale : 0.0;
    out[i] = a.values[i] * mask[i];
  }
  Node node;
  node.op = kDropout;
  node.a = ensure_node(a);
  node.x0 = rate;
  node.mask = std::move(mask);
  node.out = Tensor(a.shape, std::move(out));
  return record(std::move(node));
}

Tensor Graph::reduce(ReduceKind kind, const Tensor& a,
                     std::optional<std::size_t> axis) {
  check_owned(a, "reduce");
  Node node;
  node.a = ensure_node(a);
  node.op = kind == ReduceKind::kSum    ? kReduceSum
            : kind == ReduceKind::kMean ? kReduceMean
                                        : kReduceMax;
  if (axis) {
    if (*axis >= a.shape.size()) {
      throw std::invalid_argument("reduce: axis " + std::to_string(*axis) +
                                  " out of range for " +
                                  shape_to_string(a.shape));
    }
    node.has_axis = true;
    node.axis = *axis;
    const AxisSplit sp = split_axis(a.shape, *axis);
    std::vector<double> out(sp.outer * sp.inner);
    for (std::size_t o = 0; o < sp.outer; ++o) {
      for (std::size_t i = 0; i < sp.inner; ++i) {
        double acc = a.values[(o * sp.len) * sp.inner + i];
        for (std::size_t l = 1; l < sp.len; ++l) {
          const double v = a.values[(o * sp.len + l) * sp.inner + i];
          if (kind == ReduceKind::kMax) {
            acc = v > acc ? v : acc;
          } else {
            acc += v;
          }
        }
        if (kind == ReduceKind::kMean) acc /= static_cast<double>(sp.len);
        out[o * sp.inner + i] = acc;
      }
    }
    node.out = Tensor(drop_axis(a.shape, *axis), std::move(out));
    return record(std::move(node));
  }

  double acc = a.values[0];
  for (std::size_t i = 1; i < a.numel(); ++i) {
    const double v = a.values[i];
    if (kind == ReduceKind::kMax) {
      acc = v > acc ? v : acc;
    } else {
      acc += v;
    }
  }
  if (kind == ReduceKind::kMean) acc /= static_cast<double>(a.numel());
  node.out = Tensor::scalar(acc);
  return record(std::move(node));
}

Tensor Graph::sum(const Tensor& a) { return reduce(ReduceKind::kSum, a); }
Tensor Graph::mean(const Tensor& a) { return reduce(ReduceKind::kMean, a); }

Tensor Graph::reshape(const Tensor& a, Shape shape) {
  check_owned(a, "reshape");
  if (shape_numel(shape) != a.numel()) {
    throw std::invalid_argument("reshape: element count mismatch");
  }
  Node node;
  node.op = kReshape;
  node.a = ensure_node(a);
  node.out = Tensor(std::move(shape), a.values);
  return record(std::move(node));
}

Tensor Graph::upsample_nearest(const Tensor& a, int factor) {
  check_owned(a, "upsample_nearest");
  if (a.shape.size() != 3) {
    throw std::invalid_argument("upsample_nearest: expected [C,H,W]");
  }
  if (factor < 1) throw std::invalid_argument("upsample_nearest: factor must be >= 1");
  const std::size_t C = a.shape[0], H = a.shape[1], W = a.shape[2];
  const std::size_t k = static_cast<std::size_t>(factor);
  std::vector<double> out(C * H * k * W * k);
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t i = 0; i < H * k; ++i) {
      for (std::size_t j = 0; j < W * k; ++j) {
        out[(c * H * k + i) * W * k + j] =
            a.values[(c * H + i / k) * W + j / k];
      }
    }
  }
  Node node;
  node.op = kUpsample;
  node.a = ensure_node(a);
  node.k0 = factor;
  node.out = Tensor({C, H * k, W * k}, std::move(out));
  return record(std::move(node));
}

Tensor Graph::chw_to_hwc(const Tensor& a) {
  check_owned(a, "chw_to_hwc");
  if (a.shape.size() != 3) {
    throw std::invalid_argument("chw_to_hwc: expected [C,H,W]");
  }
  const std::size_t C = a.shape[0], H = a.shape[1], W = a.shape[2];
  std::vector<double> out(C * H * W);
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t i = 0; i < H; ++i) {
      for (std::size_t j = 0; j < W; ++j) {
        out[(i * W + j) * C + c] = a.values[(c * H + i) * W + j];
      }
    }
  }
  Node node;
  node.op = kChwToHwc;
  node.a = ensure_node(a);
  node.out = Tensor({H, W, C}, std::move(out));
  return record(std::move(node));
}

const Tensor& Gradients::at(const Tensor& t) const {
  if (t.node < 0) {
    throw std::invalid_argument("gradients: tensor did not participate in the graph");
  }
  return at_node(t.node);
}

const Tensor& Gradients::at_node(int node) const {
  if (node < 0 || node >= static_cast<int>(by_node_.size())) {
    throw std::invalid_argument("gradients: node id out of range");
  }
  return by_node_[static_cast<std::size_t>(node)];
}

Gradients Graph::backward(const Tensor& output) const {
  check_owned(output, "backward");
  if (output.node < 0) {
    throw std::invalid_argument("backward: output is not part of this graph");
  }
  if (output.numel() != 1) {
    throw std::invalid_argument("backward: output must be scalar, got " +
                                shape_to_string(output.shape));
  }

  std::vector<Tensor> grads(nodes_.size());
  std::vector<bool> touched(nodes_.size(), false);

  auto grad_of = [&](int id) -> Tensor& {
    auto& g = grads[static_cast<std::size_t>(id)];
    if (!touched[static_cast<std::size_t>(id)]) {
      g = Tensor::zeros(nodes_[static_cast<std::size_t>(id)].out.shape);
      touched[static_cast<std::size_t>(id)] = true;
    }
    return g;
  };

  grad_of(output.node).values[0] = 1.0;

  for (int id = static_cast<int>(nodes_.size()) - 1; id >= 0; --id) {
    if (!touched[static_cast<std::size_t>(id)]) continue;
    const Node& node = nodes_[static_cast<std::size_t>(id)];
    const Tensor& g = grads[static_cast<std::size_t>(id)];
    if (node.op == kLeaf || node.op == kConstant) continue;

    const Tensor& av = nodes_[static_cast<std::size_t>(node.a)].out;
    // accumulate into a parent with scalar-broadcast awareness; constants
    // and constant-only subtrees take no gradient
    auto accumulate = [&](int parent, const Tensor& src,
                          const std::vector<double>& contrib) {
      if (!nodes_[static_cast<std::size_t>(parent)].requires_grad) return;
      Tensor& dst = grad_of(parent);
      if (dst.numel() == contrib.size() && same_shape(dst, src)) {
        for (std::size_t i = 0; i < contrib.size(); ++i)
          dst.values[i] += contrib[i];
      } else if (dst.is_scalar()) {
        double total = 0.0;
        for (double v : contrib) total += v;
        dst.values[0] += total;
      } else {
        throw std::runtime_error("backward: internal shape mismatch");
      }
    };

    switch (node.op) {
      case kAdd:
      case kSub: {
        const Tensor& bv = nodes_[static_cast<std::size_t>(node.b)].out;
        accumulate(node.a, node.out, g.values);
        std::vector<double> gb(g.values);
        if (node.op == kSub) {
          for (double& v : gb) v = -v;
        }
        accumulate(node.b, node.out, gb);
        (void)bv;
        break;
      }
      case kMul: {
        const Tensor& bv = nodes_[static_cast<std::size_t>(node.b)].out;
        const std::size_t n = g.numel();
        std::vector<double> ga(n), gb(n);
        const bool a_scalar = av.is_scalar();
        const bool b_scalar = bv.is_scalar();
        for (std::size_t i = 0; i < n; ++i) {
          ga[i] = g.values[i] * bv.values[b_scalar ? 0 : i];
          gb[i] = g.values[i] * av.values[a_scalar ? 0 : i];
        }
        accumulate(node.a, node.out, ga);
        accumulate(node.b, node.out, gb);
        break;
      }
      case kNeg: {
        std::vector<double> ga(g.values);
        for (double& v : ga) v = -v;
        accumulate(node.a, node.out, ga);
        break;
      }
      case kExp: {
        std::vector<double> ga(g.numel());
        for (std::size_t i = 0; i < ga.size(); ++i)
          ga[i] = g.values[i] * node.out.values[i];
        accumulate(node.a, node.out, ga);
        break;
      }
      case kLog: {
        std::vector<double> ga(g.numel());
        for (std::size_t i = 0; i < ga.size(); ++i)
          ga[i] = g.values[i] / av.values[i];
        accumulate(node.a, node.out, ga);
        break;
      }
      case kRelu: {
        std::vector<double> ga(g.numel());
        for (std::size_t i = 0; i < ga.size(); ++i)
          ga[i] = av.values[i] > 0.0 ? g.values[i] : 0.0;
        accumulate(node.a, node.out, ga);
        break;
      }
      case kClamp: {
        std::vector<double> ga(g.numel());
        for (std::size_t i = 0; i < ga.size(); ++i) {
          const double v = av.values[i];
          ga[i] = (v >= node.x0 && v <= node.x1) ? g.values[i] : 0.0;
        }
        accumulate(node.a, node.out, ga);
        break;
      }
      case kMatmul: {
        const Tensor& bv = nodes_[static_cast<std::size_t>(node.b)].out;
        const std::size_t m = av.shape[0], k = av.shape[1], n = bv.shape[1];
        const bool need_a = nodes_[static_cast<std::size_t>(node.a)].requires_grad;
        const bool need_b = nodes_[static_cast<std::size_t>(node.b)].requires_grad;
        if (need_a) {
          std::vector<double> ga(m * k, 0.0);
          for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t j = 0; j < n; ++j) {
              const double gv = g.values[i * n + j];
              for (std::size_t kk = 0; kk < k; ++kk) {
                ga[i * k + kk] += gv * bv.values[kk * n + j];
              }
            }
          }
          accumulate(node.a, av, ga);
        }
        if (need_b) {
          std::vector<double> gb(k * n, 0.0);
          for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t j = 0; j < n; ++j) {
              const double gv = g.values[i * n + j];
              for (std::size_t kk = 0; kk < k; ++kk) {
                gb[kk * n + j] += av.values[i * k + kk] * gv;
              }
            }
          }
          accumulate(node.b, bv, gb);
        }
        break;
      }
      case kConv2d: {
        const Tensor& kv = nodes_[static_cast<std::size_t>(node.b)].out;
        const std::size_t C = av.shape[0], H = av.shape[1], W = av.shape[2];
        const std::size_t F = kv.shape[0], kh = kv.shape[2], kw = kv.shape[3];
        const std::size_t OH = node.out.shape[1], OW = node.out.shape[2];
        const std::size_t s = static_cast<std::size_t>(node.k0);
        const int padding = node.k1;
        const bool need_a = nodes_[static_cast<std::size_t>(node.a)].requires_grad;
        const bool need_k = nodes_[static_cast<std::size_t>(node.b)].requires_grad;
        std::vector<double> ga(need_a ? av.numel() : 0, 0.0);
        std::vector<double> gk(need_k ? kv.numel() : 0, 0.0);
        for (std::size_t f = 0; f < F; ++f) {
          for (std::size_t oi = 0; oi < OH; ++oi) {
            for (std::size_t oj = 0; oj < OW; ++oj) {
              const double gv = g.values[(f * OH + oi) * OW + oj];
              if (gv == 0.0) continue;
              for (std::size_t c = 0; c < C; ++c) {
                for (std::size_t u = 0; u < kh; ++u) {
                  const long long y =
                      static_cast<long long>(oi * s + u) - padding;
                  if (y < 0 || y >= static_cast<long long>(H)) continue;
                  for (std::size_t v = 0; v < kw; ++v) {
                    const long long x =
                        static_cast<long long>(oj * s + v) - padding;
                    if (x < 0 || x >= static_cast<long long>(W)) continue;
                    const std::size_t in_idx = (c * H + y) * W + x;
                    const std::size_t k_idx = ((f * C + c) * kh + u) * kw + v;
                    if (need_a) ga[in_idx] += gv * kv.values[k_idx];
                    if (need_k) gk[k_idx] += gv * av.values[in_idx];
                  }
                }
              }
            }
          }
        }
        if (need_a) accumulate(node.a, av, ga);
        if (need_k) accumulate(node.b, kv, gk);
        break;
      }
      case kSoftmax: {
        const std::size_t L = node.out.shape.back();
        const std::size_t rows = node.out.numel() / L;
        std::vector<double> ga(node.out.numel());
        for (std::size_t r = 0; r < rows; ++r) {
          const double* p = &node.out.values[r * L];
          const double* gr = &g.values[r * L];
          double dot = 0.0;
          for (std::size_t i = 0; i < L; ++i) dot += gr[i] * p[i];
          for (std::size_t i = 0; i < L; ++i)
            ga[r * L + i] = p[i] * (gr[i] - dot);
        }
        accumulate(node.a, av, ga);
        break;
      }
      case kDropout: {
        std::vector<double> ga(g.numel());
        for (std::size_t i = 0; i < ga.size(); ++i)
          ga[i] = g.values[i] * node.mask[i];
        accumulate(node.a, av, ga);
        break;
      }
      case kReduceSum:
      case kReduceMean:
      case kReduceMax: {
        std::vector<double> ga(av.numel(), 0.0);
        if (!node.has_axis) {
          const double gv = g.values[0];
          if (node.op == kReduceSum) {
            for (double& v : ga) v = gv;
          } else if (node.op == kReduceMean) {
            const double scaled = gv / static_cast<double>(av.numel());
            for (double& v : ga) v = scaled;
          } else {
            std::size_t best = 0;
            for (std::size_t i = 1; i < av.numel(); ++i) {
              if (av.values[i] > av.values[best]) best = i;
            }
            ga[best] = gv;
          }
        } else {
          const AxisSplit sp = split_axis(av.shape, node.axis);
          for (std::size_t o = 0; o < sp.outer; ++o) {
            for (std::size_t i = 0; i < sp.inner; ++i) {
              const double gv = g.values[o * sp.inner + i];
              if (node.op == kReduceMax) {
                std::size_t best = 0;
                double bv = av.values[(o * sp.len) * sp.inner + i];
                for (std::size_t l = 1; l < sp.len; ++l) {
                  const double v = av.values[(o * sp.len + l) * sp.inner + i];
                  if (v > bv) {
                    bv = v;
                    best = l;
                  }
                }
                ga[(o * sp.len + best) * sp.inner + i] = gv;
              } else {
                const double scaled =
                    node.op == kReduceMean
                        ? gv / static_cast<double>(sp.len)
                        : gv;
                for (std::size_t l = 0; l < sp.len; ++l)
                  ga[(o * sp.len + l) * sp.inner + i] = scaled;
              }
            }
          }
        }
        accumulate(node.a, av, ga);
        break;
      }
      case kReshape: {
        accumulate(node.a, av, g.values);
        break;
      }
      case kUpsample: {
        const std::size_t C = av.shape[0], H = av.shape[1], W = av.shape[2];
        const std::size_t k = static_cast<std::size_t>(node.k0);
        std::vector<double> ga(av.numel(), 0.0);
        for (std::size_t c = 0; c < C; ++c) {
          for (std::size_t i = 0; i < H * k; ++i) {
            for (std::size_t j = 0; j < W * k; ++j) {
              ga[(c * H + i / k) * W + j / k] +=
                  g.values[(c * H * k + i) * W * k + j];
            }
          }
        }
        accumulate(node.a, av, ga);
        break;
      }
      case kChwToHwc: {
        const std::size_t C = av.shape[0], H = av.shape[1], W = av.shape[2];
        std::vector<double> ga(av.numel());
        for (std::size_t c = 0; c < C; ++c) {
          for (std::size_t i = 0; i < H; ++i) {
            for (std::size_t j = 0; j < W; ++j) {
              ga[(c * H + i) * W + j] = g.values[(i * W + j) * C + c];
            }
          }
        }
        accumulate(node.a, av, ga);
        break;
      }
      default:
        throw std::runtime_error("backward: unhandled op");
    }
  }

  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    if (!touched[i]) grads[i] = Tensor::zeros(nodes_[i].out.shape);
  }
  return Gradients(std::move(grads));
}

double finite_diff_check(const ScalarFn& f, const Tensor& x, double h) {
  if (!(h > 0.0)) throw std::invalid_argument("finite_diff_check: h must be positive");

  Graph g;
  Tensor xl = g.leaf(x);
  Tensor out = f(g, xl);
  if (out.numel() != 1) {
    throw std::invalid_argument("finite_diff_check: f must return a scalar");
  }
  const Gradients grads = g.backward(out);
  const Tensor analytic = grads.at(xl);

  auto eval = [&](const Tensor& point) {
    Graph g2;
    Tensor leaf = g2.leaf(point);
    return f(g2, leaf).item();
  };

  Tensor probe = x.detached();
  double worst = 0.0;
  for (std::size_t i = 0; i < probe.numel(); ++i) {
    const double original = probe.values[i];
    probe.values[i] = original + h;
    const double f_plus = eval(probe);
    probe.values[i] = original - h;
    const double f_minus = eval(probe);
    probe.values[i] = original;
    const double central = (f_plus - f_minus) / (2.0 * h);
    const double a = analytic.values[i];
    const double rel =
        std::abs(a - central) / (std::abs(a) + std::abs(central) + 1e-12);
    if (rel > worst) worst = rel;
  }
  return worst;
}

}  // namespace uqal
