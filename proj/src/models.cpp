#include "uqal/models.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <sstream>
#include <stdexcept>

#include "serialize.hpp"

namespace uqal {

using nlohmann::json;

LayerSpec LayerSpec::dense(std::size_t in, std::size_t out) {
  LayerSpec l;
  l.kind = LayerKind::kDense;
  l.in = in;
  l.out = out;
  return l;
}

LayerSpec LayerSpec::conv(std::size_t in_channels, std::size_t out_channels,
                          std::size_t kernel, int stride, int padding) {
  LayerSpec l;
  l.kind = LayerKind::kConv;
  l.in_channels = in_channels;
  l.out_channels = out_channels;
  l.kernel = kernel;
  l.stride = stride;
  l.padding = padding;
  return l;
}

LayerSpec LayerSpec::relu() {
  LayerSpec l;
  l.kind = LayerKind::kRelu;
  return l;
}

LayerSpec LayerSpec::dropout(double rate) {
  LayerSpec l;
  l.kind = LayerKind::kDropout;
  l.rate = rate;
  return l;
}

LayerSpec LayerSpec::flatten() {
  LayerSpec l;
  l.kind = LayerKind::kFlatten;
  return l;
}

LayerSpec LayerSpec::upsample(int factor) {
  LayerSpec l;
  l.kind = LayerKind::kUpsampleNearest;
  l.factor = factor;
  return l;
}

std::string LayerSpec::kind_name() const {
  switch (kind) {
    case LayerKind::kDense: return "dense";
    case LayerKind::kConv: return "conv";
    case LayerKind::kRelu: return "relu";
    case LayerKind::kDropout: return "dropout";
    case LayerKind::kFlatten: return "flatten";
    case LayerKind::kUpsampleNearest: return "upsample-nearest";
  }
  return "?";
}

namespace {

// Walks the layer list and returns the shape entering the head (before the
// softmax); collects composition errors instead of stopping at the first.
Shape walk_shapes(const NetworkSpec& spec, std::vector<std::string>* errors) {
  auto fail = [&](std::size_t i, const std::string& msg) {
    if (errors) {
      errors->push_back("layer " + std::to_string(i) + " (" +
                        spec.layers[i].kind_name() + "): " + msg);
    }
  };
  Shape cur = spec.input_shape;
  if (cur.size() == 1) cur = {1, cur[0]};
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const LayerSpec& l = spec.layers[i];
    switch (l.kind) {
      case LayerKind::kDense:
        if (cur.size() != 2 || cur[0] != 1 || cur[1] != l.in) {
          fail(i, "expects a [1," + std::to_string(l.in) + "] input, got " +
                      shape_to_string(cur));
        }
        cur = {1, l.out};
        break;
      case LayerKind::kConv: {
        if (cur.size() != 3 || cur[0] != l.in_channels) {
          fail(i, "expects " + std::to_string(l.in_channels) +
                      " input channels, got " + shape_to_string(cur));
          cur = {l.out_channels, 1, 1};
          break;
        }
        const std::size_t padded_h = cur[1] + 2 * l.padding;
        const std::size_t padded_w = cur[2] + 2 * l.padding;
        if (l.kernel > padded_h || l.kernel > padded_w || l.stride < 1) {
          fail(i, "kernel does not fit the padded input");
          cur = {l.out_channels, 1, 1};
          break;
        }
        cur = {l.out_channels, (padded_h - l.kernel) / l.stride + 1,
               (padded_w - l.kernel) / l.stride + 1};
        break;
      }
      case LayerKind::kRelu:
        break;
      case LayerKind::kDropout:
        if (!(l.rate >= 0.0 && l.rate < 1.0)) fail(i, "rate must lie in [0,1)");
        break;
      case LayerKind::kFlatten:
        cur = {1, shape_numel(cur)};
        break;
      case LayerKind::kUpsampleNearest:
        if (cur.size() != 3) {
          fail(i, "expects a [C,H,W] input, got " + shape_to_string(cur));
        } else {
          cur = {cur[0], cur[1] * l.factor, cur[2] * l.factor};
        }
        break;
    }
  }
  return cur;
}

int last_dense_index(const NetworkSpec& spec) {
  for (int i = static_cast<int>(spec.layers.size()) - 1; i >= 0; --i) {
    if (spec.layers[static_cast<std::size_t>(i)].kind == LayerKind::kDense) {
      return i;
    }
  }
  return -1;
}

}  // namespace

void NetworkSpec::validate() const {
  std::vector<std::string> errors;
  if (input_shape.size() != 1 && input_shape.size() != 3) {
    errors.push_back("input shape must be [d] or [C,H,W]");
  }
  if (num_classes < 2) errors.push_back("need at least 2 classes");
  if (layers.empty()) errors.push_back("no layers");

  const Shape head = walk_shapes(*this, &errors);
  if (errors.empty()) {
    if (segmentation) {
      if (head.size() != 3 || head[0] != num_classes) {
        errors.push_back("segmenter must end with [L,H,W] activations, got " +
                         shape_to_string(head));
      }
    } else {
      if (head.size() != 2 || head[0] != 1 || head[1] != num_classes) {
        errors.push_back("classifier must end with [1,L] activations, got " +
                         shape_to_string(head));
      }
    }
  }

  const bool has_dropout_layer =
      std::any_of(layers.begin(), layers.end(), [](const LayerSpec& l) {
        return l.kind == LayerKind::kDropout;
      });
  switch (dropout_mode) {
    case DropoutMode::kNone:
      if (has_dropout_layer) {
        errors.push_back("dropout layers present but dropout_mode is none");
      }
      break;
    case DropoutMode::kAdHoc:
      if (!has_dropout_layer) {
        errors.push_back("ad-hoc mode requires dropout layers in the spec");
      }
      break;
    case DropoutMode::kPostHoc:
      if (has_dropout_layer) {
        errors.push_back("post-hoc mode requires a dropout-free base spec");
      }
      if (posthoc_sites.empty()) {
        errors.push_back("post-hoc mode needs at least one injection site");
      }
      if (!(posthoc_rate > 0.0 && posthoc_rate < 1.0)) {
        errors.push_back("post-hoc rate must lie in (0,1)");
      }
      for (std::size_t s : posthoc_sites) {
        if (s >= layers.size()) {
          errors.push_back("injection site " + std::to_string(s) +
                           " out of range");
        }
      }
      break;
  }

  if (!errors.empty()) {
    std::string msg = "invalid network spec:";
    for (const auto& e : errors) msg += "\n  - " + e;
    throw std::invalid_argument(msg);
  }
}

Shape NetworkSpec::output_shape() const {
  const Shape head = walk_shapes(*this, nullptr);
  if (segmentation) return {head[1], head[2], num_classes};
  return {num_classes};
}

std::vector<std::size_t> NetworkSpec::relu_sites() const {
  std::vector<std::size_t> sites;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (layers[i].kind == LayerKind::kRelu) sites.push_back(i);
  }
  return sites;
}

NetworkSpec NetworkSpec::mlp_classifier(std::size_t input_dim,
                                        const std::vector<std::size_t>& hidden,
                                        std::size_t num_classes,
                                        DropoutMode mode, double rate) {
  NetworkSpec spec;
  spec.input_shape = {input_dim};
  spec.num_classes = num_classes;
  spec.dropout_mode = mode;
  std::size_t prev = input_dim;
  for (std::size_t h : hidden) {
    spec.layers.push_back(LayerSpec::dense(prev, h));
    spec.layers.push_back(LayerSpec::relu());
    if (mode == DropoutMode::kAdHoc) {
      spec.layers.push_back(LayerSpec::dropout(rate));
    }
    prev = h;
  }
  spec.layers.push_back(LayerSpec::dense(prev, num_classes));
  if (mode == DropoutMode::kPostHoc) {
    spec.posthoc_sites = spec.relu_sites();
    spec.posthoc_rate = rate;
  }
  spec.validate();
  return spec;
}

NetworkSpec NetworkSpec::conv_classifier(const Shape& input_shape,
                                         std::size_t num_classes,
                                         DropoutMode mode, double rate) {
  if (input_shape.size() != 3) {
    throw std::invalid_argument("conv_classifier: input must be [C,H,W]");
  }
  NetworkSpec spec;
  spec.input_shape = input_shape;
  spec.num_classes = num_classes;
  spec.dropout_mode = mode;
  spec.layers.push_back(LayerSpec::conv(input_shape[0], 8, 3, 1, 1));
  spec.layers.push_back(LayerSpec::relu());
  if (mode == DropoutMode::kAdHoc) spec.layers.push_back(LayerSpec::dropout(rate));
  spec.layers.push_back(LayerSpec::conv(8, 16, 3, 2, 1));
  spec.layers.push_back(LayerSpec::relu());
  if (mode == DropoutMode::kAdHoc) spec.layers.push_back(LayerSpec::dropout(rate));
  spec.layers.push_back(LayerSpec::flatten());
  const Shape head = walk_shapes(spec, nullptr);
  spec.layers.push_back(LayerSpec::dense(head[1], num_classes));
  if (mode == DropoutMode::kPostHoc) {
    spec.posthoc_sites = spec.relu_sites();
    spec.posthoc_rate = rate;
  }
  spec.validate();
  return spec;
}

NetworkSpec NetworkSpec::seg_net(std::size_t height, std::size_t width,
                                 std::size_t num_classes, DropoutMode mode,
                                 double rate) {
  if (height % 2 != 0 || width % 2 != 0) {
    throw std::invalid_argument("seg_net: spatial extents must be even");
  }
  NetworkSpec spec;
  spec.input_shape = {1, height, width};
  spec.num_classes = num_classes;
  spec.dropout_mode = mode;
  spec.segmentation = true;
  auto block = [&](std::size_t cin, std::size_t cout, int stride) {
    spec.layers.push_back(LayerSpec::conv(cin, cout, 3, stride, 1));
    spec.layers.push_back(LayerSpec::relu());
    if (mode == DropoutMode::kAdHoc) spec.layers.push_back(LayerSpec::dropout(rate));
  };
  // encoder with a single spatial downsample; a deeper bottleneck cannot
  // place shape edges at pixel precision without skip connections
  block(1, 12, 1);
  block(12, 24, 2);
  block(24, 24, 1);
  spec.layers.push_back(LayerSpec::upsample(2));
  block(24, 12, 1);
  spec.layers.push_back(LayerSpec::conv(12, num_classes, 1, 1, 0));
  if (mode == DropoutMode::kPostHoc) {
    spec.posthoc_sites = spec.relu_sites();
    spec.posthoc_rate = rate;
  }
  spec.validate();
  return spec;
}

void Parameters::require_matches(const NetworkSpec& spec) const {
  const Parameters reference = init_params(spec, 0);
  if (reference.layers.size() != layers.size()) {
    throw std::runtime_error("parameters: layer count does not match the spec");
  }
  for (const auto& [idx, named] : reference.layers) {
    const auto it = layers.find(idx);
    if (it == layers.end()) {
      throw std::runtime_error("parameters: missing layer " + std::to_string(idx));
    }
    if (it->second.size() != named.size()) {
      throw std::runtime_error("parameters: tensor set mismatch at layer " +
                               std::to_string(idx));
    }
    for (const auto& [name, t] : named) {
      const auto jt = it->second.find(name);
      if (jt == it->second.end() || jt->second.shape != t.shape) {
        throw std::runtime_error("parameters: shape mismatch for layer " +
                                 std::to_string(idx) + " " + name);
      }
    }
  }
}

void TrainConfig::validate() const {
  if (epochs == 0 || batch_size == 0) {
    throw std::invalid_argument("train config: epochs and batch size must be positive");
  }
  if (learning_rate < 0.0 || momentum < 0.0 || weight_decay < 0.0) {
    throw std::invalid_argument("train config: negative hyperparameter");
  }
}

Parameters init_params(const NetworkSpec& spec, std::uint64_t seed) {
  Parameters params;
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const LayerSpec& l = spec.layers[i];
    if (l.kind == LayerKind::kDense) {
      RngStream rng = RngStream::derive(seed, "init-layer", i);
      const double bound = std::sqrt(6.0 / static_cast<double>(l.in));
      Tensor w = Tensor::zeros({l.in, l.out});
      for (double& v : w.values) v = rng.uniform(-bound, bound);
      params.layers[i]["weight"] = std::move(w);
      params.layers[i]["bias"] = Tensor::zeros({1, l.out});
    } else if (l.kind == LayerKind::kConv) {
      RngStream rng = RngStream::derive(seed, "init-layer", i);
      const double fan_in =
          static_cast<double>(l.in_channels * l.kernel * l.kernel);
      const double bound = std::sqrt(6.0 / fan_in);
      Tensor w = Tensor::zeros({l.out_channels, l.in_channels, l.kernel, l.kernel});
      for (double& v : w.values) v = rng.uniform(-bound, bound);
      params.layers[i]["weight"] = std::move(w);
    }
  }
  return params;
}

ParamTensors intern_params(Graph& g, const ParamTensors& params,
                           bool trainable) {
  ParamTensors interned;
  for (const auto& [idx, named] : params) {
    for (const auto& [name, t] : named) {
      interned[idx][name] = trainable ? g.leaf(t) : g.constant(t);
    }
  }
  return interned;
}

Tensor build_forward(Graph& g, const NetworkSpec& spec,
                     const ParamTensors& params, const Tensor& x,
                     ForwardMode mode, RngStream* rng,
                     const ForwardOptions& options) {
  if (x.shape != spec.input_shape && x.node < 0) {
    throw std::invalid_argument("forward: input shape " +
                                shape_to_string(x.shape) + " does not match " +
                                shape_to_string(spec.input_shape));
  }
  const int feature_stop =
      options.features_only ? last_dense_index(spec) : -1;
  if (options.features_only && feature_stop < 0) {
    throw std::invalid_argument("forward: network has no dense head to take features from");
  }

  auto need_rng = [&]() -> RngStream& {
    if (rng == nullptr) {
      throw std::invalid_argument("forward: sampling mode needs an RNG stream");
    }
    return *rng;
  };

  Tensor cur = x;
  if (spec.input_shape.size() == 1) {
    cur = g.reshape(cur, {1, spec.input_shape[0]});
  }
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    if (feature_stop >= 0 && static_cast<std::size_t>(i) ==
                                 static_cast<std::size_t>(feature_stop)) {
      return g.reshape(cur, {cur.numel()});
    }
    const LayerSpec& l = spec.layers[i];
    switch (l.kind) {
      case LayerKind::kDense: {
        const auto& named = params.at(i);
        cur = g.add(g.matmul(cur, named.at("weight")), named.at("bias"));
        break;
      }
      case LayerKind::kConv: {
        const auto& named = params.at(i);
        cur = g.conv2d(cur, named.at("weight"), l.stride, l.padding);
        break;
      }
      case LayerKind::kRelu:
        cur = g.relu(cur);
        break;
      case LayerKind::kDropout:
        if (mode != ForwardMode::kDeterministic) {
          cur = g.dropout(cur, l.rate, need_rng());
        }
        break;
      case LayerKind::kFlatten:
        cur = g.reshape(cur, {1, cur.numel()});
        break;
      case LayerKind::kUpsampleNearest:
        cur = g.upsample_nearest(cur, l.factor);
        break;
    }
    if (mode == ForwardMode::kMcSample &&
        spec.dropout_mode == DropoutMode::kPostHoc &&
        std::find(spec.posthoc_sites.begin(), spec.posthoc_sites.end(), i) !=
            spec.posthoc_sites.end()) {
      cur = g.dropout(cur, spec.posthoc_rate, need_rng());
    }
  }

  if (spec.segmentation) {
    return g.softmax(g.chw_to_hwc(cur));
  }
  return g.reshape(g.softmax(cur), {spec.num_classes});
}

Tensor forward(const NetworkSpec& spec, const Parameters& params,
               const Tensor& x, ForwardMode mode, RngStream* rng) {
  Graph g;
  return build_forward(g, spec, params.layers, g.leaf(x), mode, rng).detached();
}

Tensor features(const NetworkSpec& spec, const Parameters& params,
                const Tensor& x) {
  Graph g;
  ForwardOptions opts;
  opts.features_only = true;
  return build_forward(g, spec, params.layers, g.leaf(x),
                       ForwardMode::kDeterministic, nullptr, opts)
      .detached();
}

namespace {

// Shared minibatch SGD loop. `sample_loss` builds the per-sample loss on the
// given graph using leaf parameter tensors.
TrainResult train_core(
    const NetworkSpec& spec, std::size_t n_samples, const TrainConfig& cfg,
    const std::function<Tensor(Graph&, const ParamTensors&, std::size_t,
                               RngStream&)>& sample_loss,
    const std::function<double(const Parameters&)>& accuracy_fn) {
  spec.validate();
  cfg.validate();
  if (n_samples == 0) throw std::invalid_argument("train: empty dataset");

  Parameters params = init_params(spec, cfg.seed);
  ParamTensors velocity;
  for (const auto& [idx, named] : params.layers) {
    for (const auto& [name, t] : named) {
      velocity[idx][name] = Tensor::zeros(t.shape);
    }
  }

  RngStream dropout_rng = RngStream::derive(cfg.seed, "train-dropout", 0);
  TrainResult result;
  std::vector<std::size_t> order(n_samples);
  for (std::size_t i = 0; i < n_samples; ++i) order[i] = i;

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    RngStream shuffle_rng = RngStream::derive(cfg.seed, "shuffle", epoch);
    for (std::size_t i = n_samples; i > 1; --i) {
      std::swap(order[i - 1], order[shuffle_rng.next_below(i)]);
    }

    double epoch_loss = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < n_samples; start += cfg.batch_size) {
      const std::size_t stop = std::min(start + cfg.batch_size, n_samples);
      Graph g;
      ParamTensors leaves = intern_params(g, params.layers, true);
      Tensor loss_sum;
      bool first = true;
      for (std::size_t p = start; p < stop; ++p) {
        Tensor li = sample_loss(g, leaves, order[p], dropout_rng);
        loss_sum = first ? li : g.add(loss_sum, li);
        first = false;
      }
      Tensor loss = g.mul(
          loss_sum, Tensor::scalar(1.0 / static_cast<double>(stop - start)));
      if (!std::isfinite(loss.item())) {
        throw std::runtime_error("train: non-finite loss at epoch " +
                                 std::to_string(epoch) + ", batch " +
                                 std::to_string(batches));
      }
      epoch_loss += loss.item();
      ++batches;

      const Gradients grads = g.backward(loss);
      for (auto& [idx, named] : params.layers) {
        for (auto& [name, w] : named) {
          const Tensor& gw = grads.at(leaves[idx][name]);
          Tensor& v = velocity[idx][name];
          for (std::size_t k = 0; k < w.numel(); ++k) {
            v.values[k] = cfg.momentum * v.values[k] -
                          cfg.learning_rate *
                              (gw.values[k] + cfg.weight_decay * w.values[k]);
            w.values[k] += v.values[k];
          }
        }
      }
    }

    EpochLog log;
    log.epoch = epoch;
    log.loss = epoch_loss / static_cast<double>(batches);
    log.accuracy = accuracy_fn(params);
    result.log.push_back(log);
  }

  params.frozen = true;
  result.params = std::move(params);
  return result;
}

Tensor onehot_row(std::size_t num_classes, int label) {
  Tensor t = Tensor::zeros({num_classes});
  t.values[static_cast<std::size_t>(label)] = 1.0;
  return t;
}

}  // namespace

TrainResult train(const NetworkSpec& spec, const Dataset& dataset,
                  const TrainConfig& cfg) {
  if (spec.segmentation) {
    throw std::invalid_argument("train: segmenter spec needs a SegDataset");
  }
  for (int y : dataset.labels) {
    if (y < 0 || y >= static_cast<int>(spec.num_classes)) {
      throw std::invalid_argument("train: label out of range");
    }
  }
  auto sample_loss = [&](Graph& g, const ParamTensors& leaves, std::size_t i,
                         RngStream& rng) {
    Tensor p = build_forward(g, spec, leaves, g.leaf(dataset.inputs[i]),
                             ForwardMode::kTrain, &rng);
    Tensor picked = g.sum(g.mul(p, onehot_row(spec.num_classes, dataset.labels[i])));
    return g.neg(g.log(g.add(picked, Tensor::scalar(1e-12))));
  };
  auto accuracy = [&](const Parameters& params) {
    return classification_accuracy(spec, params, dataset);
  };
  return train_core(spec, dataset.size(), cfg, sample_loss, accuracy);
}

TrainResult train(const NetworkSpec& spec, const SegDataset& dataset,
                  const TrainConfig& cfg) {
  if (!spec.segmentation) {
    throw std::invalid_argument("train: classification spec needs a Dataset");
  }
  const std::size_t omega = dataset.height * dataset.width;
  auto sample_loss = [&](Graph& g, const ParamTensors& leaves, std::size_t i,
                         RngStream& rng) {
    Tensor p = build_forward(g, spec, leaves, g.leaf(dataset.images[i]),
                             ForwardMode::kTrain, &rng);
    Tensor mask = Tensor::zeros({dataset.height, dataset.width, spec.num_classes});
    for (std::size_t pix = 0; pix < omega; ++pix) {
      mask.values[pix * spec.num_classes +
                  static_cast<std::size_t>(dataset.labels[i][pix])] = 1.0;
    }
    Tensor logp = g.log(g.add(p, Tensor::scalar(1e-12)));
    Tensor picked = g.sum(g.mul(logp, mask));
    return g.mul(g.neg(picked), Tensor::scalar(1.0 / static_cast<double>(omega)));
  };
  auto accuracy = [&](const Parameters& params) {
    return pixel_accuracy(spec, params, dataset);
  };
  return train_core(spec, dataset.size(), cfg, sample_loss, accuracy);
}

double classification_accuracy(const NetworkSpec& spec, const Parameters& params,
                               const Dataset& dataset) {
  std::size_t correct = 0;
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    const Tensor p =
        forward(spec, params, dataset.inputs[i], ForwardMode::kDeterministic);
    if (argmax_index(p.values) == dataset.labels[i]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(dataset.size());
}

double pixel_accuracy(const NetworkSpec& spec, const Parameters& params,
                      const SegDataset& dataset) {
  std::size_t correct = 0, total = 0;
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    const Tensor p =
        forward(spec, params, dataset.images[i], ForwardMode::kDeterministic);
    const std::size_t omega = dataset.height * dataset.width;
    for (std::size_t pix = 0; pix < omega; ++pix) {
      const auto begin = p.values.begin() +
                         static_cast<std::ptrdiff_t>(pix * spec.num_classes);
      const std::vector<double> row(begin,
                                    begin + static_cast<std::ptrdiff_t>(
                                                spec.num_classes));
      if (argmax_index(row) == dataset.labels[i][pix]) ++correct;
      ++total;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(total);
}

namespace {

json layer_to_json(const LayerSpec& l) {
  json j;
  j["kind"] = l.kind_name();
  switch (l.kind) {
    case LayerKind::kDense:
      j["in"] = l.in;
      j["out"] = l.out;
      break;
    case LayerKind::kConv:
      j["in_channels"] = l.in_channels;
      j["out_channels"] = l.out_channels;
      j["kernel"] = l.kernel;
      j["stride"] = l.stride;
      j["padding"] = l.padding;
      break;
    case LayerKind::kDropout:
      j["rate"] = l.rate;
      break;
    case LayerKind::kUpsampleNearest:
      j["factor"] = l.factor;
      break;
    default:
      break;
  }
  return j;
}

LayerSpec layer_from_json(const json& j) {
  const std::string kind = j.at("kind");
  if (kind == "dense") return LayerSpec::dense(j.at("in"), j.at("out"));
  if (kind == "conv") {
    return LayerSpec::conv(j.at("in_channels"), j.at("out_channels"),
                           j.at("kernel"), j.at("stride"), j.at("padding"));
  }
  if (kind == "relu") return LayerSpec::relu();
  if (kind == "dropout") return LayerSpec::dropout(j.at("rate"));
  if (kind == "flatten") return LayerSpec::flatten();
  if (kind == "upsample-nearest") return LayerSpec::upsample(j.at("factor"));
  throw std::runtime_error("checkpoint: unknown layer kind '" + kind + "'");
}

std::string mode_name(DropoutMode mode) {
  switch (mode) {
    case DropoutMode::kNone: return "none";
    case DropoutMode::kAdHoc: return "ad-hoc";
    case DropoutMode::kPostHoc: return "post-hoc";
  }
  return "?";
}

DropoutMode mode_from_name(const std::string& name) {
  if (name == "none") return DropoutMode::kNone;
  if (name == "ad-hoc") return DropoutMode::kAdHoc;
  if (name == "post-hoc") return DropoutMode::kPostHoc;
  throw std::runtime_error("checkpoint: unknown dropout mode '" + name + "'");
}

}  // namespace

json spec_to_json(const NetworkSpec& spec) {
  json j;
  j["input_shape"] = spec.input_shape;
  j["num_classes"] = spec.num_classes;
  j["dropout_mode"] = mode_name(spec.dropout_mode);
  j["posthoc_sites"] = spec.posthoc_sites;
  j["posthoc_rate"] = spec.posthoc_rate;
  j["segmentation"] = spec.segmentation;
  j["layers"] = json::array();
  for (const auto& l : spec.layers) j["layers"].push_back(layer_to_json(l));
  return j;
}

NetworkSpec spec_from_json(const json& j) {
  NetworkSpec spec;
  spec.input_shape = j.at("input_shape").get<Shape>();
  spec.num_classes = j.at("num_classes");
  spec.dropout_mode = mode_from_name(j.at("dropout_mode"));
  spec.posthoc_sites = j.at("posthoc_sites").get<std::vector<std::size_t>>();
  spec.posthoc_rate = j.at("posthoc_rate");
  spec.segmentation = j.at("segmentation");
  for (const auto& lj : j.at("layers")) spec.layers.push_back(layer_from_json(lj));
  spec.validate();
  return spec;
}

void save_checkpoint(const NetworkSpec& spec, const Parameters& params,
                     const std::string& path, std::uint64_t seed,
                     const std::vector<EpochLog>& log) {
  json j;
  j["kind"] = "uqal-checkpoint";
  j["format_version"] = 1;
  j["seed"] = seed;
  json train_log;
  train_log["epochs"] = log.size();
  train_log["final_loss"] = log.empty() ? 0.0 : log.back().loss;
  train_log["final_accuracy"] = log.empty() ? 0.0 : log.back().accuracy;
  j["train_log"] = train_log;
  j["spec"] = spec_to_json(spec);
  json pj = json::object();
  for (const auto& [idx, named] : params.layers) {
    json lj = json::object();
    for (const auto& [name, t] : named) {
      lj[name] = {{"shape", t.shape}, {"values", t.values}};
    }
    pj[std::to_string(idx)] = std::move(lj);
  }
  j["parameters"] = std::move(pj);

  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("checkpoint: cannot open " + path + " for writing");
  out << j.dump(1, '\t') << "\n";
  if (!out) throw std::runtime_error("checkpoint: write failure on " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("checkpoint: cannot open " + path);
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw std::runtime_error("checkpoint: malformed file " + path + ": " + e.what());
  }
  try {
    if (j.at("kind") != "uqal-checkpoint") {
      throw std::runtime_error("not a checkpoint file");
    }
    if (j.at("format_version") != 1) {
      throw std::runtime_error("unsupported format version");
    }
    Checkpoint ck;
    ck.spec = spec_from_json(j.at("spec"));
    ck.seed = j.at("seed");
    ck.epochs = j.at("train_log").at("epochs");
    ck.final_loss = j.at("train_log").at("final_loss");
    ck.final_accuracy = j.at("train_log").at("final_accuracy");
    for (const auto& [key, lj] : j.at("parameters").items()) {
      const std::size_t idx = std::stoul(key);
      for (const auto& [name, tj] : lj.items()) {
        ck.params.layers[idx][name] =
            Tensor(tj.at("shape").get<Shape>(),
                   tj.at("values").get<std::vector<double>>());
      }
    }
    ck.params.require_matches(ck.spec);
    ck.params.frozen = true;
    return ck;
  } catch (const json::exception& e) {
    throw std::runtime_error("checkpoint: malformed file " + path + ": " + e.what());
  }
}

}  // namespace uqal
