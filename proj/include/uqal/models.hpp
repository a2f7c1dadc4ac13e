#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "uqal/data.hpp"
#include "uqal/graph.hpp"
#include "uqal/rng.hpp"
#include "uqal/tensor.hpp"

namespace uqal {

enum class LayerKind { kDense, kConv, kRelu, kDropout, kFlatten, kUpsampleNearest };

struct LayerSpec {
  LayerKind kind;
  std::size_t in = 0, out = 0;                  // dense
  std::size_t in_channels = 0, out_channels = 0;  // conv
  std::size_t kernel = 0;
  int stride = 1, padding = 0;
  double rate = 0.0;  // dropout
  int factor = 2;     // upsample

  static LayerSpec dense(std::size_t in, std::size_t out);
  static LayerSpec conv(std::size_t in_channels, std::size_t out_channels,
                        std::size_t kernel, int stride = 1, int padding = 0);
  static LayerSpec relu();
  static LayerSpec dropout(double rate);
  static LayerSpec flatten();
  static LayerSpec upsample(int factor);

  std::string kind_name() const;
};

/// How dropout participates at inference time: none at all, embedded in the
/// trained architecture (and kept active when MC sampling), or injected into
/// an already-trained dropout-free network at sampling time only.
enum class DropoutMode { kNone, kAdHoc, kPostHoc };

struct NetworkSpec {
  std::vector<LayerSpec> layers;
  Shape input_shape;              // {d} or {C,H,W}
  std::size_t num_classes = 0;
  DropoutMode dropout_mode = DropoutMode::kNone;
  std::vector<std::size_t> posthoc_sites;  // dropout inserted after these layers
  double posthoc_rate = 0.1;
  bool segmentation = false;

  /// Checks layer shape composition and dropout-mode invariants; throws
  /// std::invalid_argument describing every violation at once.
  void validate() const;

  Shape output_shape() const;

  /// Indices of every relu layer; the default injection sites.
  std::vector<std::size_t> relu_sites() const;

  static NetworkSpec mlp_classifier(std::size_t input_dim,
                                    const std::vector<std::size_t>& hidden,
                                    std::size_t num_classes,
                                    DropoutMode mode, double rate);
  static NetworkSpec conv_classifier(const Shape& input_shape,
                                     std::size_t num_classes,
                                     DropoutMode mode, double rate);
  static NetworkSpec seg_net(std::size_t height, std::size_t width,
                             std::size_t num_classes, DropoutMode mode,
                             double rate);
};

/// Layer index -> named tensors ("weight", "bias"). Frozen once training
/// finishes; attack and evaluation code treats them as read-only values.
using ParamTensors = std::map<std::size_t, std::map<std::string, Tensor>>;

struct Parameters {
  ParamTensors layers;
  bool frozen = false;

  void require_matches(const NetworkSpec& spec) const;
};

struct TrainConfig {
  std::size_t epochs = 30;
  std::size_t batch_size = 32;
  double learning_rate = 0.05;
  double momentum = 0.9;
  double weight_decay = 0.0;
  std::uint64_t seed = 0;

  void validate() const;
};

struct EpochLog {
  std::size_t epoch;
  double loss;
  double accuracy;
};

struct TrainResult {
  Parameters params;
  std::vector<EpochLog> log;
};

enum class ForwardMode {
  kDeterministic,  // all dropout off
  kMcSample,       // ad-hoc layers and post-hoc injections active
  kTrain,          // ad-hoc layers active, post-hoc injections off
};

/// He-uniform weights (bound sqrt(6/fan_in)) and zero biases.
Parameters init_params(const NetworkSpec& spec, std::uint64_t seed);

/// Interns every parameter tensor on the graph once: trainable parameters
/// become leaves (gradients flow to them), frozen ones become constants
/// (backward skips their subtrees). Repeated forward passes on one graph
/// should share the returned handles instead of re-copying raw values.
ParamTensors intern_params(Graph& g, const ParamTensors& params, bool trainable);

struct ForwardOptions {
  bool features_only = false;  // stop before the final dense layer
};

/// Builds the network on `g`. Parameter tensors may be graph leaves (for
/// training) or plain values. Output is the softmax distribution, {L} for
/// classifiers and {H,W,L} for segmenters.
Tensor build_forward(Graph& g, const NetworkSpec& spec,
                     const ParamTensors& params, const Tensor& x,
                     ForwardMode mode, RngStream* rng,
                     const ForwardOptions& options = {});

/// Single forward pass on a throwaway graph.
Tensor forward(const NetworkSpec& spec, const Parameters& params,
               const Tensor& x, ForwardMode mode, RngStream* rng = nullptr);

/// Penultimate-layer features from a deterministic pass.
Tensor features(const NetworkSpec& spec, const Parameters& params,
                const Tensor& x);

/// Minibatch SGD with momentum on cross-entropy. Deterministic given
/// (cfg.seed, dataset order); aborts with a diagnostic if the loss goes
/// non-finite.
TrainResult train(const NetworkSpec& spec, const Dataset& dataset,
                  const TrainConfig& cfg);
TrainResult train(const NetworkSpec& spec, const SegDataset& dataset,
                  const TrainConfig& cfg);

double classification_accuracy(const NetworkSpec& spec, const Parameters& params,
                               const Dataset& dataset);
double pixel_accuracy(const NetworkSpec& spec, const Parameters& params,
                      const SegDataset& dataset);

/// Versioned single-file checkpoint; values round-trip bit exactly.
void save_checkpoint(const NetworkSpec& spec, const Parameters& params,
                     const std::string& path, std::uint64_t seed = 0,
                     const std::vector<EpochLog>& log = {});

struct Checkpoint {
  NetworkSpec spec;
  Parameters params;
  std::uint64_t seed = 0;
  std::size_t epochs = 0;
  double final_loss = 0.0;
  double final_accuracy = 0.0;
};

Checkpoint load_checkpoint(const std::string& path);

}  // namespace uqal
