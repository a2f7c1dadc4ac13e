#include "uqal/uq.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <stdexcept>

#include "serialize.hpp"

namespace uqal {

void McPredictionSet::validate() const {
  if (samples == 0) throw std::invalid_argument("mc set: needs at least one sample");
  if (num_classes < 2) throw std::invalid_argument("mc set: needs at least two classes");
  if (probs.size() != samples * omega * num_classes) {
    throw std::invalid_argument("mc set: probability buffer size mismatch");
  }
  for (std::size_t s = 0; s < samples; ++s) {
    for (std::size_t p = 0; p < omega; ++p) {
      double total = 0.0;
      for (std::size_t c = 0; c < num_classes; ++c) total += prob(s, p, c);
      if (std::abs(total - 1.0) > 1e-9) {
        throw std::invalid_argument("mc set: a probability slice does not sum to 1");
      }
    }
  }
}

void McPredictionSet::dump(std::ostream& out) const {
  if (omega != 1) {
    throw std::invalid_argument("mc dump: only classification sets are dumpable");
  }
  out << "# S=" << samples << " L=" << num_classes << "\n";
  char buf[32];
  for (std::size_t s = 0; s < samples; ++s) {
    for (std::size_t c = 0; c < num_classes; ++c) {
      std::snprintf(buf, sizeof buf, "%.17g", prob(s, 0, c));
      out << (c == 0 ? "" : " ") << buf;
    }
    out << "\n";
  }
}

McPredictionSet McPredictionSet::parse(std::istream& in) {
  std::string header;
  std::getline(in, header);
  std::size_t s_count = 0, l_count = 0;
  if (std::sscanf(header.c_str(), "# S=%zu L=%zu", &s_count, &l_count) != 2) {
    throw std::runtime_error("mc parse: bad header '" + header + "'");
  }
  McPredictionSet mc;
  mc.samples = s_count;
  mc.num_classes = l_count;
  mc.omega = 1;
  mc.probs.reserve(s_count * l_count);
  for (std::size_t s = 0; s < s_count; ++s) {
    for (std::size_t c = 0; c < l_count; ++c) {
      double v = 0.0;
      if (!(in >> v)) throw std::runtime_error("mc parse: truncated row");
      mc.probs.push_back(v);
    }
  }
  mc.validate();
  return mc;
}

void EnsembleModel::validate() const {
  if (members.size() < 2) {
    throw std::invalid_argument("ensemble: needs at least two members");
  }
  spec.validate();
  for (const Parameters& p : members) p.require_matches(spec);
}

void DuqHead::validate() const {
  extractor_spec.validate();
  if (centroids.size() != extractor_spec.num_classes) {
    throw std::invalid_argument("duq head: needs exactly one centroid per class");
  }
  for (const Tensor& c : centroids) {
    if (c.shape != centroids.front().shape) {
      throw std::invalid_argument("duq head: centroid dimensionality mismatch");
    }
  }
  if (!(sigma > 0.0)) throw std::invalid_argument("duq head: sigma must be positive");
}

McPredictionSet mc_predict(const NetworkSpec& spec, const Parameters& params,
                           const Tensor& x, std::size_t samples,
                           RngStream& rng) {
  if (samples == 0) throw std::invalid_argument("mc_predict: samples must be >= 1");
  McPredictionSet mc;
  mc.samples = samples;
  mc.num_classes = spec.num_classes;
  mc.provenance = McProvenance::kMcDropout;
  const Shape out_shape = spec.output_shape();
  mc.omega = spec.segmentation ? out_shape[0] * out_shape[1] : 1;
  mc.probs.reserve(samples * mc.omega * mc.num_classes);
  Graph g;
  const ParamTensors shared = intern_params(g, params.layers, false);
  const Tensor input = g.constant(x);
  for (std::size_t s = 0; s < samples; ++s) {
    const Tensor p =
        build_forward(g, spec, shared, input, ForwardMode::kMcSample, &rng);
    mc.probs.insert(mc.probs.end(), p.values.begin(), p.values.end());
  }
  return mc;
}

McPredictionSet ensemble_predict(const EnsembleModel& ensemble, const Tensor& x) {
  if (ensemble.members.size() < 2) {
    throw std::invalid_argument("ensemble_predict: needs at least two members");
  }
  McPredictionSet mc;
  mc.samples = ensemble.members.size();
  mc.num_classes = ensemble.spec.num_classes;
  mc.provenance = McProvenance::kEnsemble;
  const Shape out_shape = ensemble.spec.output_shape();
  mc.omega = ensemble.spec.segmentation ? out_shape[0] * out_shape[1] : 1;
  mc.probs.reserve(mc.samples * mc.omega * mc.num_classes);
  for (const Parameters& member : ensemble.members) {
    const Tensor p = forward(ensemble.spec, member, x, ForwardMode::kDeterministic);
    mc.probs.insert(mc.probs.end(), p.values.begin(), p.values.end());
  }
  return mc;
}

namespace {

double slice_variance(const McPredictionSet& mc, std::size_t pixel) {
  const std::size_t L = mc.num_classes;
  const double inv_s = 1.0 / static_cast<double>(mc.samples);
  double mean_dot = 0.0;
  std::vector<double> mean(L, 0.0);
  for (std::size_t s = 0; s < mc.samples; ++s) {
    double dot = 0.0;
    for (std::size_t c = 0; c < L; ++c) {
      const double v = mc.prob(s, pixel, c);
      dot += v * v;
      mean[c] += v;
    }
    mean_dot += dot;
  }
  mean_dot *= inv_s;
  double mean_sq = 0.0;
  for (std::size_t c = 0; c < L; ++c) {
    const double m = mean[c] * inv_s;
    mean_sq += m * m;
  }
  const double var = mean_dot - mean_sq;
  return var < 0.0 ? 0.0 : var;
}

double slice_entropy(const McPredictionSet& mc, std::size_t pixel) {
  const std::size_t L = mc.num_classes;
  const double inv_s = 1.0 / static_cast<double>(mc.samples);
  double h = 0.0;
  for (std::size_t c = 0; c < L; ++c) {
    double m = 0.0;
    for (std::size_t s = 0; s < mc.samples; ++s) m += mc.prob(s, pixel, c);
    m *= inv_s;
    // floored log keeps the anchors exact: one-hot -> 0, [.5,.5] -> ln 2
    h -= m * std::log(m < 1e-12 ? 1e-12 : m);
  }
  return h < 0.0 ? 0.0 : h;
}

}  // namespace

double predictive_variance(const McPredictionSet& mc) {
  if (mc.omega != 1) {
    throw std::invalid_argument(
        "predictive_variance: segmentation sets need pixelwise_uncertainty");
  }
  return slice_variance(mc, 0);
}

double predictive_entropy(const McPredictionSet& mc) {
  if (mc.omega != 1) {
    throw std::invalid_argument(
        "predictive_entropy: segmentation sets need pixelwise_uncertainty");
  }
  return slice_entropy(mc, 0);
}

std::vector<double> mean_prediction(const McPredictionSet& mc) {
  const std::size_t L = mc.num_classes;
  std::vector<double> mean(mc.omega * L, 0.0);
  for (std::size_t s = 0; s < mc.samples; ++s) {
    for (std::size_t i = 0; i < mc.omega * L; ++i) {
      mean[i] += mc.probs[s * mc.omega * L + i];
    }
  }
  for (double& v : mean) v /= static_cast<double>(mc.samples);
  return mean;
}

UncertaintyReport uncertainty_report(const McPredictionSet& mc) {
  UncertaintyReport report;
  report.epistemic_variance = predictive_variance(mc);
  report.aleatoric_entropy = predictive_entropy(mc);
  report.mean_prediction = mean_prediction(mc);
  report.predicted = argmax_index(report.mean_prediction);
  return report;
}

PixelwiseUncertainty pixelwise_uncertainty(const McPredictionSet& mc) {
  PixelwiseUncertainty out;
  out.variance_map.resize(mc.omega);
  out.entropy_map.resize(mc.omega);
  out.mean_segmentation.resize(mc.omega);
  const std::vector<double> mean = mean_prediction(mc);
  for (std::size_t p = 0; p < mc.omega; ++p) {
    out.variance_map[p] = slice_variance(mc, p);
    out.entropy_map[p] = slice_entropy(mc, p);
    const auto begin =
        mean.begin() + static_cast<std::ptrdiff_t>(p * mc.num_classes);
    out.mean_segmentation[p] = argmax_index(std::vector<double>(
        begin, begin + static_cast<std::ptrdiff_t>(mc.num_classes)));
  }
  return out;
}

double rbf_kernel(const Tensor& a, const Tensor& b, double sigma) {
  if (!same_shape(a, b)) {
    throw std::invalid_argument("rbf_kernel: shape mismatch");
  }
  double d2 = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    const double d = a.values[i] - b.values[i];
    d2 += d * d;
  }
  return std::exp(-d2 / (2.0 * sigma * sigma));
}

DuqHead duq_fit(const NetworkSpec& spec, const Parameters& params,
                const Dataset& dataset, std::optional<double> sigma_override) {
  spec.validate();
  const std::size_t L = spec.num_classes;
  std::vector<Tensor> sums;
  std::vector<std::size_t> counts(L, 0);
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    const int y = dataset.labels[i];
    if (y < 0 || y >= static_cast<int>(L)) {
      throw std::invalid_argument("duq_fit: label out of range");
    }
    const Tensor f = features(spec, params, dataset.inputs[i]);
    if (sums.empty()) {
      sums.assign(L, Tensor::zeros(f.shape));
    }
    for (std::size_t k = 0; k < f.numel(); ++k) {
      sums[static_cast<std::size_t>(y)].values[k] += f.values[k];
    }
    ++counts[static_cast<std::size_t>(y)];
  }
  for (std::size_t c = 0; c < L; ++c) {
    if (counts[c] == 0) {
      throw std::invalid_argument("duq_fit: class " + std::to_string(c) +
                                  " has no samples");
    }
    for (double& v : sums[c].values) v /= static_cast<double>(counts[c]);
  }

  DuqHead head;
  head.extractor_spec = spec;
  head.extractor_params = params;
  head.centroids = std::move(sums);

  if (sigma_override) {
    head.sigma = *sigma_override;
  } else {
    std::vector<double> dists;
    for (std::size_t a = 0; a < L; ++a) {
      for (std::size_t b = a + 1; b < L; ++b) {
        double d2 = 0.0;
        for (std::size_t k = 0; k < head.centroids[a].numel(); ++k) {
          const double d = head.centroids[a].values[k] - head.centroids[b].values[k];
          d2 += d * d;
        }
        dists.push_back(std::sqrt(d2));
      }
    }
    std::sort(dists.begin(), dists.end());
    const double median = dists.size() % 2 == 1
                              ? dists[dists.size() / 2]
                              : 0.5 * (dists[dists.size() / 2 - 1] +
                                       dists[dists.size() / 2]);
    head.sigma = median / std::sqrt(2.0 * std::log(2.0));
  }
  head.validate();
  return head;
}

DuqPrediction duq_predict(const DuqHead& head, const Tensor& x) {
  const Tensor f = features(head.extractor_spec, head.extractor_params, x);
  DuqPrediction out;
  out.kernels.reserve(head.centroids.size());
  for (const Tensor& e : head.centroids) {
    out.kernels.push_back(rbf_kernel(f, e, head.sigma));
  }
  out.predicted = argmax_index(out.kernels);
  out.uncertainty = 1.0 - out.kernels[static_cast<std::size_t>(out.predicted)];
  return out;
}

void save_duq_head(const DuqHead& head, const std::string& path) {
  nlohmann::json j;
  j["kind"] = "uqal-duq-head";
  j["format_version"] = 1;
  j["sigma"] = head.sigma;
  j["spec"] = spec_to_json(head.extractor_spec);
  nlohmann::json pj = nlohmann::json::object();
  for (const auto& [idx, named] : head.extractor_params.layers) {
    nlohmann::json lj = nlohmann::json::object();
    for (const auto& [name, t] : named) {
      lj[name] = {{"shape", t.shape}, {"values", t.values}};
    }
    pj[std::to_string(idx)] = std::move(lj);
  }
  j["parameters"] = std::move(pj);
  nlohmann::json cj = nlohmann::json::array();
  for (const Tensor& c : head.centroids) {
    cj.push_back({{"shape", c.shape}, {"values", c.values}});
  }
  j["centroids"] = std::move(cj);

  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("duq head: cannot open " + path + " for writing");
  out << j.dump(1, '\t') << "\n";
  if (!out) throw std::runtime_error("duq head: write failure on " + path);
}

DuqHead load_duq_head(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("duq head: cannot open " + path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("duq head: malformed file " + path + ": " + e.what());
  }
  try {
    if (j.at("kind") != "uqal-duq-head") throw std::runtime_error("not a DUQ head file");
    if (j.at("format_version") != 1) throw std::runtime_error("unsupported format version");
    DuqHead head;
    head.sigma = j.at("sigma");
    head.extractor_spec = spec_from_json(j.at("spec"));
    for (const auto& [key, lj] : j.at("parameters").items()) {
      const std::size_t idx = std::stoul(key);
      for (const auto& [name, tj] : lj.items()) {
        head.extractor_params.layers[idx][name] =
            Tensor(tj.at("shape").get<Shape>(),
                   tj.at("values").get<std::vector<double>>());
      }
    }
    head.extractor_params.frozen = true;
    for (const auto& cj : j.at("centroids")) {
      head.centroids.emplace_back(cj.at("shape").get<Shape>(),
                                  cj.at("values").get<std::vector<double>>());
    }
    head.validate();
    return head;
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("duq head: malformed file " + path + ": " + e.what());
  }
}

}  // namespace uqal
