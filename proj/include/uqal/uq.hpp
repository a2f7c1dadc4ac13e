#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <vector>

#include "uqal/data.hpp"
#include "uqal/models.hpp"
#include "uqal/rng.hpp"
#include "uqal/tensor.hpp"

namespace uqal {

enum class McProvenance { kMcDropout, kEnsemble };

/// Matrix of Monte-Carlo softmax outputs: `samples` rows of `omega * classes`
/// probabilities (omega == 1 for plain classification). Every row/pixel slice
/// sums to 1.
struct McPredictionSet {
  std::size_t samples = 0;
  std::size_t omega = 1;
  std::size_t num_classes = 0;
  std::vector<double> probs;  // samples x omega x classes, row-major
  McProvenance provenance = McProvenance::kMcDropout;

  double prob(std::size_t s, std::size_t pixel, std::size_t cls) const {
    return probs[(s * omega + pixel) * num_classes + cls];
  }
  void validate() const;

  /// Classification sets only: one row per MC sample, L columns, header line
  /// `# S=<s> L=<l>`.
  void dump(std::ostream& out) const;
  static McPredictionSet parse(std::istream& in);
};

struct UncertaintyReport {
  double epistemic_variance = 0.0;           // >= 0
  double aleatoric_entropy = 0.0;            // in [0, ln L]
  std::vector<double> mean_prediction;       // length L
  int predicted = 0;                         // argmax of the mean
};

struct PixelwiseUncertainty {
  std::vector<double> variance_map;   // omega
  std::vector<double> entropy_map;    // omega
  std::vector<int> mean_segmentation; // omega, per-pixel argmax of the mean
};

/// M networks trained from distinct seeds; members share the architecture.
struct EnsembleModel {
  NetworkSpec spec;
  std::vector<Parameters> members;

  void validate() const;  // M >= 2, parameter shapes match
};

/// RBF-centroid head over a trained feature extractor: one centroid per
/// class, kernel K(a,e) = exp(-|a-e|^2 / (2 sigma^2)).
struct DuqHead {
  NetworkSpec extractor_spec;
  Parameters extractor_params;
  std::vector<Tensor> centroids;  // L feature-space vectors
  double sigma = 1.0;

  void validate() const;
};

struct DuqPrediction {
  int predicted = 0;
  std::vector<double> kernels;  // K_1..K_L, each in (0, 1]
  double uncertainty = 0.0;     // 1 - max kernel, in [0, 1)
};

/// S stochastic forward passes with fresh dropout masks.
McPredictionSet mc_predict(const NetworkSpec& spec, const Parameters& params,
                           const Tensor& x, std::size_t samples,
                           RngStream& rng);

/// One deterministic pass per member, rows ordered by member index.
McPredictionSet ensemble_predict(const EnsembleModel& ensemble, const Tensor& x);

/// Class-summed predictive variance of a classification set:
/// mean_s(f_s . f_s) - fbar . fbar, clamped at zero from below.
double predictive_variance(const McPredictionSet& mc);

/// Entropy of the mean prediction, natural log with probabilities floored at
/// 1e-12 inside the log.
double predictive_entropy(const McPredictionSet& mc);

std::vector<double> mean_prediction(const McPredictionSet& mc);

UncertaintyReport uncertainty_report(const McPredictionSet& mc);

/// Per-pixel variance/entropy maps and the mean segmentation.
PixelwiseUncertainty pixelwise_uncertainty(const McPredictionSet& mc);

/// Class-mean centroids over penultimate features of a trained classifier.
/// sigma defaults to median pairwise centroid distance / sqrt(2 ln 2) so the
/// midpoint between two median-separated centroids scores K = 0.5.
DuqHead duq_fit(const NetworkSpec& spec, const Parameters& params,
                const Dataset& dataset,
                std::optional<double> sigma_override = std::nullopt);

DuqPrediction duq_predict(const DuqHead& head, const Tensor& x);

double rbf_kernel(const Tensor& a, const Tensor& b, double sigma);

void save_duq_head(const DuqHead& head, const std::string& path);
DuqHead load_duq_head(const std::string& path);

}  // namespace uqal
