#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "uqal/attacks.hpp"
#include "uqal/data.hpp"
#include "uqal/models.hpp"
#include "uqal/uq.hpp"

namespace uqal {

enum class UqMethod { kMcDropoutAdHoc, kMcDropoutPostHoc, kEnsemble, kDuq };

std::string uq_method_name(UqMethod method);
std::optional<UqMethod> uq_method_from_name(const std::string& name);

struct Measurement {
  double variance = 0.0;  // DUQ: 1 - max kernel
  double entropy = 0.0;   // DUQ: 0
  int predicted = 0;
};

/// A model plus the uncertainty method evaluated on top of it. Bundles the
/// clean/adversarial measurement path (evaluation MC size, default 100,
/// deliberately decoupled from the attack MC size) and the attack context.
class UqContext {
 public:
  static UqContext mc_dropout(const NetworkSpec& spec, const Parameters& params,
                              bool ad_hoc, std::size_t eval_samples = 100);
  static UqContext ensemble(const EnsembleModel& ensemble);
  static UqContext duq(const DuqHead& head);

  UqMethod method() const { return method_; }
  std::size_t eval_samples() const { return eval_samples_; }
  bool is_segmenter() const;

  /// Uncertainty + prediction at the evaluation MC size.
  Measurement measure(const Tensor& x, RngStream& rng) const;

  /// Per-pixel maps for segmenters.
  PixelwiseUncertainty measure_pixelwise(const Tensor& x, RngStream& rng) const;

  /// Rejects objective/method pairs that cannot work (MVA on a single
  /// deterministic model, UST on classifiers, DUQ objective without a head).
  void validate_pairing(ObjectiveKind kind) const;

  struct AttackBundle {
    std::unique_ptr<McModel> model;
    AttackContext ctx;
  };
  AttackBundle attack_bundle(std::size_t attack_samples,
                             std::optional<int> true_label) const;

 private:
  UqMethod method_ = UqMethod::kMcDropoutAdHoc;
  const NetworkSpec* spec_ = nullptr;
  const Parameters* params_ = nullptr;
  const EnsembleModel* ensemble_ = nullptr;
  const DuqHead* duq_ = nullptr;
  std::size_t eval_samples_ = 100;
};

struct SecurityCurveRow {
  double epsilon = 0.0;
  double accuracy = 0.0;
  double entropy_mean = 0.0;
  double variance_mean = 0.0;
};

struct SecurityCurve {
  std::vector<SecurityCurveRow> rows;  // one per epsilon, ascending
  std::string objective;
  std::string criterion;
};

struct SecurityEvalConfig {
  std::vector<double> eps_grid;  // sorted ascending, starting at 0
  Objective objective;
  AttackConfig attack;  // epsilon field is overridden by the grid
  std::uint64_t seed = 0;
  unsigned workers = 1;

  void validate() const;
};

/// Attacks every sample at every nonzero grid point, re-measures uncertainty
/// at the evaluation MC size, and averages over the identical sample set.
/// The eps = 0 row is the clean evaluation.
SecurityCurve run_security_eval(const UqContext& uq, const Dataset& test,
                                const SecurityEvalConfig& cfg);

struct RejectionCurveRow {
  double rejection_rate = 0.0;
  double accuracy = 0.0;
};

struct RejectionCurve {
  std::vector<RejectionCurveRow> rows;
  double epsilon = 0.0;
  std::string measure;  // "variance" or "entropy"
};

struct RejectionEvalConfig {
  double epsilon = 8.0 / 255.0;  // 0 = clean curve
  Objective objective;           // applied to OOD samples
  AttackConfig attack;
  std::vector<double> r_grid;    // default 0..0.9 step 0.05
  std::string measure = "variance";
  bool attack_iid = false;       // alternative protocol: perturb IID too
  std::uint64_t seed = 0;
  unsigned workers = 1;
};

/// Accuracy over retained samples as the highest-uncertainty fraction r is
/// rejected. OOD samples count as errors whenever retained; ties in the
/// uncertainty ordering break by sample index.
RejectionCurve run_rejection_eval(const UqContext& uq, const OodMixture& mixture,
                                  const RejectionEvalConfig& cfg);

/// Curve construction from per-sample values: retained set at rate r is the
/// round((1-r)*N) lowest uncertainties (ties by index); rows with an empty
/// retained set are omitted.
RejectionCurve build_rejection_curve(const std::vector<double>& uncertainty,
                                     const std::vector<bool>& correct,
                                     const std::vector<double>& r_grid,
                                     double epsilon, const std::string& measure);

/// Trapezoid area under the curve over its r grid.
double curve_area(const RejectionCurve& curve);

struct SegRegionStats {
  double variance_mean = 0.0;
  double entropy_mean = 0.0;
  double flip_fraction = 0.0;  // pixels predicted as the clean modal class
};

struct SegAttackReport {
  std::string attack;  // "clean", "mva", "ust-bg", "ust-fb"
  SegRegionStats edge;
  SegRegionStats interior;
  SegRegionStats all;
  // first-image maps, for figures
  std::vector<double> variance_map;
  std::vector<double> entropy_map;
  std::vector<int> predicted_map;
};

struct SegComparison {
  std::vector<SegAttackReport> reports;
  std::size_t height = 0;
  std::size_t width = 0;
};

struct SegComparisonConfig {
  AttackConfig attack;             // paper settings: T=100, alpha=1e-3, eps=2/255
  std::size_t attack_samples = 20;
  std::size_t eval_samples = 20;
  std::uint64_t seed = 0;
  unsigned workers = 1;

  SegComparisonConfig() {
    attack.steps = 100;
    attack.step_size = 1e-3;
    attack.epsilon = 2.0 / 255.0;
  }
};

/// Clean vs MVA vs UST(Bg) vs UST(Fb) uncertainty maps and edge/interior
/// statistics; the edge set comes from the clean predicted map (pixels with a
/// 4-neighbour of a different class).
SegComparison run_seg_comparison(const NetworkSpec& spec, const Parameters& params,
                                 const SegDataset& images,
                                 const SegComparisonConfig& cfg);

/// 4-neighbour class-boundary mask of a label map.
std::vector<bool> edge_mask(const std::vector<int>& map, std::size_t height,
                            std::size_t width);

// CSV emission: pinned column order, 12-significant-digit decimals, LF line
// endings. Re-running a seeded experiment produces byte-identical files.
void emit_csv(const SecurityCurve& curve, const std::string& path);
void emit_csv(const RejectionCurve& curve, const std::string& path);
void emit_csv(const SegComparison& comparison, const std::string& path);

SecurityCurve parse_security_csv(const std::string& path);
RejectionCurve parse_rejection_csv(const std::string& path);

struct SvgSeries {
  std::string name;
  std::vector<double> xs;
  std::vector<double> ys;
};

struct SvgStyle {
  std::string title;
  std::string x_label;
  std::string y_label;
  bool log_y = false;  // floors values at 1e-12 and flags it in the legend
  int width = 640;
  int height = 400;
};

/// Standalone SVG 1.1 line chart: one polyline per series plus one circle
/// marker per point; no external renderer needed.
void emit_svg_plot(const std::vector<SvgSeries>& series, const std::string& path,
                   const SvgStyle& style);

void emit_svg_heatmap(const std::vector<double>& map, std::size_t height,
                      std::size_t width, const std::string& path,
                      const std::string& title);
void emit_svg_class_map(const std::vector<int>& map, std::size_t height,
                        std::size_t width, const std::string& path,
                        const std::string& title);

}  // namespace uqal
