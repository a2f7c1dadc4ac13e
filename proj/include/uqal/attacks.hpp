#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "uqal/graph.hpp"
#include "uqal/models.hpp"
#include "uqal/rng.hpp"
#include "uqal/tensor.hpp"
#include "uqal/uq.hpp"

namespace uqal {

/// Monte-Carlo-capable predictor the attack engine differentiates through:
/// either a dropout network sampled S times or an ensemble evaluated once per
/// member.
class McModel {
 public:
  virtual ~McModel() = default;
  virtual std::size_t sample_count() const = 0;
  virtual std::size_t num_classes() const = 0;
  virtual bool is_segmenter() const = 0;

  /// Builds the S stochastic probability outputs on `g`, sharing the input
  /// node so gradients flow back to it.
  virtual std::vector<Tensor> build_mc(Graph& g, const Tensor& x,
                                       RngStream& rng) const = 0;

  virtual Tensor build_deterministic(Graph& g, const Tensor& x) const = 0;
};

class DropoutMcModel final : public McModel {
 public:
  DropoutMcModel(const NetworkSpec& spec, const Parameters& params,
                 std::size_t samples);
  std::size_t sample_count() const override { return samples_; }
  std::size_t num_classes() const override { return spec_->num_classes; }
  bool is_segmenter() const override { return spec_->segmentation; }
  std::vector<Tensor> build_mc(Graph& g, const Tensor& x,
                               RngStream& rng) const override;
  Tensor build_deterministic(Graph& g, const Tensor& x) const override;

 private:
  const NetworkSpec* spec_;
  const Parameters* params_;
  std::size_t samples_;
};

class EnsembleMcModel final : public McModel {
 public:
  explicit EnsembleMcModel(const EnsembleModel& ensemble);
  std::size_t sample_count() const override;
  std::size_t num_classes() const override;
  bool is_segmenter() const override;
  std::vector<Tensor> build_mc(Graph& g, const Tensor& x,
                               RngStream& rng) const override;
  Tensor build_deterministic(Graph& g, const Tensor& x) const override;

 private:
  const EnsembleModel* ensemble_;
};

enum class ObjectiveKind { kMva, kAta, kStab, kDuqTarget, kUst, kCeEvasion };
enum class Criterion { kMinUncertainty, kMisclassify };
enum class UstTarget { kModal, kLeastFrequent };  // Bg / Fb variants

std::string objective_name(ObjectiveKind kind);
std::optional<ObjectiveKind> objective_from_name(const std::string& name);
std::string criterion_name(Criterion criterion);
std::optional<Criterion> criterion_from_name(const std::string& name);

/// What the attack minimizes. gamma = +1 descends the objective
/// (overconfidence), gamma = -1 ascends it (underconfidence).
struct Objective {
  ObjectiveKind kind = ObjectiveKind::kStab;
  int gamma = +1;
  std::optional<std::size_t> target_class;  // fixed target; resolved if absent
  std::size_t mc_samples = 30;              // S used inside the objective
  UstTarget ust_target = UstTarget::kModal;
  bool retarget_each_iteration = false;

  void validate() const;
};

struct AttackConfig {
  double epsilon = 8.0 / 255.0;   // L-inf budget in [0,1] input units
  std::size_t steps = 150;
  double step_size = 2e-3;
  Criterion criterion = Criterion::kMinUncertainty;
  std::uint64_t seed = 0;
  bool box = true;                // clip iterates to [0,1]

  void validate() const;
};

struct TraceRow {
  double objective = 0.0;
  double variance = 0.0;  // epistemic measure (DUQ: 1 - max kernel)
  double entropy = 0.0;   // aleatoric measure (0 for DUQ)
  int predicted = 0;      // argmax class; modal class for segmenters
};

struct AttackResult {
  Tensor adversarial;
  std::size_t best_index = 0;
  std::vector<TraceRow> trace;  // steps + 1 rows, clean iterate first
  std::optional<std::size_t> resolved_target;
  bool prediction_flipped = false;   // best iterate vs clean prediction
  bool uncertainty_success = false;  // gamma-adjusted measure moved as asked

  const TraceRow& clean() const { return trace.front(); }
  const TraceRow& best() const { return trace[best_index]; }
};

/// Attack context: exactly one backing estimator is required per objective
/// kind (MC model for MVA/ATA/STAB/CE/UST, DUQ head for DUQ_TARGET).
struct AttackContext {
  const McModel* mc = nullptr;
  const DuqHead* duq = nullptr;
  std::optional<int> true_label;  // needed by ATA and the misclassify criterion
};

/// Per-coordinate clamp of x into the eps box around x0, then into [0,1]
/// when `box` is set; idempotent.
Tensor project_linf(const Tensor& x, const Tensor& x0, double epsilon, bool box);

/// Single steepest-ascent step on a scalar loss: x + eps * sign(grad),
/// box-clamped when asked. sign(0) = 0.
Tensor fgsm(const ScalarFn& loss, const Tensor& x, double epsilon, bool box);

/// PGD on an arbitrary differentiable scalar: descends gamma * J under the
/// same projection rules and returns the final iterate. Handy for custom
/// objectives and closed-form oracle checks.
Tensor pgd_scalar(const ScalarFn& objective, const Tensor& x, int gamma,
                  const AttackConfig& cfg);

/// Projected gradient descent on gamma * J. Fresh MC masks every iteration;
/// the trace records every iterate including the clean one, and the returned
/// input is the best iterate under the selection criterion.
AttackResult pgd(const AttackContext& ctx, const Tensor& x,
                 const Objective& objective, const AttackConfig& cfg,
                 RngStream& rng);

/// Resolves the frozen target class from the clean input (most likely
/// incorrect class for ATA, most likely class for STAB, nearest centroid for
/// DUQ, modal / least-frequent clean map class for UST).
std::size_t resolve_target(const AttackContext& ctx, const Objective& objective,
                           const Tensor& x0, RngStream& rng);

/// One objective evaluation at x (a graph leaf): scalar J plus the trace
/// measurements that come with it.
struct ObjectiveEval {
  Tensor j;
  TraceRow row;
};
ObjectiveEval evaluate_objective(Graph& g, const AttackContext& ctx,
                                 const Objective& objective,
                                 std::optional<std::size_t> target,
                                 const Tensor& x, RngStream& rng);

std::size_t select_best(const std::vector<TraceRow>& trace,
                        Criterion criterion, const Objective& objective,
                        std::optional<int> true_label);

}  // namespace uqal
