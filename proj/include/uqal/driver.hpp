#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "uqal/attacks.hpp"
#include "uqal/data.hpp"
#include "uqal/eval.hpp"
#include "uqal/models.hpp"

namespace uqal {

/// Declarative experiment description, read from a JSON config file and
/// overridable field-by-field from CLI flags (flags win).
struct ExperimentConfig {
  std::string experiment = "default";
  std::string out_root;  // empty: $UQAL_OUT_ROOT or "out"
  std::uint64_t seed = 42;
  unsigned workers = 1;

  // dataset
  std::string dataset = "blobs";  // blobs | moons | seg-shapes | idx
  std::size_t classes = 3;
  std::size_t train_per_class = 100;
  std::size_t test_per_class = 60;
  std::size_t dim = 2;
  double separation = 2.5;
  double noise = 0.5;
  std::size_t moons_train = 300;
  std::size_t moons_test = 200;
  double moons_noise = 0.12;
  std::size_t seg_train = 32;
  std::size_t seg_test = 6;
  std::size_t seg_height = 16;
  std::size_t seg_width = 16;
  double seg_noise = 0.06;
  std::string idx_images, idx_labels, idx_test_images, idx_test_labels;

  // model
  std::string arch = "mlp";  // mlp | conv | segnet
  std::vector<std::size_t> hidden = {64, 64};

  // uq
  UqMethod uq_method = UqMethod::kMcDropoutAdHoc;
  double dropout_rate = 0.3;
  std::size_t ensemble_size = 5;
  std::size_t eval_samples = 100;

  // training
  std::size_t epochs = 40;
  std::size_t batch_size = 32;
  double learning_rate = 0.05;
  double momentum = 0.9;
  double weight_decay = 0.0;

  // attack; steps/step size default per method (150 / 2e-3 for MC methods,
  // 10 / 1e-3 for DUQ, 100 / 1e-3 for segmentation)
  ObjectiveKind objective = ObjectiveKind::kStab;
  int gamma = +1;
  double epsilon = 8.0 / 255.0;
  std::optional<std::size_t> attack_steps;
  std::optional<double> attack_step_size;
  std::size_t attack_samples = 30;
  Criterion criterion = Criterion::kMinUncertainty;
  bool retarget = false;
  std::string ust_variant = "bg";  // bg | fb
  bool dump_traces = false;

  // eval
  std::vector<double> eps_grid;  // empty: 0..8/255 in 255ths
  std::size_t n_iid = 600;
  std::size_t n_ood = 900;
  double r_step = 0.05;
  std::string measure = "variance";
  bool attack_iid = false;

  static ExperimentConfig from_file(const std::string& path);
  void apply_json(const std::string& json_text);

  /// All validation failures at once.
  void validate() const;

  AttackConfig resolved_attack() const;
  Objective resolved_objective() const;
  std::vector<double> resolved_eps_grid() const;
  std::vector<double> resolved_r_grid() const;
  std::string out_dir() const;  // <out_root>/<experiment>
};

/// "8/255" or "0.031" to a double.
double parse_fraction(const std::string& text);

/// "a:b:255ths" (a/255 .. b/255 step 1/255) or a comma list of fractions.
std::vector<double> parse_eps_grid(const std::string& text);

std::uint64_t hash_file(const std::string& path);

// Command entry points used by the CLI; they throw std::invalid_argument for
// validation problems and std::runtime_error for runtime failures.
void cmd_train(const ExperimentConfig& cfg);
void cmd_duq_fit(const ExperimentConfig& cfg);
void cmd_attack(const ExperimentConfig& cfg);
void cmd_eval_security(const ExperimentConfig& cfg);
void cmd_eval_rejection(const ExperimentConfig& cfg);
void cmd_eval_seg_demo(const ExperimentConfig& cfg);

}  // namespace uqal
