// uqal: train toy models, fit uncertainty estimators, attack their
// uncertainty measures, and reproduce the diagnostic curves.

#include <exception>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include <CLI11.hpp>

#include "uqal/driver.hpp"

namespace {

struct FlagOverrides {
  std::optional<std::string> config_path;
  std::optional<std::string> experiment, out_root, dataset, arch, uq, objective,
      criterion, measure, ust_variant, eps, eps_grid, hidden;
  std::optional<std::uint64_t> seed;
  std::optional<unsigned> workers;
  std::optional<std::size_t> classes, train_per_class, test_per_class, dim,
      epochs, batch_size, members, mc, eval_mc, steps, n_iid, n_ood, seg_images,
      seg_size;
  std::optional<double> separation, noise, lr, momentum, weight_decay, rate,
      step_size, r_step, seg_noise;
  std::optional<int> gamma;
  bool retarget = false;
  bool dump_traces = false;
  bool attack_iid = false;
};

// Shared flag set; every config field stays reachable from the command line
// and explicit flags win over the config file.
void add_common_flags(CLI::App* cmd, FlagOverrides& flags) {
  cmd->add_option("--config", flags.config_path, "JSON experiment config file");
  cmd->add_option("--experiment", flags.experiment, "experiment name (output subdirectory)");
  cmd->add_option("--out", flags.out_root, "output root (default $UQAL_OUT_ROOT or ./out)");
  cmd->add_option("--seed", flags.seed, "global seed")->default_str("42");
  cmd->add_option("--workers", flags.workers,
                  "sample-level parallel workers; outputs are identical for any count")
      ->default_str("1");

  cmd->add_option("--dataset", flags.dataset, "blobs | moons | seg-shapes | idx")
      ->default_str("blobs");
  cmd->add_option("--classes", flags.classes, "blob class count")->default_str("3");
  cmd->add_option("--train-per-class", flags.train_per_class, "training samples per class")
      ->default_str("100");
  cmd->add_option("--test-per-class", flags.test_per_class, "test samples per class")
      ->default_str("60");
  cmd->add_option("--dim", flags.dim, "blob input dimension")->default_str("2");
  cmd->add_option("--separation", flags.separation, "blob layout radius")
      ->default_str("2.5");
  cmd->add_option("--noise", flags.noise, "blob cluster noise")->default_str("0.5");
  cmd->add_option("--seg-images", flags.seg_images, "segmentation test images")
      ->default_str("6");
  cmd->add_option("--seg-size", flags.seg_size, "segmentation image extent")
      ->default_str("16");
  cmd->add_option("--seg-noise", flags.seg_noise, "segmentation pixel noise")
      ->default_str("0.06");

  cmd->add_option("--arch", flags.arch, "mlp | conv | segnet")->default_str("mlp");
  cmd->add_option("--hidden", flags.hidden, "mlp hidden sizes, comma separated")
      ->default_str("64,64");
  cmd->add_option("--uq", flags.uq,
                  "mc-dropout-adhoc | mc-dropout-posthoc | ensemble | duq")
      ->default_str("mc-dropout-adhoc");
  cmd->add_option("--rate", flags.rate, "dropout rate (paper grid: 0.1/0.3/0.5)")
      ->default_str("0.3");
  cmd->add_option("--members", flags.members, "ensemble size")->default_str("5");
  cmd->add_option("--eval-mc", flags.eval_mc, "evaluation MC sample size")
      ->default_str("100");

  cmd->add_option("--epochs", flags.epochs, "training epochs")->default_str("40");
  cmd->add_option("--batch", flags.batch_size, "batch size")->default_str("32");
  cmd->add_option("--lr", flags.lr, "learning rate")->default_str("0.05");
  cmd->add_option("--momentum", flags.momentum, "SGD momentum")->default_str("0.9");
  cmd->add_option("--wd", flags.weight_decay, "weight decay")->default_str("0");

  cmd->add_option("--objective", flags.objective,
                  "mva | ata | stab | duq-target | ust | ce-evasion")
      ->default_str("stab");
  cmd->add_option("--gamma", flags.gamma,
                  "+1 overconfidence (O-attack), -1 underconfidence (U-attack)")
      ->default_str("1");
  cmd->add_option("--eps", flags.eps, "L-inf budget, fraction (8/255) or decimal")
      ->default_str("8/255");
  cmd->add_option("--steps", flags.steps,
                  "PGD iterations (default 150; 10 for duq; 100 for segnet)");
  cmd->add_option("--step-size", flags.step_size,
                  "PGD step size (default 2e-3; 1e-3 for duq and segnet)");
  cmd->add_option("--mc", flags.mc, "attack MC sample size")->default_str("30");
  cmd->add_option("--criterion", flags.criterion, "min-uncertainty | misclassify")
      ->default_str("min-uncertainty");
  cmd->add_option("--ust-variant", flags.ust_variant, "bg (modal) | fb (least frequent)")
      ->default_str("bg");
  cmd->add_flag("--retarget", flags.retarget,
                "re-resolve the target class every iteration (default: frozen)");
  cmd->add_flag("--dump-traces", flags.dump_traces, "write per-sample trace sidecars");

  cmd->add_option("--eps-grid", flags.eps_grid,
                  "grid as <a>:<b>:255ths or comma list")
      ->default_str("0:8:255ths");
  cmd->add_option("--n-iid", flags.n_iid, "IID samples in the OOD mixture")
      ->default_str("600");
  cmd->add_option("--n-ood", flags.n_ood, "OOD samples in the mixture")
      ->default_str("900");
  cmd->add_option("--r-step", flags.r_step, "rejection grid step")->default_str("0.05");
  cmd->add_option("--measure", flags.measure, "variance | entropy")
      ->default_str("variance");
  cmd->add_flag("--attack-iid", flags.attack_iid,
                "also perturb IID samples in the rejection protocol");
}

std::vector<std::size_t> parse_hidden(const std::string& text) {
  std::vector<std::size_t> sizes;
  std::string item;
  std::istringstream in(text);
  while (std::getline(in, item, ',')) {
    sizes.push_back(static_cast<std::size_t>(std::stoul(item)));
  }
  return sizes;
}

uqal::ExperimentConfig build_config(const FlagOverrides& flags) {
  uqal::ExperimentConfig cfg;
  if (flags.config_path) cfg = uqal::ExperimentConfig::from_file(*flags.config_path);

  if (flags.experiment) cfg.experiment = *flags.experiment;
  if (flags.out_root) cfg.out_root = *flags.out_root;
  if (flags.seed) cfg.seed = *flags.seed;
  if (flags.workers) cfg.workers = *flags.workers;
  if (flags.dataset) cfg.dataset = *flags.dataset;
  if (flags.classes) cfg.classes = *flags.classes;
  if (flags.train_per_class) cfg.train_per_class = *flags.train_per_class;
  if (flags.test_per_class) cfg.test_per_class = *flags.test_per_class;
  if (flags.dim) cfg.dim = *flags.dim;
  if (flags.separation) cfg.separation = *flags.separation;
  if (flags.noise) cfg.noise = *flags.noise;
  if (flags.seg_images) cfg.seg_test = *flags.seg_images;
  if (flags.seg_size) {
    cfg.seg_height = *flags.seg_size;
    cfg.seg_width = *flags.seg_size;
  }
  if (flags.seg_noise) cfg.seg_noise = *flags.seg_noise;
  if (flags.arch) cfg.arch = *flags.arch;
  if (flags.hidden) cfg.hidden = parse_hidden(*flags.hidden);
  if (flags.uq) {
    const auto method = uqal::uq_method_from_name(*flags.uq);
    if (!method) throw std::invalid_argument("unknown uq method '" + *flags.uq + "'");
    cfg.uq_method = *method;
  }
  if (flags.rate) cfg.dropout_rate = *flags.rate;
  if (flags.members) cfg.ensemble_size = *flags.members;
  if (flags.eval_mc) cfg.eval_samples = *flags.eval_mc;
  if (flags.epochs) cfg.epochs = *flags.epochs;
  if (flags.batch_size) cfg.batch_size = *flags.batch_size;
  if (flags.lr) cfg.learning_rate = *flags.lr;
  if (flags.momentum) cfg.momentum = *flags.momentum;
  if (flags.weight_decay) cfg.weight_decay = *flags.weight_decay;
  if (flags.objective) {
    const auto kind = uqal::objective_from_name(*flags.objective);
    if (!kind) throw std::invalid_argument("unknown objective '" + *flags.objective + "'");
    cfg.objective = *kind;
    if (*flags.objective == "ust-bg") cfg.ust_variant = "bg";
    if (*flags.objective == "ust-fb") cfg.ust_variant = "fb";
  }
  if (flags.gamma) cfg.gamma = *flags.gamma;
  if (flags.eps) cfg.epsilon = uqal::parse_fraction(*flags.eps);
  if (flags.steps) cfg.attack_steps = *flags.steps;
  if (flags.step_size) cfg.attack_step_size = *flags.step_size;
  if (flags.mc) cfg.attack_samples = *flags.mc;
  if (flags.criterion) {
    const auto crit = uqal::criterion_from_name(*flags.criterion);
    if (!crit) throw std::invalid_argument("unknown criterion '" + *flags.criterion + "'");
    cfg.criterion = *crit;
  }
  if (flags.ust_variant) cfg.ust_variant = *flags.ust_variant;
  if (flags.retarget) cfg.retarget = true;
  if (flags.dump_traces) cfg.dump_traces = true;
  if (flags.eps_grid) cfg.eps_grid = uqal::parse_eps_grid(*flags.eps_grid);
  if (flags.n_iid) cfg.n_iid = *flags.n_iid;
  if (flags.n_ood) cfg.n_ood = *flags.n_ood;
  if (flags.r_step) cfg.r_step = *flags.r_step;
  if (flags.measure) cfg.measure = *flags.measure;
  if (flags.attack_iid) cfg.attack_iid = true;
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"adversarial attacks against uncertainty quantification, desk scale"};
  app.require_subcommand(1);

  FlagOverrides train_flags, duq_flags, attack_flags;
  FlagOverrides security_flags, rejection_flags, seg_flags;

  CLI::App* train_cmd = app.add_subcommand("train", "train the model(s) for a UQ method");
  add_common_flags(train_cmd, train_flags);
  CLI::App* duq_cmd =
      app.add_subcommand("duq-fit", "fit the RBF-centroid head on a trained model");
  add_common_flags(duq_cmd, duq_flags);
  CLI::App* attack_cmd =
      app.add_subcommand("attack", "run the configured attack over the test set");
  add_common_flags(attack_cmd, attack_flags);

  CLI::App* eval_cmd = app.add_subcommand("eval", "evaluation suites");
  eval_cmd->require_subcommand(1);
  CLI::App* security_cmd =
      eval_cmd->add_subcommand("security", "uncertainty/accuracy vs epsilon curve");
  add_common_flags(security_cmd, security_flags);
  CLI::App* rejection_cmd = eval_cmd->add_subcommand(
      "rejection", "accuracy-rejection curves on an IID/OOD mixture");
  add_common_flags(rejection_cmd, rejection_flags);
  CLI::App* seg_cmd = eval_cmd->add_subcommand(
      "seg-demo", "clean vs attacked segmentation uncertainty maps");
  add_common_flags(seg_cmd, seg_flags);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;  // parse problems are validation errors
  }

  try {
    if (train_cmd->parsed()) {
      uqal::cmd_train(build_config(train_flags));
    } else if (duq_cmd->parsed()) {
      uqal::cmd_duq_fit(build_config(duq_flags));
    } else if (attack_cmd->parsed()) {
      uqal::cmd_attack(build_config(attack_flags));
    } else if (eval_cmd->parsed()) {
      if (security_cmd->parsed()) {
        uqal::cmd_eval_security(build_config(security_flags));
      } else if (rejection_cmd->parsed()) {
        uqal::cmd_eval_rejection(build_config(rejection_flags));
      } else if (seg_cmd->parsed()) {
        uqal::cmd_eval_seg_demo(build_config(seg_flags));
      }
    }
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
