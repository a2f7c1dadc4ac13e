#include "uqal/driver.hpp"

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <stdexcept>

#include "serialize.hpp"
#include "uqal/parallel.hpp"
#include "uqal/uq.hpp"

namespace uqal {

namespace fs = std::filesystem;
using nlohmann::json;

double parse_fraction(const std::string& text) {
  const auto slash = text.find('/');
  try {
    if (slash == std::string::npos) {
      std::size_t used = 0;
      const double v = std::stod(text, &used);
      if (used != text.size()) throw std::invalid_argument("trailing junk");
      return v;
    }
    std::size_t used_num = 0, used_den = 0;
    const double num = std::stod(text.substr(0, slash), &used_num);
    const std::string den_text = text.substr(slash + 1);
    const double den = std::stod(den_text, &used_den);
    if (used_num != slash || used_den != den_text.size() || den == 0.0) {
      throw std::invalid_argument("bad fraction");
    }
    return num / den;
  } catch (const std::exception&) {
    throw std::invalid_argument("cannot parse '" + text +
                                "' as a number or fraction");
  }
}

std::vector<double> parse_eps_grid(const std::string& text) {
  std::vector<double> grid;
  if (text.find(':') != std::string::npos) {
    // a:b:255ths
    std::istringstream in(text);
    std::string a, b, unit;
    std::getline(in, a, ':');
    std::getline(in, b, ':');
    std::getline(in, unit);
    if (unit != "255ths") {
      throw std::invalid_argument("eps grid '" + text +
                                  "': expected <a>:<b>:255ths");
    }
    const long lo = std::stol(a), hi = std::stol(b);
    if (lo < 0 || hi < lo) throw std::invalid_argument("eps grid '" + text + "': bad range");
    for (long k = lo; k <= hi; ++k) {
      grid.push_back(static_cast<double>(k) / 255.0);
    }
    return grid;
  }
  std::istringstream in(text);
  std::string item;
  while (std::getline(in, item, ',')) grid.push_back(parse_fraction(item));
  if (grid.empty()) throw std::invalid_argument("eps grid '" + text + "' is empty");
  return grid;
}

std::uint64_t hash_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("hash: cannot open " + path);
  std::uint64_t h = 0xCBF29CE484222325ULL;
  char buf[4096];
  while (in.read(buf, sizeof buf) || in.gcount() > 0) {
    for (std::streamsize i = 0; i < in.gcount(); ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 0x100000001B3ULL;
    }
    if (!in) break;
  }
  return h;
}

namespace {

std::string hex64(std::uint64_t v) {
  char buf[20];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

json config_to_json(const ExperimentConfig& c) {
  json j;
  j["experiment"] = c.experiment;
  j["seed"] = c.seed;
  j["workers"] = c.workers;
  j["dataset"] = {{"kind", c.dataset},
                  {"classes", c.classes},
                  {"train_per_class", c.train_per_class},
                  {"test_per_class", c.test_per_class},
                  {"dim", c.dim},
                  {"separation", c.separation},
                  {"noise", c.noise},
                  {"moons_train", c.moons_train},
                  {"moons_test", c.moons_test},
                  {"moons_noise", c.moons_noise},
                  {"seg_train", c.seg_train},
                  {"seg_test", c.seg_test},
                  {"seg_height", c.seg_height},
                  {"seg_width", c.seg_width},
                  {"seg_noise", c.seg_noise},
                  {"idx_images", c.idx_images},
                  {"idx_labels", c.idx_labels},
                  {"idx_test_images", c.idx_test_images},
                  {"idx_test_labels", c.idx_test_labels}};
  j["model"] = {{"arch", c.arch}, {"hidden", c.hidden}};
  j["uq"] = {{"method", uq_method_name(c.uq_method)},
             {"dropout_rate", c.dropout_rate},
             {"ensemble_size", c.ensemble_size},
             {"eval_samples", c.eval_samples}};
  j["train"] = {{"epochs", c.epochs},
                {"batch_size", c.batch_size},
                {"learning_rate", c.learning_rate},
                {"momentum", c.momentum},
                {"weight_decay", c.weight_decay}};
  json attack = {{"objective", objective_name(c.objective)},
                 {"gamma", c.gamma},
                 {"epsilon", c.epsilon},
                 {"mc_samples", c.attack_samples},
                 {"criterion", criterion_name(c.criterion)},
                 {"retarget", c.retarget},
                 {"ust_variant", c.ust_variant},
                 {"dump_traces", c.dump_traces}};
  if (c.attack_steps) attack["steps"] = *c.attack_steps;
  if (c.attack_step_size) attack["step_size"] = *c.attack_step_size;
  j["attack"] = attack;
  j["eval"] = {{"eps_grid", c.eps_grid},
               {"n_iid", c.n_iid},
               {"n_ood", c.n_ood},
               {"r_step", c.r_step},
               {"measure", c.measure},
               {"attack_iid", c.attack_iid}};
  return j;
}

template <typename T>
void maybe(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace

void ExperimentConfig::apply_json(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("config: malformed JSON: ") + e.what());
  }
  const std::vector<std::string> known = {"experiment", "seed",  "workers",
                                          "dataset",    "model", "uq",
                                          "train",      "attack", "eval",
                                          "out_root"};
  for (const auto& [key, value] : j.items()) {
    (void)value;
    if (std::find(known.begin(), known.end(), key) == known.end()) {
      throw std::invalid_argument("config: unknown section '" + key + "'");
    }
  }
  maybe(j, "experiment", experiment);
  maybe(j, "out_root", out_root);
  maybe(j, "seed", seed);
  maybe(j, "workers", workers);
  if (j.contains("dataset")) {
    const json& d = j["dataset"];
    maybe(d, "kind", dataset);
    maybe(d, "classes", classes);
    maybe(d, "train_per_class", train_per_class);
    maybe(d, "test_per_class", test_per_class);
    maybe(d, "dim", dim);
    maybe(d, "separation", separation);
    maybe(d, "noise", noise);
    maybe(d, "moons_train", moons_train);
    maybe(d, "moons_test", moons_test);
    maybe(d, "moons_noise", moons_noise);
    maybe(d, "seg_train", seg_train);
    maybe(d, "seg_test", seg_test);
    maybe(d, "seg_height", seg_height);
    maybe(d, "seg_width", seg_width);
    maybe(d, "seg_noise", seg_noise);
    maybe(d, "idx_images", idx_images);
    maybe(d, "idx_labels", idx_labels);
    maybe(d, "idx_test_images", idx_test_images);
    maybe(d, "idx_test_labels", idx_test_labels);
  }
  if (j.contains("model")) {
    maybe(j["model"], "arch", arch);
    maybe(j["model"], "hidden", hidden);
  }
  if (j.contains("uq")) {
    const json& u = j["uq"];
    if (u.contains("method")) {
      const auto method = uq_method_from_name(u.at("method"));
      if (!method) {
        throw std::invalid_argument("config: unknown uq method '" +
                                    u.at("method").get<std::string>() + "'");
      }
      uq_method = *method;
    }
    maybe(u, "dropout_rate", dropout_rate);
    maybe(u, "ensemble_size", ensemble_size);
    maybe(u, "eval_samples", eval_samples);
  }
  if (j.contains("train")) {
    const json& t = j["train"];
    maybe(t, "epochs", epochs);
    maybe(t, "batch_size", batch_size);
    maybe(t, "learning_rate", learning_rate);
    maybe(t, "momentum", momentum);
    maybe(t, "weight_decay", weight_decay);
  }
  if (j.contains("attack")) {
    const json& a = j["attack"];
    if (a.contains("objective")) {
      const auto kind = objective_from_name(a.at("objective"));
      if (!kind) {
        throw std::invalid_argument("config: unknown objective '" +
                                    a.at("objective").get<std::string>() + "'");
      }
      objective = *kind;
    }
    maybe(a, "gamma", gamma);
    if (a.contains("epsilon")) {
      if (a["epsilon"].is_string()) {
        epsilon = parse_fraction(a["epsilon"].get<std::string>());
      } else {
        epsilon = a["epsilon"].get<double>();
      }
    }
    if (a.contains("steps")) attack_steps = a["steps"].get<std::size_t>();
    if (a.contains("step_size")) attack_step_size = a["step_size"].get<double>();
    maybe(a, "mc_samples", attack_samples);
    if (a.contains("criterion")) {
      const auto crit = criterion_from_name(a.at("criterion"));
      if (!crit) {
        throw std::invalid_argument("config: unknown criterion '" +
                                    a.at("criterion").get<std::string>() + "'");
      }
      criterion = *crit;
    }
    maybe(a, "retarget", retarget);
    maybe(a, "ust_variant", ust_variant);
    maybe(a, "dump_traces", dump_traces);
  }
  if (j.contains("eval")) {
    const json& e = j["eval"];
    if (e.contains("eps_grid")) {
      if (e["eps_grid"].is_string()) {
        eps_grid = parse_eps_grid(e["eps_grid"].get<std::string>());
      } else {
        eps_grid = e["eps_grid"].get<std::vector<double>>();
      }
    }
    maybe(e, "n_iid", n_iid);
    maybe(e, "n_ood", n_ood);
    maybe(e, "r_step", r_step);
    maybe(e, "measure", measure);
    maybe(e, "attack_iid", attack_iid);
  }
}

ExperimentConfig ExperimentConfig::from_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::invalid_argument("config: cannot open " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  ExperimentConfig cfg;
  cfg.apply_json(buf.str());
  return cfg;
}

void ExperimentConfig::validate() const {
  std::vector<std::string> errors;
  auto check = [&](bool ok, const std::string& msg) {
    if (!ok) errors.push_back(msg);
  };

  check(dataset == "blobs" || dataset == "moons" || dataset == "seg-shapes" ||
            dataset == "idx",
        "dataset must be blobs, moons, seg-shapes, or idx");
  check(arch == "mlp" || arch == "conv" || arch == "segnet",
        "arch must be mlp, conv, or segnet");
  if (dataset == "seg-shapes") {
    check(arch == "segnet", "seg-shapes data needs the segnet arch");
    check(seg_height >= 16 && seg_width >= 16 && seg_height % 2 == 0 &&
              seg_width % 2 == 0,
          "segmentation extents must be even and at least 16");
  }
  if (arch == "segnet") check(dataset == "seg-shapes", "segnet needs seg-shapes data");
  if (dataset == "blobs") {
    check(classes >= 2, "blobs need at least 2 classes");
    check(dim + 1 >= classes, "blobs dim too small for the class count");
    check(separation > 0.0, "blobs separation must be positive");
    check(noise >= 0.0, "blobs noise must be nonnegative");
  }
  if (dataset == "moons") check(arch == "mlp", "moons data needs the mlp arch");
  if (dataset == "idx") {
    check(!idx_images.empty() && !idx_labels.empty(),
          "idx dataset needs idx_images and idx_labels paths");
    check(arch == "conv", "idx data needs the conv arch");
  }
  if (arch == "mlp") {
    check(dataset == "blobs" || dataset == "moons", "mlp needs 1-D inputs");
    check(!hidden.empty(), "mlp needs at least one hidden layer");
  }

  const bool uses_dropout = uq_method == UqMethod::kMcDropoutAdHoc ||
                            uq_method == UqMethod::kMcDropoutPostHoc;
  if (uses_dropout) {
    check(dropout_rate > 0.0 && dropout_rate < 1.0,
          "dropout rate must lie in (0,1)");
  }
  if (uq_method == UqMethod::kEnsemble) {
    check(ensemble_size >= 2, "ensemble needs at least 2 members");
  }
  if (uq_method == UqMethod::kDuq) {
    check(arch != "segnet", "duq needs a classifier with a dense head");
  }
  check(eval_samples >= 1, "eval_samples must be >= 1");

  check(epochs >= 1, "epochs must be >= 1");
  check(batch_size >= 1, "batch size must be >= 1");
  check(learning_rate >= 0.0, "learning rate must be >= 0");
  check(momentum >= 0.0 && momentum < 1.0, "momentum must lie in [0,1)");
  check(weight_decay >= 0.0, "weight decay must be >= 0");

  check(gamma == 1 || gamma == -1, "gamma must be +1 or -1");
  check(epsilon >= 0.0, "epsilon must be >= 0");
  check(attack_samples >= (objective == ObjectiveKind::kMva ? 2u : 1u),
        "attack mc_samples too small for the objective");
  if (attack_steps) check(*attack_steps >= 1, "attack steps must be >= 1");
  if (attack_step_size) check(*attack_step_size > 0.0, "step size must be positive");
  check(ust_variant == "bg" || ust_variant == "fb", "ust_variant must be bg or fb");
  check(measure == "variance" || measure == "entropy",
        "measure must be variance or entropy");
  check(r_step > 0.0 && r_step < 1.0, "r_step must lie in (0,1)");

  if (!eps_grid.empty()) {
    if (eps_grid.front() != 0.0) errors.push_back("eps grid must start at 0");
    for (std::size_t i = 1; i < eps_grid.size(); ++i) {
      if (!(eps_grid[i] > eps_grid[i - 1])) {
        errors.push_back("eps grid must be strictly increasing");
        break;
      }
    }
  }

  if (!errors.empty()) {
    std::string msg = "invalid experiment config:";
    for (const auto& e : errors) msg += "\n  - " + e;
    throw std::invalid_argument(msg);
  }
}

AttackConfig ExperimentConfig::resolved_attack() const {
  AttackConfig attack;
  attack.epsilon = epsilon;
  attack.criterion = criterion;
  attack.seed = seed;
  if (arch == "segnet") {
    attack.steps = attack_steps.value_or(100);
    attack.step_size = attack_step_size.value_or(1e-3);
  } else if (uq_method == UqMethod::kDuq) {
    attack.steps = attack_steps.value_or(10);
    attack.step_size = attack_step_size.value_or(1e-3);
  } else {
    attack.steps = attack_steps.value_or(150);
    attack.step_size = attack_step_size.value_or(2e-3);
  }
  return attack;
}

Objective ExperimentConfig::resolved_objective() const {
  Objective obj;
  obj.kind = objective;
  obj.gamma = gamma;
  obj.mc_samples = attack_samples;
  obj.retarget_each_iteration = retarget;
  obj.ust_target = ust_variant == "bg" ? UstTarget::kModal : UstTarget::kLeastFrequent;
  return obj;
}

std::vector<double> ExperimentConfig::resolved_eps_grid() const {
  if (!eps_grid.empty()) return eps_grid;
  std::vector<double> grid;
  for (int k = 0; k <= 8; ++k) grid.push_back(k / 255.0);
  return grid;
}

std::vector<double> ExperimentConfig::resolved_r_grid() const {
  std::vector<double> grid;
  for (double r = 0.0; r < 0.9 + 1e-9; r += r_step) grid.push_back(r);
  return grid;
}

std::string ExperimentConfig::out_dir() const {
  std::string root = out_root;
  if (root.empty()) {
    const char* env = std::getenv("UQAL_OUT_ROOT");
    root = env != nullptr && *env != '\0' ? env : "out";
  }
  return root + "/" + experiment;
}

namespace {

struct Dirs {
  fs::path base, checkpoints, attacks, curves, figures, manifest;
};

Dirs ensure_dirs(const ExperimentConfig& cfg) {
  Dirs d;
  d.base = cfg.out_dir();
  d.checkpoints = d.base / "checkpoints";
  d.attacks = d.base / "attacks";
  d.curves = d.base / "curves";
  d.figures = d.base / "figures";
  d.manifest = d.base / "manifest";
  for (const auto& p : {d.base, d.checkpoints, d.attacks, d.curves, d.figures,
                        d.manifest}) {
    fs::create_directories(p);
  }
  return d;
}

void write_manifest(const Dirs& dirs, const std::string& command,
                    const std::map<std::string, std::uint64_t>& inputs,
                    const ExperimentConfig& cfg) {
  json j;
  j["command"] = command;
  json in = json::object();
  for (const auto& [path, hash] : inputs) in[path] = hex64(hash);
  j["inputs"] = std::move(in);
  j["config"] = config_to_json(cfg);
  std::ofstream out(dirs.manifest / (command + ".json"), std::ios::binary);
  if (!out) throw std::runtime_error("manifest: cannot write");
  out << j.dump(1, '\t') << "\n";
}

// Stale-input detection: inputs recorded by earlier commands that now hash
// differently draw a warning (not fatal).
void warn_if_stale(const Dirs& dirs,
                   const std::map<std::string, std::uint64_t>& inputs) {
  if (!fs::exists(dirs.manifest)) return;
  for (const auto& entry : fs::directory_iterator(dirs.manifest)) {
    if (entry.path().extension() != ".json") continue;
    std::ifstream in(entry.path(), std::ios::binary);
    json j;
    try {
      j = json::parse(in);
    } catch (const json::exception&) {
      continue;
    }
    if (!j.contains("inputs")) continue;
    for (const auto& [path, hash] : inputs) {
      if (j["inputs"].contains(path) && j["inputs"][path] != hex64(hash)) {
        std::cerr << "warning: " << path << " changed since "
                  << entry.path().filename().string()
                  << " was written (stale inputs?)\n";
      }
    }
  }
}

TrainConfig train_config(const ExperimentConfig& cfg, std::uint64_t seed) {
  TrainConfig t;
  t.epochs = cfg.epochs;
  t.batch_size = cfg.batch_size;
  t.learning_rate = cfg.learning_rate;
  t.momentum = cfg.momentum;
  t.weight_decay = cfg.weight_decay;
  t.seed = seed;
  return t;
}

DropoutMode model_mode(const ExperimentConfig& cfg) {
  switch (cfg.uq_method) {
    case UqMethod::kMcDropoutAdHoc: return DropoutMode::kAdHoc;
    case UqMethod::kMcDropoutPostHoc: return DropoutMode::kPostHoc;
    case UqMethod::kEnsemble:
    case UqMethod::kDuq: return DropoutMode::kNone;
  }
  return DropoutMode::kNone;
}

NetworkSpec make_spec(const ExperimentConfig& cfg) {
  const DropoutMode mode = model_mode(cfg);
  if (cfg.arch == "segnet") {
    return NetworkSpec::seg_net(cfg.seg_height, cfg.seg_width, 3, mode,
                                cfg.dropout_rate);
  }
  if (cfg.arch == "conv") {
    const Dataset probe = load_idx(cfg.idx_images, cfg.idx_labels);
    return NetworkSpec::conv_classifier(probe.input_shape, probe.num_classes,
                                        mode, cfg.dropout_rate);
  }
  const std::size_t input_dim = cfg.dataset == "moons" ? 2 : cfg.dim;
  const std::size_t classes = cfg.dataset == "moons" ? 2 : cfg.classes;
  return NetworkSpec::mlp_classifier(input_dim, cfg.hidden, classes, mode,
                                     cfg.dropout_rate);
}

TrainTestSplit make_classification_data(const ExperimentConfig& cfg) {
  if (cfg.dataset == "blobs") {
    return gen_blobs_split(cfg.classes, cfg.train_per_class, cfg.test_per_class,
                           cfg.dim, cfg.separation, cfg.noise, cfg.seed);
  }
  if (cfg.dataset == "moons") {
    TrainTestSplit split;
    split.train = gen_moons(cfg.moons_train, cfg.moons_noise, cfg.seed, "train");
    split.test = gen_moons(cfg.moons_test, cfg.moons_noise, cfg.seed, "test");
    return split;
  }
  if (cfg.dataset == "idx") {
    TrainTestSplit split;
    split.train = load_idx(cfg.idx_images, cfg.idx_labels);
    split.test = (!cfg.idx_test_images.empty() && !cfg.idx_test_labels.empty())
                     ? load_idx(cfg.idx_test_images, cfg.idx_test_labels)
                     : split.train;
    return split;
  }
  throw std::invalid_argument("dataset '" + cfg.dataset + "' is not a classification set");
}

struct SegSplit {
  SegDataset train, test;
};

SegSplit make_seg_data(const ExperimentConfig& cfg) {
  SegShapesOptions opt;
  opt.noise = cfg.seg_noise;
  SegSplit split;
  split.train = gen_seg_shapes(cfg.seg_train, cfg.seg_height, cfg.seg_width,
                               cfg.seed, opt);
  split.test = gen_seg_shapes(cfg.seg_test, cfg.seg_height, cfg.seg_width,
                              splitmix64(cfg.seed) ^ 0x7e57u, opt);
  return split;
}

void write_train_log(const fs::path& path, const std::vector<EpochLog>& log) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("train log: cannot write " + path.string());
  out << "epoch,loss,accuracy\n";
  char buf[64];
  for (const auto& row : log) {
    std::snprintf(buf, sizeof buf, "%zu,%.12g,%.12g\n", row.epoch, row.loss,
                  row.accuracy);
    out << buf;
  }
}

// Loaded model bundle; owns everything UqContext points at.
struct LoadedModel {
  std::vector<Checkpoint> checkpoints;
  EnsembleModel ensemble;
  DuqHead duq;
  UqMethod method = UqMethod::kMcDropoutAdHoc;
  std::size_t eval_samples = 100;

  UqContext context() const {
    switch (method) {
      case UqMethod::kEnsemble: return UqContext::ensemble(ensemble);
      case UqMethod::kDuq: return UqContext::duq(duq);
      default:
        return UqContext::mc_dropout(checkpoints.front().spec,
                                     checkpoints.front().params,
                                     method == UqMethod::kMcDropoutAdHoc,
                                     eval_samples);
    }
  }
};

LoadedModel load_models(const ExperimentConfig& cfg, const Dirs& dirs,
                        std::map<std::string, std::uint64_t>& hashes) {
  LoadedModel loaded;
  loaded.method = cfg.uq_method;
  loaded.eval_samples = cfg.eval_samples;
  auto take = [&](const fs::path& p) {
    if (!fs::exists(p)) {
      throw std::invalid_argument("missing checkpoint " + p.string() +
                                  " (run `uqal train` first)");
    }
    hashes[p.string()] = hash_file(p.string());
    return p.string();
  };
  if (cfg.uq_method == UqMethod::kEnsemble) {
    for (std::size_t m = 0; m < cfg.ensemble_size; ++m) {
      const Checkpoint ck = load_checkpoint(
          take(dirs.checkpoints / ("member_" + std::to_string(m) + ".ckpt")));
      if (m == 0) loaded.ensemble.spec = ck.spec;
      loaded.ensemble.members.push_back(ck.params);
    }
    loaded.ensemble.validate();
    return loaded;
  }
  if (cfg.uq_method == UqMethod::kDuq) {
    loaded.duq = load_duq_head(take(dirs.checkpoints / "duq_head.json"));
    return loaded;
  }
  loaded.checkpoints.push_back(load_checkpoint(take(dirs.checkpoints / "model.ckpt")));
  return loaded;
}

}  // namespace

void cmd_train(const ExperimentConfig& cfg) {
  cfg.validate();
  const Dirs dirs = ensure_dirs(cfg);
  std::map<std::string, std::uint64_t> hashes;

  if (cfg.arch == "segnet") {
    const SegSplit data = make_seg_data(cfg);
    const NetworkSpec spec = make_spec(cfg);
    const TrainResult result = train(spec, data.train, train_config(cfg, cfg.seed));
    const std::string path = (dirs.checkpoints / "model.ckpt").string();
    save_checkpoint(spec, result.params, path, cfg.seed, result.log);
    write_train_log(dirs.checkpoints / "train_log.csv", result.log);
    hashes[path] = hash_file(path);
    write_manifest(dirs, "train", hashes, cfg);
    return;
  }

  const TrainTestSplit data = make_classification_data(cfg);
  const NetworkSpec spec = make_spec(cfg);
  if (cfg.uq_method == UqMethod::kEnsemble) {
    for (std::size_t m = 0; m < cfg.ensemble_size; ++m) {
      const TrainResult result =
          train(spec, data.train, train_config(cfg, cfg.seed + m));
      const std::string path =
          (dirs.checkpoints / ("member_" + std::to_string(m) + ".ckpt")).string();
      save_checkpoint(spec, result.params, path, cfg.seed + m, result.log);
      if (m == 0) write_train_log(dirs.checkpoints / "train_log.csv", result.log);
      hashes[path] = hash_file(path);
    }
  } else {
    const TrainResult result = train(spec, data.train, train_config(cfg, cfg.seed));
    const std::string path = (dirs.checkpoints / "model.ckpt").string();
    save_checkpoint(spec, result.params, path, cfg.seed, result.log);
    write_train_log(dirs.checkpoints / "train_log.csv", result.log);
    hashes[path] = hash_file(path);
  }
  write_manifest(dirs, "train", hashes, cfg);
}

void cmd_duq_fit(const ExperimentConfig& cfg) {
  cfg.validate();
  if (cfg.uq_method != UqMethod::kDuq) {
    throw std::invalid_argument("duq-fit: set the uq method to duq");
  }
  const Dirs dirs = ensure_dirs(cfg);
  std::map<std::string, std::uint64_t> hashes;
  const fs::path model_path = dirs.checkpoints / "model.ckpt";
  if (!fs::exists(model_path)) {
    throw std::invalid_argument("duq-fit: missing extractor checkpoint " +
                                model_path.string());
  }
  hashes[model_path.string()] = hash_file(model_path.string());
  const Checkpoint ck = load_checkpoint(model_path.string());
  const TrainTestSplit data = make_classification_data(cfg);
  const DuqHead head = duq_fit(ck.spec, ck.params, data.train);
  const std::string head_path = (dirs.checkpoints / "duq_head.json").string();
  save_duq_head(head, head_path);
  hashes[head_path] = hash_file(head_path);
  write_manifest(dirs, "duq-fit", hashes, cfg);
}

void cmd_attack(const ExperimentConfig& cfg) {
  cfg.validate();
  const Dirs dirs = ensure_dirs(cfg);
  std::map<std::string, std::uint64_t> hashes;
  const LoadedModel loaded = load_models(cfg, dirs, hashes);
  const UqContext uq = loaded.context();
  const Objective objective = cfg.resolved_objective();
  uq.validate_pairing(objective.kind);
  const AttackConfig attack = cfg.resolved_attack();

  std::vector<Tensor> inputs;
  std::vector<int> labels;
  if (cfg.arch == "segnet") {
    const SegSplit data = make_seg_data(cfg);
    for (const auto& img : data.test.images) inputs.push_back(img);
    labels.assign(inputs.size(), -1);
  } else {
    const TrainTestSplit data = make_classification_data(cfg);
    inputs = data.test.inputs;
    labels = data.test.labels;
  }

  std::vector<AttackResult> results(inputs.size());
  parallel_for(inputs.size(), cfg.workers, [&](std::size_t i) {
    auto bundle = uq.attack_bundle(
        objective.mc_samples,
        labels[i] >= 0 ? std::optional<int>(labels[i]) : std::nullopt);
    RngStream rng = RngStream::derive(cfg.seed, "attack-sample", i);
    results[i] = pgd(bundle.ctx, inputs[i], objective, attack, rng);
  });

  const fs::path records_path = dirs.attacks / "records.csv";
  std::ofstream out(records_path, std::ios::binary);
  if (!out) throw std::runtime_error("attack: cannot write records");
  out << "sample,epsilon,objective,best_iterate,clean_variance,adv_variance,"
         "clean_entropy,adv_entropy,clean_predicted,adv_predicted,"
         "prediction_flipped,uncertainty_success\n";
  char buf[256];
  for (std::size_t i = 0; i < results.size(); ++i) {
    const AttackResult& r = results[i];
    std::snprintf(buf, sizeof buf,
                  "%zu,%.12g,%s,%zu,%.12g,%.12g,%.12g,%.12g,%d,%d,%d,%d\n", i,
                  attack.epsilon, objective_name(objective.kind).c_str(),
                  r.best_index, r.clean().variance, r.best().variance,
                  r.clean().entropy, r.best().entropy, r.clean().predicted,
                  r.best().predicted, r.prediction_flipped ? 1 : 0,
                  r.uncertainty_success ? 1 : 0);
    out << buf;
  }
  out.close();

  if (cfg.dump_traces) {
    for (std::size_t i = 0; i < results.size(); ++i) {
      std::ofstream trace_out(
          dirs.attacks / ("trace_" + std::to_string(i) + ".csv"),
          std::ios::binary);
      trace_out << "iteration,objective,variance,entropy,predicted\n";
      for (std::size_t t = 0; t < results[i].trace.size(); ++t) {
        const TraceRow& row = results[i].trace[t];
        std::snprintf(buf, sizeof buf, "%zu,%.12g,%.12g,%.12g,%d\n", t,
                      row.objective, row.variance, row.entropy, row.predicted);
        trace_out << buf;
      }
    }
  }

  warn_if_stale(dirs, hashes);
  hashes[records_path.string()] = hash_file(records_path.string());
  write_manifest(dirs, "attack", hashes, cfg);
}

void cmd_eval_security(const ExperimentConfig& cfg) {
  cfg.validate();
  if (cfg.arch == "segnet") {
    throw std::invalid_argument("eval security: classification models only");
  }
  const Dirs dirs = ensure_dirs(cfg);
  std::map<std::string, std::uint64_t> hashes;
  const LoadedModel loaded = load_models(cfg, dirs, hashes);
  const UqContext uq = loaded.context();
  warn_if_stale(dirs, hashes);

  const TrainTestSplit data = make_classification_data(cfg);
  SecurityEvalConfig eval_cfg;
  eval_cfg.eps_grid = cfg.resolved_eps_grid();
  eval_cfg.objective = cfg.resolved_objective();
  eval_cfg.attack = cfg.resolved_attack();
  eval_cfg.seed = cfg.seed;
  eval_cfg.workers = cfg.workers;
  const SecurityCurve curve = run_security_eval(uq, data.test, eval_cfg);

  const std::string csv_path = (dirs.curves / "security.csv").string();
  emit_csv(curve, csv_path);
  hashes[csv_path] = hash_file(csv_path);

  SvgSeries accuracy{"accuracy", {}, {}};
  SvgSeries entropy{"entropy", {}, {}};
  SvgSeries variance{"variance", {}, {}};
  for (const auto& row : curve.rows) {
    accuracy.xs.push_back(row.epsilon);
    accuracy.ys.push_back(row.accuracy);
    entropy.xs.push_back(row.epsilon);
    entropy.ys.push_back(row.entropy_mean);
    variance.xs.push_back(row.epsilon);
    variance.ys.push_back(row.variance_mean);
  }
  SvgStyle style;
  style.title = "security evaluation (" + curve.objective + ")";
  style.x_label = "epsilon";
  style.y_label = "accuracy / entropy";
  emit_svg_plot({accuracy, entropy}, (dirs.figures / "security.svg").string(),
                style);
  SvgStyle var_style;
  var_style.title = "epistemic variance (" + curve.objective + ")";
  var_style.x_label = "epsilon";
  var_style.y_label = "log10 variance";
  var_style.log_y = true;
  emit_svg_plot({variance}, (dirs.figures / "security_variance.svg").string(),
                var_style);
  write_manifest(dirs, "eval-security", hashes, cfg);
}

void cmd_eval_rejection(const ExperimentConfig& cfg) {
  cfg.validate();
  if (cfg.dataset != "blobs") {
    throw std::invalid_argument("eval rejection: needs the blobs dataset (OOD mixture)");
  }
  const Dirs dirs = ensure_dirs(cfg);
  std::map<std::string, std::uint64_t> hashes;
  const LoadedModel loaded = load_models(cfg, dirs, hashes);
  const UqContext uq = loaded.context();
  warn_if_stale(dirs, hashes);

  Dataset iid_test = gen_blobs(cfg.classes, cfg.test_per_class, cfg.dim,
                               cfg.separation, cfg.noise, cfg.seed, "test");
  if (cfg.n_iid > iid_test.size()) {
    // draw a bigger pool rather than failing on the paper-sized default
    const std::size_t per_class = (cfg.n_iid + cfg.classes - 1) / cfg.classes;
    iid_test = gen_blobs(cfg.classes, per_class, cfg.dim, cfg.separation,
                         cfg.noise, cfg.seed, "test");
  }
  const OodMixture mixture =
      build_ood_mixture(iid_test, OodParams{}, cfg.n_iid, cfg.n_ood, cfg.seed);

  std::vector<SvgSeries> series;
  const std::string csv_path = (dirs.curves / "rejection.csv").string();
  std::ofstream out(csv_path, std::ios::binary);
  out << "rejection_rate,accuracy,epsilon,measure\n";
  char buf[128];
  for (double eps : cfg.resolved_eps_grid()) {
    RejectionEvalConfig eval_cfg;
    eval_cfg.epsilon = eps;
    eval_cfg.objective = cfg.resolved_objective();
    eval_cfg.attack = cfg.resolved_attack();
    eval_cfg.r_grid = cfg.resolved_r_grid();
    eval_cfg.measure = cfg.measure;
    eval_cfg.attack_iid = cfg.attack_iid;
    eval_cfg.seed = cfg.seed;
    eval_cfg.workers = cfg.workers;
    const RejectionCurve curve = run_rejection_eval(uq, mixture, eval_cfg);
    SvgSeries s;
    std::snprintf(buf, sizeof buf, "eps=%.4g", eps);
    s.name = buf;
    for (const auto& row : curve.rows) {
      std::snprintf(buf, sizeof buf, "%.12g,%.12g,%.12g,%s\n",
                    row.rejection_rate, row.accuracy, curve.epsilon,
                    curve.measure.c_str());
      out << buf;
      s.xs.push_back(row.rejection_rate);
      s.ys.push_back(row.accuracy);
    }
    series.push_back(std::move(s));
  }
  out.close();
  hashes[csv_path] = hash_file(csv_path);

  SvgStyle style;
  style.title = "accuracy-rejection (" + objective_name(cfg.objective) + ")";
  style.x_label = "rejection rate";
  style.y_label = "retained accuracy";
  emit_svg_plot(series, (dirs.figures / "rejection.svg").string(), style);
  write_manifest(dirs, "eval-rejection", hashes, cfg);
}

void cmd_eval_seg_demo(const ExperimentConfig& cfg) {
  cfg.validate();
  if (cfg.arch != "segnet") {
    throw std::invalid_argument("eval seg-demo: needs the segnet arch");
  }
  const Dirs dirs = ensure_dirs(cfg);
  std::map<std::string, std::uint64_t> hashes;
  const LoadedModel loaded = load_models(cfg, dirs, hashes);
  warn_if_stale(dirs, hashes);
  const Checkpoint& ck = loaded.checkpoints.front();

  const SegSplit data = make_seg_data(cfg);
  SegComparisonConfig comp_cfg;
  comp_cfg.attack = cfg.resolved_attack();
  comp_cfg.attack.epsilon = cfg.epsilon;
  comp_cfg.attack_samples = cfg.attack_samples;
  comp_cfg.eval_samples = cfg.eval_samples;
  comp_cfg.seed = cfg.seed;
  comp_cfg.workers = cfg.workers;
  const SegComparison comparison =
      run_seg_comparison(ck.spec, ck.params, data.test, comp_cfg);

  const std::string csv_path = (dirs.curves / "seg_summary.csv").string();
  emit_csv(comparison, csv_path);
  hashes[csv_path] = hash_file(csv_path);
  for (const auto& report : comparison.reports) {
    emit_svg_heatmap(report.variance_map, comparison.height, comparison.width,
                     (dirs.figures / ("seg_" + report.attack + "_variance.svg")).string(),
                     report.attack + " variance");
    emit_svg_heatmap(report.entropy_map, comparison.height, comparison.width,
                     (dirs.figures / ("seg_" + report.attack + "_entropy.svg")).string(),
                     report.attack + " entropy");
    emit_svg_class_map(report.predicted_map, comparison.height, comparison.width,
                       (dirs.figures / ("seg_" + report.attack + "_prediction.svg")).string(),
                       report.attack + " prediction");
  }
  write_manifest(dirs, "eval-seg-demo", hashes, cfg);
}

}  // namespace uqal
