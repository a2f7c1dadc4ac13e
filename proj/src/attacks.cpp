#include "uqal/attacks.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace uqal {

DropoutMcModel::DropoutMcModel(const NetworkSpec& spec, const Parameters& params,
                               std::size_t samples)
    : spec_(&spec), params_(&params), samples_(samples) {
  if (samples == 0) {
    throw std::invalid_argument("mc model: sample count must be >= 1");
  }
}

std::vector<Tensor> DropoutMcModel::build_mc(Graph& g, const Tensor& x,
                                             RngStream& rng) const {
  const ParamTensors shared = intern_params(g, params_->layers, false);
  std::vector<Tensor> out;
  out.reserve(samples_);
  for (std::size_t s = 0; s < samples_; ++s) {
    out.push_back(build_forward(g, *spec_, shared, x, ForwardMode::kMcSample, &rng));
  }
  return out;
}

Tensor DropoutMcModel::build_deterministic(Graph& g, const Tensor& x) const {
  const ParamTensors shared = intern_params(g, params_->layers, false);
  return build_forward(g, *spec_, shared, x, ForwardMode::kDeterministic, nullptr);
}

EnsembleMcModel::EnsembleMcModel(const EnsembleModel& ensemble)
    : ensemble_(&ensemble) {
  if (ensemble.members.size() < 2) {
    throw std::invalid_argument("ensemble model: needs at least two members");
  }
}

std::size_t EnsembleMcModel::sample_count() const {
  return ensemble_->members.size();
}
std::size_t EnsembleMcModel::num_classes() const {
  return ensemble_->spec.num_classes;
}
bool EnsembleMcModel::is_segmenter() const {
  return ensemble_->spec.segmentation;
}

std::vector<Tensor> EnsembleMcModel::build_mc(Graph& g, const Tensor& x,
                                              RngStream&) const {
  std::vector<Tensor> out;
  out.reserve(ensemble_->members.size());
  for (const Parameters& member : ensemble_->members) {
    const ParamTensors shared = intern_params(g, member.layers, false);
    out.push_back(build_forward(g, ensemble_->spec, shared, x,
                                ForwardMode::kDeterministic, nullptr));
  }
  return out;
}

Tensor EnsembleMcModel::build_deterministic(Graph& g, const Tensor& x) const {
  throw std::invalid_argument(
      "ensemble model: no single deterministic member to run");
  (void)g;
  (void)x;
}

std::string objective_name(ObjectiveKind kind) {
  switch (kind) {
    case ObjectiveKind::kMva: return "mva";
    case ObjectiveKind::kAta: return "ata";
    case ObjectiveKind::kStab: return "stab";
    case ObjectiveKind::kDuqTarget: return "duq-target";
    case ObjectiveKind::kUst: return "ust";
    case ObjectiveKind::kCeEvasion: return "ce-evasion";
  }
  return "?";
}

std::optional<ObjectiveKind> objective_from_name(const std::string& name) {
  if (name == "mva") return ObjectiveKind::kMva;
  if (name == "ata") return ObjectiveKind::kAta;
  if (name == "stab") return ObjectiveKind::kStab;
  if (name == "duq-target") return ObjectiveKind::kDuqTarget;
  if (name == "ust" || name == "ust-bg" || name == "ust-fb") return ObjectiveKind::kUst;
  if (name == "ce-evasion") return ObjectiveKind::kCeEvasion;
  return std::nullopt;
}

std::string criterion_name(Criterion criterion) {
  return criterion == Criterion::kMinUncertainty ? "min-uncertainty"
                                                 : "misclassify";
}

std::optional<Criterion> criterion_from_name(const std::string& name) {
  if (name == "min-uncertainty") return Criterion::kMinUncertainty;
  if (name == "misclassify") return Criterion::kMisclassify;
  return std::nullopt;
}

void Objective::validate() const {
  if (gamma != 1 && gamma != -1) {
    throw std::invalid_argument("objective: gamma must be +1 or -1");
  }
  const std::size_t min_samples = kind == ObjectiveKind::kMva ? 2 : 1;
  if (mc_samples < min_samples) {
    throw std::invalid_argument("objective: " + objective_name(kind) +
                                " needs at least " +
                                std::to_string(min_samples) + " MC samples");
  }
}

void AttackConfig::validate() const {
  if (epsilon < 0.0) throw std::invalid_argument("attack: epsilon must be >= 0");
  if (steps == 0) throw std::invalid_argument("attack: needs at least one step");
  if (!(step_size > 0.0)) throw std::invalid_argument("attack: step size must be positive");
}

Tensor project_linf(const Tensor& x, const Tensor& x0, double epsilon, bool box) {
  if (!same_shape(x, x0)) {
    throw std::invalid_argument("project_linf: shape mismatch");
  }
  Tensor out = x.detached();
  for (std::size_t i = 0; i < out.numel(); ++i) {
    const double lo = x0.values[i] - epsilon;
    const double hi = x0.values[i] + epsilon;
    double v = out.values[i];
    v = v < lo ? lo : (v > hi ? hi : v);
    if (box) v = v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v);
    out.values[i] = v;
  }
  return out;
}

namespace {

double sgn(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

bool needs_target(ObjectiveKind kind) {
  return kind == ObjectiveKind::kAta || kind == ObjectiveKind::kStab ||
         kind == ObjectiveKind::kDuqTarget || kind == ObjectiveKind::kUst;
}

Tensor onehot(std::size_t num_classes, std::size_t cls) {
  Tensor t = Tensor::zeros({num_classes});
  t.values[cls] = 1.0;
  return t;
}

// Mean prediction of the MC-capable model at a plain input, used for target
// resolution and trace bookkeeping.
std::vector<double> mc_mean_at(const McModel& mc, const Tensor& x,
                               std::size_t, RngStream& rng) {
  Graph g;
  Tensor xl = g.leaf(x);
  const std::vector<Tensor> probs = mc.build_mc(g, xl, rng);
  std::vector<double> mean(probs.front().numel(), 0.0);
  for (const Tensor& p : probs) {
    for (std::size_t i = 0; i < mean.size(); ++i) mean[i] += p.values[i];
  }
  for (double& v : mean) v /= static_cast<double>(probs.size());
  return mean;
}

int modal_class(const std::vector<int>& map, std::size_t num_classes) {
  std::vector<std::size_t> counts(num_classes, 0);
  for (int v : map) ++counts[static_cast<std::size_t>(v)];
  std::size_t best = 0;
  for (std::size_t c = 1; c < num_classes; ++c) {
    if (counts[c] > counts[best]) best = c;
  }
  return static_cast<int>(best);
}

std::vector<int> deterministic_map(const McModel& mc, const Tensor& x) {
  Graph g;
  const Tensor p = mc.build_deterministic(g, g.leaf(x));
  const std::size_t L = mc.num_classes();
  const std::size_t omega = p.numel() / L;
  std::vector<int> map(omega);
  for (std::size_t pix = 0; pix < omega; ++pix) {
    const auto begin =
        p.values.begin() + static_cast<std::ptrdiff_t>(pix * L);
    map[pix] = argmax_index(
        std::vector<double>(begin, begin + static_cast<std::ptrdiff_t>(L)));
  }
  return map;
}

McPredictionSet set_from_probs(const std::vector<Tensor>& probs,
                               std::size_t num_classes) {
  McPredictionSet mc;
  mc.samples = probs.size();
  mc.num_classes = num_classes;
  mc.omega = probs.front().numel() / num_classes;
  mc.probs.reserve(mc.samples * mc.omega * num_classes);
  for (const Tensor& p : probs) {
    mc.probs.insert(mc.probs.end(), p.values.begin(), p.values.end());
  }
  return mc;
}

// Fills the measurement part of a trace row from an MC set.
TraceRow measure(const McPredictionSet& mc) {
  TraceRow row;
  if (mc.omega == 1) {
    const UncertaintyReport report = uncertainty_report(mc);
    row.variance = report.epistemic_variance;
    row.entropy = report.aleatoric_entropy;
    row.predicted = report.predicted;
  } else {
    const PixelwiseUncertainty pw = pixelwise_uncertainty(mc);
    double var = 0.0, ent = 0.0;
    for (std::size_t p = 0; p < mc.omega; ++p) {
      var += pw.variance_map[p];
      ent += pw.entropy_map[p];
    }
    row.variance = var / static_cast<double>(mc.omega);
    row.entropy = ent / static_cast<double>(mc.omega);
    row.predicted = modal_class(pw.mean_segmentation, mc.num_classes);
  }
  return row;
}

void require_context(const AttackContext& ctx, const Objective& objective) {
  if (objective.kind == ObjectiveKind::kDuqTarget) {
    if (ctx.duq == nullptr) {
      throw std::invalid_argument("attack: duq-target needs a DUQ head");
    }
    return;
  }
  if (ctx.mc == nullptr) {
    throw std::invalid_argument("attack: " + objective_name(objective.kind) +
                                " needs an MC-capable model");
  }
  const bool seg = ctx.mc->is_segmenter();
  if (objective.kind == ObjectiveKind::kUst && !seg) {
    throw std::invalid_argument("attack: ust needs a segmenter");
  }
  if (seg && (objective.kind == ObjectiveKind::kAta ||
              objective.kind == ObjectiveKind::kStab ||
              objective.kind == ObjectiveKind::kCeEvasion)) {
    throw std::invalid_argument("attack: " + objective_name(objective.kind) +
                                " is a classification objective");
  }
  if (objective.kind == ObjectiveKind::kMva &&
      ctx.mc->sample_count() < 2) {
    throw std::invalid_argument("attack: mva needs at least two MC samples");
  }
}

}  // namespace

std::size_t resolve_target(const AttackContext& ctx, const Objective& objective,
                           const Tensor& x0, RngStream& rng) {
  switch (objective.kind) {
    case ObjectiveKind::kAta: {
      if (!ctx.true_label) {
        throw std::invalid_argument("attack: ata needs the true label");
      }
      const std::vector<double> mean =
          mc_mean_at(*ctx.mc, x0, objective.mc_samples, rng);
      int best = -1;
      for (std::size_t c = 0; c < mean.size(); ++c) {
        if (static_cast<int>(c) == *ctx.true_label) continue;
        if (best < 0 || mean[c] > mean[static_cast<std::size_t>(best)]) {
          best = static_cast<int>(c);
        }
      }
      return static_cast<std::size_t>(best);
    }
    case ObjectiveKind::kStab: {
      const std::vector<double> mean =
          mc_mean_at(*ctx.mc, x0, objective.mc_samples, rng);
      return static_cast<std::size_t>(argmax_index(mean));
    }
    case ObjectiveKind::kDuqTarget: {
      return static_cast<std::size_t>(duq_predict(*ctx.duq, x0).predicted);
    }
    case ObjectiveKind::kUst: {
      const std::vector<int> map = deterministic_map(*ctx.mc, x0);
      const std::size_t L = ctx.mc->num_classes();
      std::vector<std::size_t> counts(L, 0);
      for (int v : map) ++counts[static_cast<std::size_t>(v)];
      std::size_t pick = 0;
      for (std::size_t c = 1; c < L; ++c) {
        if (objective.ust_target == UstTarget::kModal
                ? counts[c] > counts[pick]
                : counts[c] < counts[pick]) {
          pick = c;
        }
      }
      return pick;
    }
    default:
      throw std::invalid_argument("attack: objective has no target class");
  }
}

ObjectiveEval evaluate_objective(Graph& g, const AttackContext& ctx,
                                 const Objective& objective,
                                 std::optional<std::size_t> target,
                                 const Tensor& x, RngStream& rng) {
  ObjectiveEval eval;
  switch (objective.kind) {
    case ObjectiveKind::kMva: {
      const std::vector<Tensor> probs = ctx.mc->build_mc(g, x, rng);
      const std::size_t S = probs.size();
      const std::size_t omega = probs.front().numel() / ctx.mc->num_classes();
      Tensor sum_dots = g.sum(g.mul(probs[0], probs[0]));
      Tensor mean_acc = probs[0];
      for (std::size_t s = 1; s < S; ++s) {
        sum_dots = g.add(sum_dots, g.sum(g.mul(probs[s], probs[s])));
        mean_acc = g.add(mean_acc, probs[s]);
      }
      const Tensor inv_s = Tensor::scalar(1.0 / static_cast<double>(S));
      Tensor mean = g.mul(mean_acc, inv_s);
      Tensor variance = g.sub(g.mul(sum_dots, inv_s), g.sum(g.mul(mean, mean)));
      Tensor per_pixel =
          g.mul(variance, Tensor::scalar(1.0 / static_cast<double>(omega)));
      eval.j = g.log(g.add(g.relu(per_pixel), Tensor::scalar(1e-12)));
      eval.row = measure(set_from_probs(probs, ctx.mc->num_classes()));
      break;
    }
    case ObjectiveKind::kAta:
    case ObjectiveKind::kStab:
    case ObjectiveKind::kCeEvasion: {
      const std::vector<Tensor> probs = ctx.mc->build_mc(g, x, rng);
      Tensor mean_acc = probs[0];
      for (std::size_t s = 1; s < probs.size(); ++s) {
        mean_acc = g.add(mean_acc, probs[s]);
      }
      Tensor mean = g.mul(
          mean_acc, Tensor::scalar(1.0 / static_cast<double>(probs.size())));
      std::size_t cls = 0;
      if (objective.kind == ObjectiveKind::kCeEvasion) {
        if (!ctx.true_label) {
          throw std::invalid_argument("attack: ce-evasion needs the true label");
        }
        cls = static_cast<std::size_t>(*ctx.true_label);
      } else {
        cls = *target;
      }
      Tensor pick =
          g.sum(g.mul(mean, onehot(ctx.mc->num_classes(), cls)));
      Tensor logp = g.log(g.add(pick, Tensor::scalar(1e-12)));
      eval.j = objective.kind == ObjectiveKind::kCeEvasion ? logp : g.neg(logp);
      eval.row = measure(set_from_probs(probs, ctx.mc->num_classes()));
      break;
    }
    case ObjectiveKind::kDuqTarget: {
      const DuqHead& head = *ctx.duq;
      ForwardOptions opts;
      opts.features_only = true;
      const ParamTensors shared =
          intern_params(g, head.extractor_params.layers, false);
      Tensor f = build_forward(g, head.extractor_spec, shared, x,
                               ForwardMode::kDeterministic, nullptr, opts);
      Tensor diff = g.sub(f, head.centroids[*target]);
      Tensor dist2 = g.sum(g.mul(diff, diff));
      Tensor kernel = g.exp(
          g.mul(dist2, Tensor::scalar(-1.0 / (2.0 * head.sigma * head.sigma))));
      eval.j = g.neg(kernel);

      double max_k = 0.0;
      int best = 0;
      for (std::size_t c = 0; c < head.centroids.size(); ++c) {
        const double k =
            rbf_kernel(f.detached(), head.centroids[c], head.sigma);
        if (k > max_k) {
          max_k = k;
          best = static_cast<int>(c);
        }
      }
      eval.row.variance = 1.0 - max_k;
      eval.row.entropy = 0.0;
      eval.row.predicted = best;
      break;
    }
    case ObjectiveKind::kUst: {
      const std::size_t L = ctx.mc->num_classes();
      Tensor det = ctx.mc->build_deterministic(g, x);
      const std::size_t omega = det.numel() / L;
      Tensor mask = Tensor::zeros(det.shape);
      for (std::size_t p = 0; p < omega; ++p) {
        mask.values[p * L + *target] = 1.0;
      }
      Tensor logp = g.log(g.add(det, Tensor::scalar(1e-12)));
      eval.j = g.neg(g.sum(g.mul(logp, mask)));

      const std::vector<Tensor> probs = ctx.mc->build_mc(g, x, rng);
      eval.row = measure(set_from_probs(probs, L));
      break;
    }
  }
  eval.row.objective = eval.j.item();
  return eval;
}

std::size_t select_best(const std::vector<TraceRow>& trace,
                        Criterion criterion, const Objective& objective,
                        std::optional<int> true_label) {
  if (trace.empty()) throw std::invalid_argument("select_best: empty trace");
  if (criterion == Criterion::kMisclassify) {
    if (!true_label) {
      throw std::invalid_argument("select_best: misclassify needs the true label");
    }
    for (std::size_t i = 0; i < trace.size(); ++i) {
      if (trace[i].predicted != *true_label) return i;
    }
    return trace.size() - 1;
  }

  const double gamma = static_cast<double>(objective.gamma);
  const bool entropy_tiebreak = objective.kind != ObjectiveKind::kMva;
  std::size_t best = 0;
  for (std::size_t i = 1; i < trace.size(); ++i) {
    const double primary = gamma * trace[i].variance;
    const double best_primary = gamma * trace[best].variance;
    if (primary < best_primary) {
      best = i;
    } else if (entropy_tiebreak && primary == best_primary &&
               gamma * trace[i].entropy < gamma * trace[best].entropy) {
      best = i;
    }
  }
  return best;
}

Tensor fgsm(const ScalarFn& loss, const Tensor& x, double epsilon, bool box) {
  if (epsilon < 0.0) throw std::invalid_argument("fgsm: epsilon must be >= 0");
  Graph g;
  Tensor xl = g.leaf(x);
  Tensor out = loss(g, xl);
  if (out.numel() != 1) throw std::invalid_argument("fgsm: loss must be scalar");
  const Gradients grads = g.backward(out);
  const Tensor& gx = grads.at(xl);
  if (!gx.all_finite()) throw std::runtime_error("fgsm: non-finite gradient");
  Tensor adv = x.detached();
  for (std::size_t i = 0; i < adv.numel(); ++i) {
    adv.values[i] += epsilon * sgn(gx.values[i]);
    if (box) {
      adv.values[i] =
          adv.values[i] < 0.0 ? 0.0 : (adv.values[i] > 1.0 ? 1.0 : adv.values[i]);
    }
  }
  return adv;
}

Tensor pgd_scalar(const ScalarFn& objective, const Tensor& x, int gamma,
                  const AttackConfig& cfg) {
  cfg.validate();
  if (gamma != 1 && gamma != -1) {
    throw std::invalid_argument("pgd_scalar: gamma must be +1 or -1");
  }
  Tensor current = x.detached();
  for (std::size_t t = 0; t < cfg.steps; ++t) {
    Graph g;
    Tensor xl = g.leaf(current);
    Tensor out = objective(g, xl);
    if (out.numel() != 1) {
      throw std::invalid_argument("pgd_scalar: objective must be scalar");
    }
    const Gradients grads = g.backward(out);
    const Tensor& gx = grads.at(xl);
    if (!gx.all_finite()) {
      throw std::runtime_error("pgd_scalar: non-finite gradient");
    }
    Tensor stepped = current.detached();
    const double scale = cfg.step_size * static_cast<double>(gamma);
    for (std::size_t i = 0; i < stepped.numel(); ++i) {
      stepped.values[i] -= scale * sgn(gx.values[i]);
    }
    current = project_linf(stepped, x, cfg.epsilon, cfg.box);
  }
  return current;
}

AttackResult pgd(const AttackContext& ctx, const Tensor& x,
                 const Objective& objective, const AttackConfig& cfg,
                 RngStream& rng) {
  objective.validate();
  cfg.validate();
  require_context(ctx, objective);

  std::optional<std::size_t> target = objective.target_class;
  if (!target && needs_target(objective.kind)) {
    target = resolve_target(ctx, objective, x, rng);
  }

  AttackResult result;
  result.resolved_target = target;
  std::vector<Tensor> iterates;
  iterates.reserve(cfg.steps + 1);

  Tensor current = x.detached();
  for (std::size_t t = 0; t <= cfg.steps; ++t) {
    if (t > 0 && objective.retarget_each_iteration &&
        needs_target(objective.kind) && !objective.target_class) {
      target = resolve_target(ctx, objective, current, rng);
    }
    Graph g;
    Tensor xl = g.leaf(current);
    ObjectiveEval eval = evaluate_objective(g, ctx, objective, target, xl, rng);
    if (!std::isfinite(eval.row.objective)) {
      result.trace.push_back(eval.row);
      result.adversarial = current;
      throw std::runtime_error("pgd: non-finite objective at iteration " +
                               std::to_string(t));
    }
    result.trace.push_back(eval.row);
    iterates.push_back(current);
    if (t == cfg.steps) break;

    const Gradients grads = g.backward(eval.j);
    const Tensor& gx = grads.at(xl);
    if (!gx.all_finite()) {
      throw std::runtime_error("pgd: non-finite gradient at iteration " +
                               std::to_string(t));
    }
    Tensor stepped = current.detached();
    const double scale = cfg.step_size * static_cast<double>(objective.gamma);
    for (std::size_t i = 0; i < stepped.numel(); ++i) {
      stepped.values[i] -= scale * sgn(gx.values[i]);
    }
    current = project_linf(stepped, x, cfg.epsilon, cfg.box);
  }

  result.best_index =
      select_best(result.trace, cfg.criterion, objective, ctx.true_label);
  result.adversarial = iterates[result.best_index];
  result.prediction_flipped =
      result.best().predicted != result.clean().predicted;
  const double delta = result.best().variance - result.clean().variance;
  result.uncertainty_success = objective.gamma > 0 ? delta < 0.0 : delta > 0.0;
  return result;
}

}  // namespace uqal
