#include "uqal/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "uqal/parallel.hpp"

namespace uqal {

std::string uq_method_name(UqMethod method) {
  switch (method) {
    case UqMethod::kMcDropoutAdHoc: return "mc-dropout-adhoc";
    case UqMethod::kMcDropoutPostHoc: return "mc-dropout-posthoc";
    case UqMethod::kEnsemble: return "ensemble";
    case UqMethod::kDuq: return "duq";
  }
  return "?";
}

std::optional<UqMethod> uq_method_from_name(const std::string& name) {
  if (name == "mc-dropout-adhoc") return UqMethod::kMcDropoutAdHoc;
  if (name == "mc-dropout-posthoc") return UqMethod::kMcDropoutPostHoc;
  if (name == "ensemble") return UqMethod::kEnsemble;
  if (name == "duq") return UqMethod::kDuq;
  return std::nullopt;
}

UqContext UqContext::mc_dropout(const NetworkSpec& spec, const Parameters& params,
                                bool ad_hoc, std::size_t eval_samples) {
  if (ad_hoc && spec.dropout_mode != DropoutMode::kAdHoc) {
    throw std::invalid_argument("uq context: spec is not ad-hoc dropout");
  }
  if (!ad_hoc && spec.dropout_mode != DropoutMode::kPostHoc) {
    throw std::invalid_argument("uq context: spec is not post-hoc dropout");
  }
  UqContext ctx;
  ctx.method_ = ad_hoc ? UqMethod::kMcDropoutAdHoc : UqMethod::kMcDropoutPostHoc;
  ctx.spec_ = &spec;
  ctx.params_ = &params;
  ctx.eval_samples_ = eval_samples;
  return ctx;
}

UqContext UqContext::ensemble(const EnsembleModel& ensemble) {
  UqContext ctx;
  ctx.method_ = UqMethod::kEnsemble;
  ctx.ensemble_ = &ensemble;
  ctx.eval_samples_ = ensemble.members.size();
  return ctx;
}

UqContext UqContext::duq(const DuqHead& head) {
  UqContext ctx;
  ctx.method_ = UqMethod::kDuq;
  ctx.duq_ = &head;
  ctx.eval_samples_ = 1;
  return ctx;
}

bool UqContext::is_segmenter() const {
  switch (method_) {
    case UqMethod::kMcDropoutAdHoc:
    case UqMethod::kMcDropoutPostHoc:
      return spec_->segmentation;
    case UqMethod::kEnsemble:
      return ensemble_->spec.segmentation;
    case UqMethod::kDuq:
      return false;
  }
  return false;
}

Measurement UqContext::measure(const Tensor& x, RngStream& rng) const {
  Measurement m;
  if (method_ == UqMethod::kDuq) {
    const DuqPrediction p = duq_predict(*duq_, x);
    m.variance = p.uncertainty;
    m.entropy = 0.0;
    m.predicted = p.predicted;
    return m;
  }
  McPredictionSet mc;
  if (method_ == UqMethod::kEnsemble) {
    mc = ensemble_predict(*ensemble_, x);
  } else {
    mc = mc_predict(*spec_, *params_, x, eval_samples_, rng);
  }
  const UncertaintyReport report = uncertainty_report(mc);
  m.variance = report.epistemic_variance;
  m.entropy = report.aleatoric_entropy;
  m.predicted = report.predicted;
  return m;
}

PixelwiseUncertainty UqContext::measure_pixelwise(const Tensor& x,
                                                  RngStream& rng) const {
  if (method_ == UqMethod::kDuq) {
    throw std::invalid_argument("uq context: DUQ has no pixelwise measure");
  }
  McPredictionSet mc;
  if (method_ == UqMethod::kEnsemble) {
    mc = ensemble_predict(*ensemble_, x);
  } else {
    mc = mc_predict(*spec_, *params_, x, eval_samples_, rng);
  }
  return pixelwise_uncertainty(mc);
}

void UqContext::validate_pairing(ObjectiveKind kind) const {
  if (kind == ObjectiveKind::kDuqTarget) {
    if (method_ != UqMethod::kDuq) {
      throw std::invalid_argument(
          "attack/uq pairing: duq-target needs the duq method");
    }
    return;
  }
  if (method_ == UqMethod::kDuq) {
    throw std::invalid_argument(
        "attack/uq pairing: " + objective_name(kind) +
        " needs MC sampling, but duq is deterministic (use duq-target)");
  }
  const bool stochastic =
      method_ == UqMethod::kEnsemble ||
      spec_->dropout_mode != DropoutMode::kNone;
  if (kind == ObjectiveKind::kMva && !stochastic) {
    throw std::invalid_argument(
        "attack/uq pairing: mva needs a stochastic predictor (dropout or "
        "ensemble); a deterministic model has zero predictive variance");
  }
  if (kind == ObjectiveKind::kUst && !is_segmenter()) {
    throw std::invalid_argument("attack/uq pairing: ust needs a segmenter");
  }
}

UqContext::AttackBundle UqContext::attack_bundle(
    std::size_t attack_samples, std::optional<int> true_label) const {
  AttackBundle bundle;
  if (method_ == UqMethod::kDuq) {
    bundle.ctx.duq = duq_;
  } else if (method_ == UqMethod::kEnsemble) {
    bundle.model = std::make_unique<EnsembleMcModel>(*ensemble_);
    bundle.ctx.mc = bundle.model.get();
  } else {
    bundle.model =
        std::make_unique<DropoutMcModel>(*spec_, *params_, attack_samples);
    bundle.ctx.mc = bundle.model.get();
  }
  bundle.ctx.true_label = true_label;
  return bundle;
}

void SecurityEvalConfig::validate() const {
  if (eps_grid.empty()) throw std::invalid_argument("security eval: empty eps grid");
  if (eps_grid.front() != 0.0) {
    throw std::invalid_argument("security eval: grid must start at 0");
  }
  for (std::size_t i = 1; i < eps_grid.size(); ++i) {
    if (!(eps_grid[i] > eps_grid[i - 1])) {
      throw std::invalid_argument("security eval: grid must be strictly increasing");
    }
  }
}

SecurityCurve run_security_eval(const UqContext& uq, const Dataset& test,
                                const SecurityEvalConfig& cfg) {
  cfg.validate();
  uq.validate_pairing(cfg.objective.kind);
  const std::size_t n = test.size();
  const std::size_t n_eps = cfg.eps_grid.size();
  for (int y : test.labels) {
    if (y < 0) throw std::invalid_argument("security eval: needs labelled samples");
  }

  struct Cell {
    double variance = 0.0, entropy = 0.0;
    bool correct = false;
  };
  std::vector<Cell> cells(n * n_eps);

  parallel_for(n, cfg.workers, [&](std::size_t i) {
    for (std::size_t e = 0; e < n_eps; ++e) {
      const double eps = cfg.eps_grid[e];
      const std::uint64_t cell_id = i * n_eps + e;
      Tensor point = test.inputs[i];
      if (eps > 0.0) {
        AttackConfig attack = cfg.attack;
        attack.epsilon = eps;
        auto bundle = uq.attack_bundle(cfg.objective.mc_samples, test.labels[i]);
        RngStream attack_rng =
            RngStream::derive(cfg.seed, "security-attack", cell_id);
        const AttackResult res =
            pgd(bundle.ctx, point, cfg.objective, attack, attack_rng);
        point = res.adversarial;
      }
      RngStream eval_rng = RngStream::derive(cfg.seed, "security-eval", cell_id);
      const Measurement m = uq.measure(point, eval_rng);
      Cell& cell = cells[cell_id];
      cell.variance = m.variance;
      cell.entropy = m.entropy;
      cell.correct = m.predicted == test.labels[i];
    }
  });

  SecurityCurve curve;
  curve.objective = objective_name(cfg.objective.kind);
  curve.criterion = criterion_name(cfg.attack.criterion);
  for (std::size_t e = 0; e < n_eps; ++e) {
    SecurityCurveRow row;
    row.epsilon = cfg.eps_grid[e];
    for (std::size_t i = 0; i < n; ++i) {
      const Cell& cell = cells[i * n_eps + e];
      row.variance_mean += cell.variance;
      row.entropy_mean += cell.entropy;
      row.accuracy += cell.correct ? 1.0 : 0.0;
    }
    row.variance_mean /= static_cast<double>(n);
    row.entropy_mean /= static_cast<double>(n);
    row.accuracy /= static_cast<double>(n);
    curve.rows.push_back(row);
  }
  return curve;
}

RejectionCurve run_rejection_eval(const UqContext& uq, const OodMixture& mixture,
                                  const RejectionEvalConfig& cfg) {
  if (cfg.measure != "variance" && cfg.measure != "entropy") {
    throw std::invalid_argument("rejection eval: measure must be variance or entropy");
  }
  if (cfg.epsilon > 0.0) uq.validate_pairing(cfg.objective.kind);
  std::vector<double> grid = cfg.r_grid;
  if (grid.empty()) {
    for (int i = 0; i <= 18; ++i) grid.push_back(0.05 * i);
  }

  const std::size_t n = mixture.samples.size();
  std::vector<double> uncertainty(n, 0.0);
  std::vector<bool> correct(n, false);

  parallel_for(n, cfg.workers, [&](std::size_t i) {
    Tensor point = mixture.samples.inputs[i];
    const bool attacked =
        cfg.epsilon > 0.0 && (mixture.is_ood[i] || cfg.attack_iid);
    if (attacked) {
      AttackConfig attack = cfg.attack;
      attack.epsilon = cfg.epsilon;
      auto bundle = uq.attack_bundle(
          cfg.objective.mc_samples,
          mixture.samples.labels[i] >= 0
              ? std::optional<int>(mixture.samples.labels[i])
              : std::nullopt);
      RngStream attack_rng = RngStream::derive(cfg.seed, "rejection-attack", i);
      const AttackResult res =
          pgd(bundle.ctx, point, cfg.objective, attack, attack_rng);
      point = res.adversarial;
    }
    RngStream eval_rng = RngStream::derive(cfg.seed, "rejection-eval", i);
    const Measurement m = uq.measure(point, eval_rng);
    uncertainty[i] = cfg.measure == "variance" ? m.variance : m.entropy;
    correct[i] =
        !mixture.is_ood[i] && m.predicted == mixture.samples.labels[i];
  });

  return build_rejection_curve(uncertainty, correct, grid, cfg.epsilon,
                               cfg.measure);
}

RejectionCurve build_rejection_curve(const std::vector<double>& uncertainty,
                                     const std::vector<bool>& correct,
                                     const std::vector<double>& r_grid,
                                     double epsilon,
                                     const std::string& measure) {
  if (uncertainty.size() != correct.size() || uncertainty.empty()) {
    throw std::invalid_argument("rejection curve: bad per-sample inputs");
  }
  const std::size_t n = uncertainty.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (uncertainty[a] != uncertainty[b]) return uncertainty[a] < uncertainty[b];
    return a < b;
  });
  std::vector<double> correct_prefix(n + 1, 0.0);
  for (std::size_t k = 0; k < n; ++k) {
    correct_prefix[k + 1] = correct_prefix[k] + (correct[order[k]] ? 1.0 : 0.0);
  }

  RejectionCurve curve;
  curve.epsilon = epsilon;
  curve.measure = measure;
  for (double r : r_grid) {
    const long long retained =
        std::llround((1.0 - r) * static_cast<double>(n));
    if (retained <= 0) continue;  // empty retained set: row omitted
    RejectionCurveRow row;
    row.rejection_rate = r;
    row.accuracy = correct_prefix[static_cast<std::size_t>(retained)] /
                   static_cast<double>(retained);
    curve.rows.push_back(row);
  }
  return curve;
}

double curve_area(const RejectionCurve& curve) {
  double area = 0.0;
  for (std::size_t i = 1; i < curve.rows.size(); ++i) {
    const double dr = curve.rows[i].rejection_rate - curve.rows[i - 1].rejection_rate;
    area += dr * 0.5 * (curve.rows[i].accuracy + curve.rows[i - 1].accuracy);
  }
  return area;
}

std::vector<bool> edge_mask(const std::vector<int>& map, std::size_t height,
                            std::size_t width) {
  std::vector<bool> mask(height * width, false);
  for (std::size_t y = 0; y < height; ++y) {
    for (std::size_t x = 0; x < width; ++x) {
      const int cls = map[y * width + x];
      bool edge = false;
      if (y > 0 && map[(y - 1) * width + x] != cls) edge = true;
      if (y + 1 < height && map[(y + 1) * width + x] != cls) edge = true;
      if (x > 0 && map[y * width + x - 1] != cls) edge = true;
      if (x + 1 < width && map[y * width + x + 1] != cls) edge = true;
      mask[y * width + x] = edge;
    }
  }
  return mask;
}

SegComparison run_seg_comparison(const NetworkSpec& spec, const Parameters& params,
                                 const SegDataset& images,
                                 const SegComparisonConfig& cfg) {
  if (!spec.segmentation) {
    throw std::invalid_argument("seg comparison: needs a segmenter spec");
  }
  const std::size_t n = images.size();
  const std::size_t omega = images.height * images.width;
  const std::vector<std::string> attacks = {"clean", "mva", "ust-bg", "ust-fb"};

  struct PerImage {
    std::vector<PixelwiseUncertainty> maps;  // one per attack
    std::vector<bool> edges;
    int modal = 0;
  };
  std::vector<PerImage> work(n);

  parallel_for(n, cfg.workers, [&](std::size_t i) {
    PerImage& slot = work[i];
    slot.maps.resize(attacks.size());
    for (std::size_t a = 0; a < attacks.size(); ++a) {
      const std::uint64_t cell_id = i * attacks.size() + a;
      Tensor point = images.images[i];
      if (attacks[a] != "clean") {
        DropoutMcModel mc(spec, params, cfg.attack_samples);
        AttackContext ctx;
        ctx.mc = &mc;
        Objective obj;
        if (attacks[a] == "mva") {
          obj.kind = ObjectiveKind::kMva;
        } else {
          obj.kind = ObjectiveKind::kUst;
          obj.ust_target = attacks[a] == "ust-bg" ? UstTarget::kModal
                                                  : UstTarget::kLeastFrequent;
        }
        obj.mc_samples = cfg.attack_samples;
        RngStream attack_rng = RngStream::derive(cfg.seed, "seg-attack", cell_id);
        const AttackResult res = pgd(ctx, point, obj, cfg.attack, attack_rng);
        point = res.adversarial;
      }
      RngStream eval_rng = RngStream::derive(cfg.seed, "seg-eval", cell_id);
      const McPredictionSet mc_set =
          mc_predict(spec, params, point, cfg.eval_samples, eval_rng);
      slot.maps[a] = pixelwise_uncertainty(mc_set);
    }
    slot.edges = edge_mask(slot.maps[0].mean_segmentation, images.height,
                           images.width);
    std::vector<std::size_t> counts(spec.num_classes, 0);
    for (int v : slot.maps[0].mean_segmentation) {
      ++counts[static_cast<std::size_t>(v)];
    }
    slot.modal = 0;
    for (std::size_t c = 1; c < spec.num_classes; ++c) {
      if (counts[c] > counts[static_cast<std::size_t>(slot.modal)]) {
        slot.modal = static_cast<int>(c);
      }
    }
  });

  SegComparison comparison;
  comparison.height = images.height;
  comparison.width = images.width;
  for (std::size_t a = 0; a < attacks.size(); ++a) {
    SegAttackReport report;
    report.attack = attacks[a];
    double var[3] = {0, 0, 0}, ent[3] = {0, 0, 0}, flip[3] = {0, 0, 0};
    std::size_t count[3] = {0, 0, 0};  // edge, interior, all
    for (std::size_t i = 0; i < n; ++i) {
      const PerImage& slot = work[i];
      const PixelwiseUncertainty& pw = slot.maps[a];
      for (std::size_t p = 0; p < omega; ++p) {
        const int region = slot.edges[p] ? 0 : 1;
        const double flipped =
            pw.mean_segmentation[p] == slot.modal ? 1.0 : 0.0;
        for (int r : {region, 2}) {
          var[r] += pw.variance_map[p];
          ent[r] += pw.entropy_map[p];
          flip[r] += flipped;
          ++count[r];
        }
      }
    }
    auto fill = [&](int r) {
      SegRegionStats stats;
      if (count[r] > 0) {
        stats.variance_mean = var[r] / static_cast<double>(count[r]);
        stats.entropy_mean = ent[r] / static_cast<double>(count[r]);
        stats.flip_fraction = flip[r] / static_cast<double>(count[r]);
      }
      return stats;
    };
    report.edge = fill(0);
    report.interior = fill(1);
    report.all = fill(2);
    report.variance_map = work[0].maps[a].variance_map;
    report.entropy_map = work[0].maps[a].entropy_map;
    report.predicted_map = work[0].maps[a].mean_segmentation;
    comparison.reports.push_back(std::move(report));
  }
  return comparison;
}

namespace {

std::string fmt12(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.12g", v);
  return buf;
}

std::ofstream open_out(const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("emit: cannot open " + path + " for writing");
  return out;
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::string field;
  std::istringstream in(line);
  while (std::getline(in, field, ',')) fields.push_back(field);
  return fields;
}

}  // namespace

void emit_csv(const SecurityCurve& curve, const std::string& path) {
  std::ofstream out = open_out(path);
  out << "epsilon,accuracy,entropy_mean,variance_mean,objective,criterion\n";
  for (const auto& row : curve.rows) {
    out << fmt12(row.epsilon) << ',' << fmt12(row.accuracy) << ','
        << fmt12(row.entropy_mean) << ',' << fmt12(row.variance_mean) << ','
        << curve.objective << ',' << curve.criterion << "\n";
  }
}

void emit_csv(const RejectionCurve& curve, const std::string& path) {
  std::ofstream out = open_out(path);
  out << "rejection_rate,accuracy,epsilon,measure\n";
  for (const auto& row : curve.rows) {
    out << fmt12(row.rejection_rate) << ',' << fmt12(row.accuracy) << ','
        << fmt12(curve.epsilon) << ',' << curve.measure << "\n";
  }
}

void emit_csv(const SegComparison& comparison, const std::string& path) {
  std::ofstream out = open_out(path);
  out << "attack,region,variance_mean,entropy_mean,flip_fraction\n";
  for (const auto& report : comparison.reports) {
    const std::pair<const char*, const SegRegionStats*> regions[] = {
        {"edge", &report.edge}, {"interior", &report.interior}, {"all", &report.all}};
    for (const auto& [name, stats] : regions) {
      out << report.attack << ',' << name << ',' << fmt12(stats->variance_mean)
          << ',' << fmt12(stats->entropy_mean) << ','
          << fmt12(stats->flip_fraction) << "\n";
    }
  }
}

SecurityCurve parse_security_csv(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("parse: cannot open " + path);
  std::string line;
  if (!std::getline(in, line) ||
      line != "epsilon,accuracy,entropy_mean,variance_mean,objective,criterion") {
    throw std::runtime_error("parse: bad security curve header in " + path);
  }
  SecurityCurve curve;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto fields = split_csv_line(line);
    if (fields.size() != 6) throw std::runtime_error("parse: bad row in " + path);
    SecurityCurveRow row;
    row.epsilon = std::stod(fields[0]);
    row.accuracy = std::stod(fields[1]);
    row.entropy_mean = std::stod(fields[2]);
    row.variance_mean = std::stod(fields[3]);
    curve.objective = fields[4];
    curve.criterion = fields[5];
    curve.rows.push_back(row);
  }
  return curve;
}

RejectionCurve parse_rejection_csv(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("parse: cannot open " + path);
  std::string line;
  if (!std::getline(in, line) || line != "rejection_rate,accuracy,epsilon,measure") {
    throw std::runtime_error("parse: bad rejection curve header in " + path);
  }
  RejectionCurve curve;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto fields = split_csv_line(line);
    if (fields.size() != 4) throw std::runtime_error("parse: bad row in " + path);
    RejectionCurveRow row;
    row.rejection_rate = std::stod(fields[0]);
    row.accuracy = std::stod(fields[1]);
    curve.epsilon = std::stod(fields[2]);
    curve.measure = fields[3];
    curve.rows.push_back(row);
  }
  return curve;
}

namespace {

const char* kPalette[] = {"#4477aa", "#ee6677", "#228833",
                          "#ccbb44", "#66ccee", "#aa3377"};

std::string fmt2(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

std::string fmt3g(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3g", v);
  return buf;
}

}  // namespace

void emit_svg_plot(const std::vector<SvgSeries>& series, const std::string& path,
                   const SvgStyle& style) {
  if (series.empty()) throw std::invalid_argument("svg plot: no series");
  const double left = 62, right = 170, top = 36, bottom = 46;
  const double plot_w = style.width - left - right;
  const double plot_h = style.height - top - bottom;

  bool floored = false;
  auto y_value = [&](double v) {
    if (!style.log_y) return v;
    if (v < 1e-12) {
      floored = true;
      v = 1e-12;
    }
    return std::log10(v);
  };

  double x_min = 0, x_max = 0, y_min = 0, y_max = 0;
  bool first = true;
  for (const auto& s : series) {
    for (std::size_t i = 0; i < s.xs.size(); ++i) {
      const double x = s.xs[i];
      const double y = y_value(s.ys[i]);
      if (first) {
        x_min = x_max = x;
        y_min = y_max = y;
        first = false;
      } else {
        x_min = std::min(x_min, x);
        x_max = std::max(x_max, x);
        y_min = std::min(y_min, y);
        y_max = std::max(y_max, y);
      }
    }
  }
  if (x_max == x_min) x_max = x_min + 1.0;
  if (y_max == y_min) y_max = y_min + 1.0;

  auto sx = [&](double x) { return left + (x - x_min) / (x_max - x_min) * plot_w; };
  auto sy = [&](double y) {
    return top + plot_h - (y_value(y) - y_min) / (y_max - y_min) * plot_h;
  };

  std::ofstream out = open_out(path);
  out << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
      << "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\""
      << style.width << "\" height=\"" << style.height << "\" viewBox=\"0 0 "
      << style.width << " " << style.height << "\">\n";
  out << "<rect width=\"" << style.width << "\" height=\"" << style.height
      << "\" fill=\"white\"/>\n";
  out << "<text x=\"" << style.width / 2 << "\" y=\"20\" text-anchor=\"middle\" "
      << "font-family=\"sans-serif\" font-size=\"14\">" << style.title
      << "</text>\n";

  // axes
  out << "<line x1=\"" << fmt2(left) << "\" y1=\"" << fmt2(top + plot_h)
      << "\" x2=\"" << fmt2(left + plot_w) << "\" y2=\"" << fmt2(top + plot_h)
      << "\" stroke=\"black\"/>\n";
  out << "<line x1=\"" << fmt2(left) << "\" y1=\"" << fmt2(top) << "\" x2=\""
      << fmt2(left) << "\" y2=\"" << fmt2(top + plot_h)
      << "\" stroke=\"black\"/>\n";
  for (int tick = 0; tick <= 4; ++tick) {
    const double fx = x_min + (x_max - x_min) * tick / 4.0;
    const double fy = y_min + (y_max - y_min) * tick / 4.0;
    out << "<text x=\"" << fmt2(sx(fx)) << "\" y=\"" << fmt2(top + plot_h + 16)
        << "\" text-anchor=\"middle\" font-family=\"sans-serif\" "
           "font-size=\"10\">"
        << fmt3g(fx) << "</text>\n";
    const std::string label =
        style.log_y ? ("1e" + fmt3g(fy)) : fmt3g(fy);
    out << "<text x=\"" << fmt2(left - 6) << "\" y=\""
        << fmt2(top + plot_h - (fy - y_min) / (y_max - y_min) * plot_h + 3)
        << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"10\">"
        << label << "</text>\n";
  }
  out << "<text x=\"" << fmt2(left + plot_w / 2) << "\" y=\""
      << style.height - 8
      << "\" text-anchor=\"middle\" font-family=\"sans-serif\" "
         "font-size=\"11\">"
      << style.x_label << "</text>\n";
  out << "<text x=\"14\" y=\"" << fmt2(top + plot_h / 2)
      << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\" "
      << "transform=\"rotate(-90 14 " << fmt2(top + plot_h / 2) << ")\">"
      << style.y_label << "</text>\n";

  for (std::size_t s = 0; s < series.size(); ++s) {
    const char* color = kPalette[s % 6];
    out << "<polyline fill=\"none\" stroke=\"" << color
        << "\" stroke-width=\"1.5\" points=\"";
    for (std::size_t i = 0; i < series[s].xs.size(); ++i) {
      out << fmt2(sx(series[s].xs[i])) << ',' << fmt2(sy(series[s].ys[i]))
          << (i + 1 < series[s].xs.size() ? " " : "");
    }
    out << "\"/>\n";
    for (std::size_t i = 0; i < series[s].xs.size(); ++i) {
      out << "<circle cx=\"" << fmt2(sx(series[s].xs[i])) << "\" cy=\""
          << fmt2(sy(series[s].ys[i])) << "\" r=\"3\" fill=\"" << color
          << "\"/>\n";
    }
    const double ly = top + 14.0 * static_cast<double>(s);
    out << "<line x1=\"" << fmt2(left + plot_w + 10) << "\" y1=\"" << fmt2(ly)
        << "\" x2=\"" << fmt2(left + plot_w + 28) << "\" y2=\"" << fmt2(ly)
        << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n";
    std::string legend = series[s].name;
    if (style.log_y && floored) legend += " (floored at 1e-12)";
    out << "<text x=\"" << fmt2(left + plot_w + 32) << "\" y=\"" << fmt2(ly + 3)
        << "\" font-family=\"sans-serif\" font-size=\"10\">" << legend
        << "</text>\n";
  }
  out << "</svg>\n";
}

namespace {

void emit_svg_grid(const std::string& path, const std::string& title,
                   std::size_t height, std::size_t width,
                   const std::function<std::string(std::size_t)>& cell_color) {
  const int cell = 14;
  const int top = 28;
  const int w = static_cast<int>(width) * cell;
  const int h = static_cast<int>(height) * cell + top;
  std::ofstream out = open_out(path);
  out << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
      << "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\""
      << w << "\" height=\"" << h << "\" viewBox=\"0 0 " << w << " " << h
      << "\">\n";
  out << "<rect width=\"" << w << "\" height=\"" << h << "\" fill=\"white\"/>\n";
  out << "<text x=\"" << w / 2 << "\" y=\"18\" text-anchor=\"middle\" "
      << "font-family=\"sans-serif\" font-size=\"12\">" << title << "</text>\n";
  for (std::size_t y = 0; y < height; ++y) {
    for (std::size_t x = 0; x < width; ++x) {
      out << "<rect x=\"" << x * cell << "\" y=\"" << top + y * cell
          << "\" width=\"" << cell << "\" height=\"" << cell << "\" fill=\""
          << cell_color(y * width + x) << "\"/>\n";
    }
  }
  out << "</svg>\n";
}

}  // namespace

void emit_svg_heatmap(const std::vector<double>& map, std::size_t height,
                      std::size_t width, const std::string& path,
                      const std::string& title) {
  if (map.size() != height * width) {
    throw std::invalid_argument("svg heatmap: map size mismatch");
  }
  double vmax = 0.0;
  for (double v : map) vmax = std::max(vmax, v);
  if (vmax <= 0.0) vmax = 1.0;
  emit_svg_grid(path, title, height, width, [&](std::size_t i) {
    const double t = std::min(1.0, std::max(0.0, map[i] / vmax));
    // white -> dark red ramp
    const int r = 255 - static_cast<int>(75.0 * t);
    const int g = 255 - static_cast<int>(225.0 * t);
    const int b = 255 - static_cast<int>(225.0 * t);
    char buf[16];
    std::snprintf(buf, sizeof buf, "#%02x%02x%02x", r, g, b);
    return std::string(buf);
  });
}

void emit_svg_class_map(const std::vector<int>& map, std::size_t height,
                        std::size_t width, const std::string& path,
                        const std::string& title) {
  if (map.size() != height * width) {
    throw std::invalid_argument("svg class map: map size mismatch");
  }
  emit_svg_grid(path, title, height, width, [&](std::size_t i) {
    return std::string(kPalette[static_cast<std::size_t>(map[i]) % 6]);
  });
}

}  // namespace uqal
