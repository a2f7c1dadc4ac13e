#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "test_helpers.hpp"
#include "uqal/eval.hpp"

using namespace uqal;
using uqal_test::dropout_mlp;
using uqal_test::plain_mlp;

namespace {

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  return std::string((std::istreambuf_iterator<char>(in)),
                     std::istreambuf_iterator<char>());
}

std::size_t count_occurrences(const std::string& text, const std::string& what) {
  std::size_t count = 0, pos = 0;
  while ((pos = text.find(what, pos)) != std::string::npos) {
    ++count;
    pos += what.size();
  }
  return count;
}

struct TempFile {
  std::string path;
  explicit TempFile(const std::string& name) : path("uqal_eval_" + name) {}
  ~TempFile() { std::remove(path.c_str()); }
};

Dataset small_test_set(std::size_t n) {
  const auto& dm = dropout_mlp();
  Dataset subset;
  subset.input_shape = dm.test_set.input_shape;
  subset.num_classes = dm.test_set.num_classes;
  subset.meta = dm.test_set.meta;
  for (std::size_t i = 0; i < n; ++i) {
    subset.inputs.push_back(dm.test_set.inputs[i]);
    subset.labels.push_back(dm.test_set.labels[i]);
  }
  return subset;
}

}  // namespace

TEST_CASE("uq context pairing validation") {
  const auto& pm = plain_mlp();
  const DuqHead head = duq_fit(pm.spec, pm.params, pm.train_set);
  const UqContext duq_ctx = UqContext::duq(head);
  CHECK_THROWS_WITH_AS(duq_ctx.validate_pairing(ObjectiveKind::kMva),
                       doctest::Contains("MC sampling"), std::invalid_argument);
  CHECK_NOTHROW(duq_ctx.validate_pairing(ObjectiveKind::kDuqTarget));

  const auto& dm = dropout_mlp();
  const UqContext mc_ctx = UqContext::mc_dropout(dm.spec, dm.params, true);
  CHECK_NOTHROW(mc_ctx.validate_pairing(ObjectiveKind::kMva));
  CHECK_THROWS_AS(mc_ctx.validate_pairing(ObjectiveKind::kDuqTarget),
                  std::invalid_argument);
  CHECK_THROWS_AS(mc_ctx.validate_pairing(ObjectiveKind::kUst),
                  std::invalid_argument);
}

TEST_CASE("security eval clean row is a direct clean evaluation") {
  const auto& dm = dropout_mlp();
  const UqContext uq = UqContext::mc_dropout(dm.spec, dm.params, true, 25);
  const Dataset subset = small_test_set(6);

  SecurityEvalConfig cfg;
  cfg.eps_grid = {0.0, 2.0 / 255.0};
  cfg.objective.kind = ObjectiveKind::kStab;
  cfg.objective.mc_samples = 5;
  cfg.attack.steps = 5;
  cfg.seed = 11;
  const SecurityCurve curve = run_security_eval(uq, subset, cfg);
  REQUIRE(curve.rows.size() == 2);

  // replay the clean cells with the same stream derivation
  double var = 0.0, ent = 0.0, acc = 0.0;
  for (std::size_t i = 0; i < subset.size(); ++i) {
    RngStream rng = RngStream::derive(cfg.seed, "security-eval", i * 2 + 0);
    const Measurement m = uq.measure(subset.inputs[i], rng);
    var += m.variance;
    ent += m.entropy;
    acc += m.predicted == subset.labels[i] ? 1.0 : 0.0;
  }
  const double n = static_cast<double>(subset.size());
  CHECK(curve.rows[0].variance_mean == var / n);
  CHECK(curve.rows[0].entropy_mean == ent / n);
  CHECK(curve.rows[0].accuracy == acc / n);

  // attacked row satisfies the constraint trivially via pgd, and the curve
  // stays deterministic across reruns and worker counts
  SecurityEvalConfig parallel_cfg = cfg;
  parallel_cfg.workers = 4;
  const SecurityCurve again = run_security_eval(uq, subset, parallel_cfg);
  for (std::size_t e = 0; e < 2; ++e) {
    CHECK(again.rows[e].variance_mean == curve.rows[e].variance_mean);
    CHECK(again.rows[e].entropy_mean == curve.rows[e].entropy_mean);
    CHECK(again.rows[e].accuracy == curve.rows[e].accuracy);
  }
}

TEST_CASE("rejection curve combinatorial oracle") {
  // 2 IID correct + 3 OOD, perfectly ordered uncertainties
  const std::vector<double> uncertainty = {0.1, 0.2, 0.9, 0.8, 0.7};
  const std::vector<bool> correct = {true, true, false, false, false};
  const std::vector<double> grid = {0.0, 0.2, 0.4, 0.6, 0.8};
  const RejectionCurve curve =
      build_rejection_curve(uncertainty, correct, grid, 0.0, "variance");
  REQUIRE(curve.rows.size() == 5);
  // r = n_ood / n = 0.6 retains exactly the IID subset
  CHECK(curve.rows[0].accuracy == doctest::Approx(0.4));
  CHECK(curve.rows[3].rejection_rate == doctest::Approx(0.6));
  CHECK(curve.rows[3].accuracy == doctest::Approx(1.0));

  // equal uncertainties: flat curve at overall accuracy (ties by index)
  const std::vector<double> flat_u(5, 0.5);
  const RejectionCurve flat =
      build_rejection_curve(flat_u, {true, true, false, false, false},
                            {0.0, 0.2, 0.4}, 0.0, "variance");
  CHECK(flat.rows[0].accuracy == doctest::Approx(0.4));
  CHECK(flat.rows[1].accuracy == doctest::Approx(0.5));  // 2 correct of 4
  // r -> 1 rows are omitted once nothing is retained
  const RejectionCurve tail = build_rejection_curve(
      {0.3}, {true}, {0.0, 0.9}, 0.0, "variance");
  CHECK(tail.rows.size() == 1);

  // accuracy at r=0 is the overall accuracy by definition
  CHECK(flat.rows[0].rejection_rate == 0.0);
}

TEST_CASE("curve area") {
  RejectionCurve curve;
  curve.rows = {{0.0, 0.4}, {0.5, 0.6}, {1.0, 1.0}};
  CHECK(curve_area(curve) == doctest::Approx(0.5 * 0.5 + 0.5 * 0.8));
}

TEST_CASE("security csv round trip and determinism") {
  const auto& dm = dropout_mlp();
  const UqContext uq = UqContext::mc_dropout(dm.spec, dm.params, true, 10);
  const Dataset subset = small_test_set(4);

  SecurityEvalConfig cfg;
  cfg.eps_grid = {0.0, 4.0 / 255.0};
  cfg.objective.kind = ObjectiveKind::kMva;
  cfg.objective.mc_samples = 5;
  cfg.attack.steps = 4;
  cfg.seed = 3;
  const SecurityCurve curve = run_security_eval(uq, subset, cfg);

  TempFile a("security_a.csv"), b("security_b.csv"), c("security_c.csv");
  emit_csv(curve, a.path);
  const std::string text = slurp(a.path);
  CHECK(text.rfind("epsilon,accuracy,entropy_mean,variance_mean,objective,criterion\n",
                   0) == 0);
  CHECK(text.find("\r") == std::string::npos);
  CHECK(count_occurrences(text, "mva") == curve.rows.size());

  // seeded rerun emits byte-identical output
  const SecurityCurve rerun = run_security_eval(uq, subset, cfg);
  emit_csv(rerun, b.path);
  CHECK(slurp(b.path) == text);

  // parse -> emit reproduces the file byte for byte
  const SecurityCurve parsed = parse_security_csv(a.path);
  emit_csv(parsed, c.path);
  CHECK(slurp(c.path) == text);
  REQUIRE(parsed.rows.size() == curve.rows.size());
  for (std::size_t i = 0; i < parsed.rows.size(); ++i) {
    CHECK(parsed.rows[i].variance_mean ==
          doctest::Approx(curve.rows[i].variance_mean).epsilon(1e-11));
    CHECK(parsed.rows[i].accuracy ==
          doctest::Approx(curve.rows[i].accuracy).epsilon(1e-11));
  }
}

TEST_CASE("rejection csv round trip") {
  RejectionCurve curve;
  curve.epsilon = 8.0 / 255.0;
  curve.measure = "variance";
  curve.rows = {{0.0, 0.4}, {0.05, 0.42105263157894735}, {0.1, 0.444}};
  TempFile f("rejection.csv");
  emit_csv(curve, f.path);
  const std::string text = slurp(f.path);
  CHECK(text.rfind("rejection_rate,accuracy,epsilon,measure\n", 0) == 0);
  const RejectionCurve parsed = parse_rejection_csv(f.path);
  REQUIRE(parsed.rows.size() == 3);
  CHECK(parsed.measure == "variance");
  CHECK(parsed.rows[1].accuracy == doctest::Approx(curve.rows[1].accuracy).epsilon(1e-11));
}

TEST_CASE("svg plots") {
  TempFile single("single.svg"), nine("nine.svg"), logscale("log.svg");

  SvgStyle style;
  style.title = "single point";
  emit_svg_plot({{"only", {0.0}, {0.5}}}, single.path, style);
  const std::string single_text = slurp(single.path);
  CHECK(single_text.find("<svg xmlns") != std::string::npos);
  CHECK(single_text.find("version=\"1.1\"") != std::string::npos);
  CHECK(count_occurrences(single_text, "<circle") == 1);

  // 9-point curve renders 9 markers per series
  std::vector<double> xs, ys;
  for (int i = 0; i <= 8; ++i) {
    xs.push_back(i / 255.0);
    ys.push_back(0.1 * i + 0.05);
  }
  emit_svg_plot({{"accuracy", xs, ys}, {"variance", xs, ys}}, nine.path, style);
  const std::string nine_text = slurp(nine.path);
  CHECK(count_occurrences(nine_text, "<circle") == 18);
  CHECK(count_occurrences(nine_text, "<polyline") == 2);

  // log scale floors zero values and flags the legend
  SvgStyle log_style;
  log_style.log_y = true;
  emit_svg_plot({{"variance", {0.0, 1.0}, {0.0, 1e-4}}}, logscale.path, log_style);
  const std::string log_text = slurp(logscale.path);
  CHECK(log_text.find("floored at 1e-12") != std::string::npos);
}

TEST_CASE("svg maps") {
  TempFile heat("heat.svg"), classes("classes.svg");
  emit_svg_heatmap({0.0, 0.5, 1.0, 0.25}, 2, 2, heat.path, "variance");
  const std::string heat_text = slurp(heat.path);
  CHECK(count_occurrences(heat_text, "<rect") == 5);  // backdrop + 4 cells

  emit_svg_class_map({0, 1, 2, 0}, 2, 2, classes.path, "prediction");
  CHECK(count_occurrences(slurp(classes.path), "<rect") == 5);
}

TEST_CASE("edge mask") {
  // 3x3 map with a single off-class centre pixel
  const std::vector<int> map = {0, 0, 0, 0, 1, 0, 0, 0, 0};
  const std::vector<bool> mask = edge_mask(map, 3, 3);
  CHECK(mask[4]);          // the centre differs from its neighbours
  CHECK(mask[1]);          // orthogonal neighbours of the centre
  CHECK_FALSE(mask[0]);    // corners only touch same-class pixels
}
