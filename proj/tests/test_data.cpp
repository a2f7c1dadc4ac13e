#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>

#include "uqal/data.hpp"
#include "uqal/models.hpp"

using namespace uqal;

TEST_CASE("blobs are deterministic, bounded, and collapse at zero noise") {
  const Dataset a = gen_blobs(3, 20, 2, 2.5, 0.5, 42);
  const Dataset b = gen_blobs(3, 20, 2, 2.5, 0.5, 42);
  CHECK(a.size() == 60);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a.inputs[i].values == b.inputs[i].values);
    for (double v : a.inputs[i].values) {
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
    }
  }
  a.validate();

  const Dataset collapsed = gen_blobs(3, 5, 2, 2.5, 0.0, 7);
  for (std::size_t c = 0; c < 3; ++c) {
    const Tensor& first = collapsed.inputs[c * 5];
    for (std::size_t i = 1; i < 5; ++i) {
      CHECK(collapsed.inputs[c * 5 + i].values == first.values);
    }
  }

  // the two splits draw from different streams
  const TrainTestSplit split = gen_blobs_split(3, 10, 10, 2, 2.5, 0.5, 1);
  CHECK(split.train.inputs[0].values != split.test.inputs[0].values);
}

TEST_CASE("separation of five sigma admits a near-perfect linear rule") {
  // nearest-true-centroid is a linear classifier for isotropic clusters
  const double noise = 0.5;
  const Dataset d = gen_blobs(3, 100, 2, 5.0 * noise, noise, 42);
  const auto vertices = simplex_vertices(3, 2, 5.0 * noise);
  const double radius = d.meta.params.at("map_radius");
  std::size_t correct = 0;
  for (std::size_t i = 0; i < d.size(); ++i) {
    int best = -1;
    double best_d2 = 0.0;
    for (std::size_t c = 0; c < 3; ++c) {
      double d2 = 0.0;
      for (std::size_t k = 0; k < 2; ++k) {
        const double center = (vertices[c][k] + radius) / (2.0 * radius);
        const double diff = d.inputs[i].values[k] - center;
        d2 += diff * diff;
      }
      if (best < 0 || d2 < best_d2) {
        best = static_cast<int>(c);
        best_d2 = d2;
      }
    }
    if (best == d.labels[i]) ++correct;
  }
  CHECK(static_cast<double>(correct) / static_cast<double>(d.size()) >= 0.99);
}

TEST_CASE("moons lie on the arcs at zero noise and balance labels") {
  const Dataset d = gen_moons(101, 0.0, 3);
  std::size_t count0 = 0;
  for (std::size_t i = 0; i < d.size(); ++i) {
    double x, y;
    moons_raw_coordinates(d.inputs[i].values[0], d.inputs[i].values[1], x, y);
    const double residual =
        d.labels[i] == 0 ? std::abs(x * x + y * y - 1.0)
                         : std::abs((x - 1.0) * (x - 1.0) +
                                    (y - 0.5) * (y - 0.5) - 1.0);
    CHECK(residual < 1e-9);
    count0 += d.labels[i] == 0 ? 1 : 0;
  }
  CHECK(count0 == 51);
  CHECK(d.size() - count0 == 50);
}

TEST_CASE("noisy moons are learnable by a small MLP") {
  const Dataset train_set = gen_moons(300, 0.1, 11, "train");
  const Dataset test_set = gen_moons(200, 0.1, 11, "test");
  const NetworkSpec spec =
      NetworkSpec::mlp_classifier(2, {32, 32}, 2, DropoutMode::kNone, 0.0);
  TrainConfig cfg;
  cfg.epochs = 60;
  cfg.learning_rate = 0.1;
  cfg.seed = 4;
  const TrainResult result = train(spec, train_set, cfg);
  CHECK(classification_accuracy(spec, result.params, test_set) >= 0.95);
}

TEST_CASE("ood mixture composition") {
  const Dataset iid = gen_blobs(3, 40, 2, 2.5, 0.5, 6, "test");
  const OodMixture mix = build_ood_mixture(iid, OodParams{}, 30, 45, 8);
  CHECK(mix.n_iid == 30);
  CHECK(mix.n_ood == 45);
  CHECK(mix.samples.size() == 75);
  for (std::size_t i = 0; i < mix.samples.size(); ++i) {
    CHECK(mix.is_ood[i] == (i >= 30));
    if (mix.is_ood[i]) {
      CHECK(mix.samples.labels[i] == -1);
    } else {
      CHECK(mix.samples.labels[i] >= 0);
    }
  }

  // zero OOD count degenerates to a pure IID set
  const OodMixture pure = build_ood_mixture(iid, OodParams{}, 10, 0, 8);
  CHECK(pure.n_ood == 0);
  CHECK(pure.samples.size() == 10);

  CHECK_THROWS_AS(build_ood_mixture(iid, OodParams{}, 1000, 0, 8),
                  std::invalid_argument);

  // overlapping generators are rejected (2-D blobs hit the in-plane branch)
  OodParams overlapping;
  overlapping.in_plane_shift_factor = 0.05;
  overlapping.noise_factor = 1.0;
  CHECK_THROWS_AS(build_ood_mixture(iid, overlapping, 10, 10, 8),
                  std::invalid_argument);
}

TEST_CASE("seg shapes ground truth") {
  SegShapesOptions empty;
  empty.min_shapes = 0;
  empty.max_shapes = 0;
  const SegDataset none = gen_seg_shapes(3, 16, 16, 1, empty);
  for (const auto& label : none.labels) {
    for (int v : label) CHECK(v == 0);
  }

  const SegDataset d = gen_seg_shapes(12, 16, 16, 2);
  for (std::size_t i = 0; i < d.size(); ++i) {
    std::size_t counts[3] = {0, 0, 0};
    for (int v : d.labels[i]) ++counts[v];
    CHECK(counts[0] > counts[1]);
    CHECK(counts[0] > counts[2]);
    for (double v : d.images[i].values) {
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
    }
  }
}

TEST_CASE("idx loader") {
  // 2-image 3x2 fixture laid out by hand: header bytes then pixels
  const char* img_path = "uqal_test_images.idx";
  const char* lab_path = "uqal_test_labels.idx";
  {
    std::ofstream img(img_path, std::ios::binary);
    const unsigned char header[] = {0, 0, 8, 3, 0, 0, 0, 2,
                                    0, 0, 0, 3, 0, 0, 0, 2};
    img.write(reinterpret_cast<const char*>(header), sizeof header);
    const unsigned char pixels[] = {0,   51,  102, 153, 204, 255,
                                    255, 204, 153, 102, 51,  0};
    img.write(reinterpret_cast<const char*>(pixels), sizeof pixels);
  }
  {
    std::ofstream lab(lab_path, std::ios::binary);
    const unsigned char header[] = {0, 0, 8, 1, 0, 0, 0, 2};
    lab.write(reinterpret_cast<const char*>(header), sizeof header);
    const unsigned char labels[] = {1, 0};
    lab.write(reinterpret_cast<const char*>(labels), sizeof labels);
  }

  const Dataset d = load_idx(img_path, lab_path);
  CHECK(d.size() == 2);
  CHECK(d.input_shape == Shape{1, 3, 2});
  CHECK(d.labels[0] == 1);
  CHECK(d.labels[1] == 0);
  CHECK(d.inputs[0].values[1] == doctest::Approx(51.0 / 255.0));
  CHECK(d.inputs[1].values[0] == doctest::Approx(1.0));

  // bad magic is reported with the offending value
  {
    std::ofstream img(img_path, std::ios::binary | std::ios::trunc);
    const unsigned char header[] = {0, 0, 9, 9, 0, 0, 0, 1,
                                    0, 0, 0, 1, 0, 0, 0, 1};
    img.write(reinterpret_cast<const char*>(header), sizeof header);
    const unsigned char px = 7;
    img.write(reinterpret_cast<const char*>(&px), 1);
  }
  try {
    load_idx(img_path, lab_path);
    CHECK(false);
  } catch (const std::runtime_error& e) {
    CHECK(std::string(e.what()).find("00000909") != std::string::npos);
  }

  // count mismatch
  {
    std::ofstream img(img_path, std::ios::binary | std::ios::trunc);
    const unsigned char header[] = {0, 0, 8, 3, 0, 0, 0, 1,
                                    0, 0, 0, 1, 0, 0, 0, 1};
    img.write(reinterpret_cast<const char*>(header), sizeof header);
    const unsigned char px = 7;
    img.write(reinterpret_cast<const char*>(&px), 1);
  }
  CHECK_THROWS_AS(load_idx(img_path, lab_path), std::runtime_error);

  std::remove(img_path);
  std::remove(lab_path);
}
