#include "uqal/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <stdexcept>

namespace uqal {

namespace {

double clamp01(double v) { return v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v); }

}  // namespace

void Dataset::validate() const {
  if (inputs.empty()) throw std::invalid_argument("dataset: empty");
  if (inputs.size() != labels.size()) {
    throw std::invalid_argument("dataset: input/label count mismatch");
  }
  for (const Tensor& t : inputs) {
    if (t.shape != input_shape) {
      throw std::invalid_argument("dataset: sample shape mismatch");
    }
    for (double v : t.values) {
      if (!(v >= 0.0 && v <= 1.0)) {
        throw std::invalid_argument("dataset: input value outside [0,1]");
      }
    }
  }
  for (int y : labels) {
    if (y != -1 && (y < 0 || y >= static_cast<int>(num_classes))) {
      throw std::invalid_argument("dataset: label out of range");
    }
  }
}

std::vector<std::vector<double>> simplex_vertices(std::size_t num_classes,
                                                  std::size_t dim,
                                                  double circumradius) {
  if (num_classes < 2) throw std::invalid_argument("simplex: need >= 2 classes");
  if (dim + 1 < num_classes) {
    throw std::invalid_argument("simplex: dimension too small for class count");
  }
  if (!(circumradius > 0.0)) {
    throw std::invalid_argument("simplex: circumradius must be positive");
  }
  const std::size_t L = num_classes;
  // Start from scaled unit vectors in R^L (centroid distance
  // scale*sqrt((L-1)/L)), recenter, then express in an orthonormal basis of
  // their span.
  const double scale =
      circumradius * std::sqrt(static_cast<double>(L) / (L - 1.0));
  std::vector<std::vector<double>> ambient(L, std::vector<double>(L, 0.0));
  for (std::size_t c = 0; c < L; ++c) ambient[c][c] = scale;
  for (std::size_t k = 0; k < L; ++k) {
    double mean = 0.0;
    for (std::size_t c = 0; c < L; ++c) mean += ambient[c][k];
    mean /= static_cast<double>(L);
    for (std::size_t c = 0; c < L; ++c) ambient[c][k] -= mean;
  }
  // Gram-Schmidt on the differences to v0.
  std::vector<std::vector<double>> basis;
  for (std::size_t c = 1; c < L; ++c) {
    std::vector<double> u(L);
    for (std::size_t k = 0; k < L; ++k) u[k] = ambient[c][k] - ambient[0][k];
    for (const auto& b : basis) {
      double dot = 0.0;
      for (std::size_t k = 0; k < L; ++k) dot += u[k] * b[k];
      for (std::size_t k = 0; k < L; ++k) u[k] -= dot * b[k];
    }
    double norm = 0.0;
    for (double v : u) norm += v * v;
    norm = std::sqrt(norm);
    if (norm < 1e-12) continue;
    for (double& v : u) v /= norm;
    basis.push_back(std::move(u));
  }
  std::vector<std::vector<double>> vertices(L, std::vector<double>(dim, 0.0));
  for (std::size_t c = 0; c < L; ++c) {
    for (std::size_t b = 0; b < basis.size(); ++b) {
      double coord = 0.0;
      for (std::size_t k = 0; k < L; ++k) coord += ambient[c][k] * basis[b][k];
      vertices[c][b] = coord;
    }
  }
  return vertices;
}

namespace {

double blobs_map_radius(double separation, double noise) {
  // Room for the cluster layout, the noise tails, and the shifted OOD layout
  // sharing the same embedding.
  return 4.0 * separation + 9.0 * noise;
}

}  // namespace

Dataset gen_blobs(std::size_t num_classes, std::size_t per_class,
                  std::size_t dim, double separation, double noise,
                  std::uint64_t seed, std::string_view split) {
  if (num_classes < 2) throw std::invalid_argument("gen_blobs: need >= 2 classes");
  if (per_class == 0) throw std::invalid_argument("gen_blobs: empty classes");
  if (!(separation > 0.0)) {
    throw std::invalid_argument("gen_blobs: separation must be positive");
  }
  if (noise < 0.0) throw std::invalid_argument("gen_blobs: negative noise");

  const auto vertices = simplex_vertices(num_classes, dim, separation);
  const double radius = blobs_map_radius(separation, noise);

  RngStream rng = RngStream::derive(seed, "blobs", fnv1a64(split));
  Dataset out;
  out.input_shape = {dim};
  out.num_classes = num_classes;
  out.meta.kind = "blobs";
  out.meta.seed = seed;
  out.meta.split = std::string(split);
  out.meta.params = {{"num_classes", static_cast<double>(num_classes)},
                     {"dim", static_cast<double>(dim)},
                     {"separation", separation},
                     {"noise", noise},
                     {"map_radius", radius}};
  for (std::size_t c = 0; c < num_classes; ++c) {
    for (std::size_t i = 0; i < per_class; ++i) {
      Tensor x = Tensor::zeros({dim});
      for (std::size_t k = 0; k < dim; ++k) {
        const double raw = vertices[c][k] + noise * rng.normal();
        x.values[k] = clamp01((raw + radius) / (2.0 * radius));
      }
      out.inputs.push_back(std::move(x));
      out.labels.push_back(static_cast<int>(c));
    }
  }
  return out;
}

TrainTestSplit gen_blobs_split(std::size_t num_classes,
                               std::size_t train_per_class,
                               std::size_t test_per_class, std::size_t dim,
                               double separation, double noise,
                               std::uint64_t seed) {
  TrainTestSplit split;
  split.train = gen_blobs(num_classes, train_per_class, dim, separation, noise,
                          seed, "train");
  split.test = gen_blobs(num_classes, test_per_class, dim, separation, noise,
                         seed, "test");
  return split;
}

void moons_raw_coordinates(double u, double v, double& x, double& y) {
  x = 3.0 * u - 1.0;
  y = 1.5 * v - 0.5;
}

Dataset gen_moons(std::size_t n, double noise, std::uint64_t seed,
                  std::string_view split) {
  if (n == 0) throw std::invalid_argument("gen_moons: n must be positive");
  if (noise < 0.0) throw std::invalid_argument("gen_moons: negative noise");

  RngStream rng = RngStream::derive(seed, "moons", fnv1a64(split));
  Dataset out;
  out.input_shape = {2};
  out.num_classes = 2;
  out.meta.kind = "moons";
  out.meta.seed = seed;
  out.meta.split = std::string(split);
  out.meta.params = {{"noise", noise}};

  const std::size_t n0 = (n + 1) / 2;
  for (std::size_t i = 0; i < n; ++i) {
    const int label = i < n0 ? 0 : 1;
    const double t = rng.uniform(0.0, std::numbers::pi);
    double x, y;
    if (label == 0) {
      x = std::cos(t);
      y = std::sin(t);
    } else {
      x = 1.0 - std::cos(t);
      y = 0.5 - std::sin(t);
    }
    x += noise * rng.normal();
    y += noise * rng.normal();
    Tensor p = Tensor::zeros({2});
    p.values[0] = clamp01((x + 1.0) / 3.0);
    p.values[1] = clamp01((y + 0.5) / 1.5);
    out.inputs.push_back(std::move(p));
    out.labels.push_back(label);
  }
  return out;
}

OodMixture build_ood_mixture(const Dataset& iid_test, const OodParams& ood,
                             std::size_t n_iid, std::size_t n_ood,
                             std::uint64_t seed) {
  if (iid_test.meta.kind != "blobs") {
    throw std::invalid_argument("build_ood_mixture: needs a blobs test set");
  }
  if (n_iid > iid_test.size()) {
    throw std::invalid_argument("build_ood_mixture: not enough IID samples");
  }
  const auto& par = iid_test.meta.params;
  const std::size_t num_classes =
      static_cast<std::size_t>(par.at("num_classes"));
  const std::size_t dim = static_cast<std::size_t>(par.at("dim"));
  const double separation = par.at("separation");
  const double iid_noise = par.at("noise");
  const double radius = par.at("map_radius");

  const auto iid_centers = simplex_vertices(num_classes, dim, separation);
  const double ood_noise = ood.noise_factor * iid_noise;
  const std::size_t plane_dims = num_classes - 1;  // simplex span
  std::vector<std::vector<double>> ood_centers = iid_centers;
  if (dim > plane_dims) {
    // pull toward the contested centroid, lift along the spare coordinates
    const double lift = ood.off_plane_shift_factor * separation /
                        std::sqrt(static_cast<double>(dim - plane_dims));
    for (auto& c : ood_centers) {
      for (std::size_t k = 0; k < dim; ++k) {
        c[k] = k < plane_dims ? ood.center_pull * c[k] : c[k] + lift;
      }
    }
  } else {
    const double shift = ood.in_plane_shift_factor * separation /
                         std::sqrt(static_cast<double>(dim));
    for (auto& c : ood_centers) {
      for (double& v : c) v += shift;
    }
  }

  // disjointness guarantee: every OOD center is far from every IID center
  const double combined = iid_noise + ood_noise * std::max(1.0, ood.anisotropy);
  for (const auto& a : ood_centers) {
    for (const auto& b : iid_centers) {
      double d2 = 0.0;
      for (std::size_t k = 0; k < dim; ++k) d2 += (a[k] - b[k]) * (a[k] - b[k]);
      if (!(std::sqrt(d2) > 3.0 * combined)) {
        throw std::invalid_argument(
            "build_ood_mixture: OOD centers overlap the IID generator (need "
            "center distance > 3x combined noise)");
      }
    }
  }

  OodMixture mix;
  mix.n_iid = n_iid;
  mix.n_ood = n_ood;
  mix.samples.input_shape = iid_test.input_shape;
  mix.samples.num_classes = iid_test.num_classes;
  mix.samples.meta.kind = "mixture";
  mix.samples.meta.seed = seed;
  mix.samples.meta.params = {{"n_iid", static_cast<double>(n_iid)},
                             {"n_ood", static_cast<double>(n_ood)}};
  for (std::size_t i = 0; i < n_iid; ++i) {
    mix.samples.inputs.push_back(iid_test.inputs[i]);
    mix.samples.labels.push_back(iid_test.labels[i]);
    mix.is_ood.push_back(false);
  }
  RngStream rng = RngStream::derive(seed, "ood", 0);
  for (std::size_t i = 0; i < n_ood; ++i) {
    const std::size_t cluster = i % num_classes;
    Tensor x = Tensor::zeros({dim});
    for (std::size_t k = 0; k < dim; ++k) {
      const double axis_noise = k % 2 == 1 ? ood_noise * ood.anisotropy : ood_noise;
      const double raw = ood_centers[cluster][k] + axis_noise * rng.normal();
      x.values[k] = clamp01((raw + radius) / (2.0 * radius));
    }
    mix.samples.inputs.push_back(std::move(x));
    mix.samples.labels.push_back(-1);
    mix.is_ood.push_back(true);
  }
  return mix;
}

SegDataset gen_seg_shapes(std::size_t n, std::size_t height, std::size_t width,
                          std::uint64_t seed, const SegShapesOptions& options) {
  if (height < 16 || width < 16) {
    throw std::invalid_argument("gen_seg_shapes: images must be at least 16x16");
  }
  if (options.max_shapes < options.min_shapes) {
    throw std::invalid_argument("gen_seg_shapes: bad shape-count range");
  }

  SegDataset out;
  out.height = height;
  out.width = width;
  out.num_classes = 3;
  out.meta.kind = "seg-shapes";
  out.meta.seed = seed;
  out.meta.params = {{"noise", options.noise}};

  RngStream rng = RngStream::derive(seed, "seg-shapes", 0);
  const std::size_t min_side = std::min(height, width);
  for (std::size_t img = 0; img < n; ++img) {
    std::vector<int> label(height * width, 0);
    const std::size_t span = options.max_shapes - options.min_shapes + 1;
    const std::size_t shapes = options.min_shapes + rng.next_below(span);
    for (std::size_t s = 0; s < shapes; ++s) {
      const bool circle = rng.next_below(2) == 0;
      if (circle) {
        const std::size_t r = 2 + rng.next_below(std::max<std::size_t>(min_side / 4 - 2, 1));
        const std::size_t cy = r + rng.next_below(height - 2 * r);
        const std::size_t cx = r + rng.next_below(width - 2 * r);
        for (std::size_t i = 0; i < height; ++i) {
          for (std::size_t j = 0; j < width; ++j) {
            const double dy = static_cast<double>(i) - static_cast<double>(cy);
            const double dx = static_cast<double>(j) - static_cast<double>(cx);
            if (dy * dy + dx * dx <= static_cast<double>(r * r)) {
              label[i * width + j] = 1;
            }
          }
        }
      } else {
        const std::size_t hh = 2 + rng.next_below(std::max<std::size_t>(min_side / 5 - 1, 1));
        const std::size_t hw = 2 + rng.next_below(std::max<std::size_t>(min_side / 5 - 1, 1));
        const std::size_t cy = hh + rng.next_below(height - 2 * hh);
        const std::size_t cx = hw + rng.next_below(width - 2 * hw);
        for (std::size_t i = cy - hh; i <= cy + hh; ++i) {
          for (std::size_t j = cx - hw; j <= cx + hw; ++j) {
            label[i * width + j] = 2;
          }
        }
      }
    }
    // the background must stay modal
    std::size_t bg = 0;
    for (int v : label) bg += v == 0 ? 1 : 0;
    if (bg * 2 <= height * width) {
      throw std::runtime_error("gen_seg_shapes: background lost majority");
    }

    Tensor image = Tensor::zeros({1, height, width});
    for (std::size_t p = 0; p < height * width; ++p) {
      const double base = label[p] == 0   ? options.background_level
                          : label[p] == 1 ? options.circle_level
                                          : options.rectangle_level;
      image.values[p] = clamp01(base + options.noise * rng.normal());
    }
    out.images.push_back(std::move(image));
    out.labels.push_back(std::move(label));
  }
  return out;
}

namespace {

std::uint32_t read_be32(std::istream& in, const std::string& path) {
  unsigned char buf[4];
  in.read(reinterpret_cast<char*>(buf), 4);
  if (!in) throw std::runtime_error("idx: truncated header in " + path);
  return (static_cast<std::uint32_t>(buf[0]) << 24) |
         (static_cast<std::uint32_t>(buf[1]) << 16) |
         (static_cast<std::uint32_t>(buf[2]) << 8) |
         static_cast<std::uint32_t>(buf[3]);
}

}  // namespace

Dataset load_idx(const std::string& images_path, const std::string& labels_path) {
  std::ifstream img(images_path, std::ios::binary);
  if (!img) throw std::runtime_error("idx: cannot open " + images_path);
  const std::uint32_t img_magic = read_be32(img, images_path);
  if (img_magic != 0x00000803u) {
    throw std::runtime_error("idx: bad image magic 0x" +
                             [&] {
                               char buf[16];
                               std::snprintf(buf, sizeof buf, "%08x", img_magic);
                               return std::string(buf);
                             }() +
                             " in " + images_path);
  }
  const std::uint32_t n = read_be32(img, images_path);
  const std::uint32_t rows = read_be32(img, images_path);
  const std::uint32_t cols = read_be32(img, images_path);

  std::ifstream lab(labels_path, std::ios::binary);
  if (!lab) throw std::runtime_error("idx: cannot open " + labels_path);
  const std::uint32_t lab_magic = read_be32(lab, labels_path);
  if (lab_magic != 0x00000801u) {
    throw std::runtime_error("idx: bad label magic 0x" +
                             [&] {
                               char buf[16];
                               std::snprintf(buf, sizeof buf, "%08x", lab_magic);
                               return std::string(buf);
                             }() +
                             " in " + labels_path);
  }
  const std::uint32_t n_labels = read_be32(lab, labels_path);
  if (n != n_labels) {
    throw std::runtime_error("idx: image/label count mismatch (" +
                             std::to_string(n) + " vs " +
                             std::to_string(n_labels) + ")");
  }

  Dataset out;
  out.input_shape = {1, rows, cols};
  out.meta.kind = "idx";
  int max_label = 0;
  std::vector<unsigned char> pixel_buf(static_cast<std::size_t>(rows) * cols);
  for (std::uint32_t i = 0; i < n; ++i) {
    img.read(reinterpret_cast<char*>(pixel_buf.data()),
             static_cast<std::streamsize>(pixel_buf.size()));
    if (!img) throw std::runtime_error("idx: truncated image payload in " + images_path);
    Tensor t = Tensor::zeros({1, rows, cols});
    for (std::size_t p = 0; p < pixel_buf.size(); ++p) {
      t.values[p] = static_cast<double>(pixel_buf[p]) / 255.0;
    }
    char y = 0;
    lab.read(&y, 1);
    if (!lab) throw std::runtime_error("idx: truncated label payload in " + labels_path);
    out.inputs.push_back(std::move(t));
    out.labels.push_back(static_cast<unsigned char>(y));
    max_label = std::max(max_label, static_cast<int>(static_cast<unsigned char>(y)));
  }
  out.num_classes = static_cast<std::size_t>(max_label) + 1;
  return out;
}

}  // namespace uqal
