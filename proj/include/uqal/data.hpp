#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "uqal/rng.hpp"
#include "uqal/tensor.hpp"

namespace uqal {

struct DatasetMeta {
  std::string kind;
  std::uint64_t seed = 0;
  std::string split;
  std::map<std::string, double> params;
};

/// Labelled samples with inputs in [0,1]. Label -1 marks a sample that has
/// no in-distribution label (out-of-distribution data).
struct Dataset {
  std::vector<Tensor> inputs;
  std::vector<int> labels;
  Shape input_shape;
  std::size_t num_classes = 0;
  DatasetMeta meta;

  std::size_t size() const { return inputs.size(); }
  void validate() const;
};

struct TrainTestSplit {
  Dataset train;
  Dataset test;
};

/// IID/OOD blend. Samples are ordered IID block first, then OOD block; OOD
/// samples carry label -1 and an origin flag.
struct OodMixture {
  Dataset samples;
  std::vector<bool> is_ood;
  std::size_t n_iid = 0;
  std::size_t n_ood = 0;
};

/// Out-of-distribution generator: the IID cluster layout pulled toward the
/// contested centroid region of the class plane and lifted along the unused
/// coordinates (falling back to an in-plane diagonal shift when every
/// coordinate carries class signal), with wider anisotropic noise.
/// Construction fails unless every OOD center is more than 3x the combined
/// noise away from every IID center.
struct OodParams {
  double center_pull = 0.25;         // fraction of the IID center kept in-plane
  double off_plane_shift_factor = 2.0;  // lift, in units of the IID separation
  double in_plane_shift_factor = 4.0;   // fallback diagonal shift (no spare dims)
  double noise_factor = 1.5;         // relative to the IID noise
  double anisotropy = 1.4;           // second-axis noise multiplier
};

/// Per-pixel labelled images, batch of {1,H,W} tensors in [0,1].
struct SegDataset {
  std::vector<Tensor> images;
  std::vector<std::vector<int>> labels;  // H*W ints, row-major
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t num_classes = 0;
  DatasetMeta meta;

  std::size_t size() const { return images.size(); }
};

struct SegShapesOptions {
  std::size_t min_shapes = 1;
  std::size_t max_shapes = 2;
  double noise = 0.06;
  double background_level = 0.45;
  double circle_level = 0.58;
  double rectangle_level = 0.72;
};

/// Isotropic Gaussian clusters at the vertices of a regular simplex, cluster
/// centers at distance `separation` from the layout centroid, mapped affinely
/// into [0,1]^dim.
Dataset gen_blobs(std::size_t num_classes, std::size_t per_class,
                  std::size_t dim, double separation, double noise,
                  std::uint64_t seed, std::string_view split = "train");

TrainTestSplit gen_blobs_split(std::size_t num_classes,
                               std::size_t train_per_class,
                               std::size_t test_per_class, std::size_t dim,
                               double separation, double noise,
                               std::uint64_t seed);

/// Two interleaved half circles in [0,1]^2 with Gaussian jitter.
Dataset gen_moons(std::size_t n, double noise, std::uint64_t seed,
                  std::string_view split = "train");

/// Inverse of the fixed moons embedding, for geometry checks.
void moons_raw_coordinates(double u, double v, double& x, double& y);

OodMixture build_ood_mixture(const Dataset& iid_test, const OodParams& ood,
                             std::size_t n_iid, std::size_t n_ood,
                             std::uint64_t seed);

/// Images of 0-2 noisy shapes on a flat background; class 0 = background,
/// 1 = filled circle, 2 = filled rectangle. Ground-truth masks are exact and
/// the background is always the modal class.
SegDataset gen_seg_shapes(std::size_t n, std::size_t height, std::size_t width,
                          std::uint64_t seed,
                          const SegShapesOptions& options = {});

/// IDX-format loader (images magic 0x803, labels magic 0x801, big-endian
/// extents, unsigned byte payload scaled to [0,1]).
Dataset load_idx(const std::string& images_path, const std::string& labels_path);

/// Regular simplex vertices at the given distance from their common centroid,
/// embedded in the first num_classes-1 coordinates of R^dim.
std::vector<std::vector<double>> simplex_vertices(std::size_t num_classes,
                                                  std::size_t dim,
                                                  double circumradius);

}  // namespace uqal
