#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

namespace uqal {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_to_string(const Shape& shape);

/// Dense row-major array of 64-bit reals. A tensor that was produced by a
/// graph operation carries the id of its node (and the serial of the graph
/// that owns it); plain value tensors have node == -1.
struct Tensor {
  Shape shape;
  std::vector<double> values;
  int node = -1;
  std::uint64_t graph_serial = 0;

  Tensor() = default;
  Tensor(Shape shape_in, std::vector<double> values_in);

  static Tensor scalar(double value);
  static Tensor zeros(const Shape& shape);
  static Tensor full(const Shape& shape, double value);

  std::size_t numel() const { return values.size(); }
  bool is_scalar() const { return values.size() == 1; }

  /// Value of a scalar tensor.
  double item() const;

  bool all_finite() const;
  void require_finite(const std::string& what) const;

  /// Same values, no graph handle.
  Tensor detached() const;
};

bool same_shape(const Tensor& a, const Tensor& b);

int argmax_index(const std::vector<double>& values);

}  // namespace uqal
