#include "uqal/tensor.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

namespace uqal {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string shape_to_string(const Shape& shape) {
  std::ostringstream out;
  out << "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i > 0) out << "x";
    out << shape[i];
  }
  out << "]";
  return out.str();
}

Tensor::Tensor(Shape shape_in, std::vector<double> values_in)
    : shape(std::move(shape_in)), values(std::move(values_in)) {
  if (shape_numel(shape) != values.size()) {
    throw std::invalid_argument("tensor: shape " + shape_to_string(shape) +
                                " does not match " +
                                std::to_string(values.size()) + " values");
  }
  for (std::size_t d : shape) {
    if (d == 0) throw std::invalid_argument("tensor: zero extent in shape");
  }
}

Tensor Tensor::scalar(double value) { return Tensor({1}, {value}); }

Tensor Tensor::zeros(const Shape& shape) {
  return Tensor(shape, std::vector<double>(shape_numel(shape), 0.0));
}

Tensor Tensor::full(const Shape& shape, double value) {
  return Tensor(shape, std::vector<double>(shape_numel(shape), value));
}

double Tensor::item() const {
  if (!is_scalar()) {
    throw std::invalid_argument("item: tensor " + shape_to_string(shape) +
                                " is not scalar");
  }
  return values[0];
}

bool Tensor::all_finite() const {
  for (double v : values) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

void Tensor::require_finite(const std::string& what) const {
  if (!all_finite()) {
    throw std::runtime_error(what + ": non-finite value encountered");
  }
}

Tensor Tensor::detached() const {
  Tensor t;
  t.shape = shape;
  t.values = values;
  return t;
}

bool same_shape(const Tensor& a, const Tensor& b) { return a.shape == b.shape; }

int argmax_index(const std::vector<double>& values) {
  int best = 0;
  for (std::size_t i = 1; i < values.size(); ++i) {
    if (values[i] > values[best]) best = static_cast<int>(i);
  }
  return best;
}

}  // namespace uqal
