#include "davpt/tensor.hpp"

#include <cmath>
#include <sstream>

#include "davpt/error.hpp"

namespace davpt {

namespace {

std::size_t checked_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t e : shape) {
    if (e == 0) throw DimensionError("tensor extents must be positive, got " + shape_string(shape));
    n *= e;
  }
  return n;
}

}  // namespace

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)) {
  values_.assign(checked_numel(shape_), fill);
}

Tensor::Tensor(Shape shape, std::vector<double> values) : shape_(std::move(shape)), values_(std::move(values)) {
  if (checked_numel(shape_) != values_.size()) {
    throw DimensionError("shape " + shape_string(shape_) + " does not match " + std::to_string(values_.size()) +
                         " values");
  }
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::initializer_list<double> values) {
  return Tensor({rows, cols}, std::vector<double>(values));
}

std::size_t Tensor::rows() const noexcept {
  if (shape_.size() <= 1) return shape_.empty() ? 0 : 1;
  std::size_t r = 1;
  for (std::size_t i = 0; i + 1 < shape_.size(); ++i) r *= shape_[i];
  return r;
}

std::size_t Tensor::cols() const noexcept { return shape_.empty() ? 0 : shape_.back(); }

void Tensor::accumulate_grad(std::span<const double> g) {
  if (g.size() != values_.size()) {
    throw DimensionError("gradient of size " + std::to_string(g.size()) + " for tensor " + shape_string(shape_));
  }
  if (grad_.empty()) grad_.assign(values_.size(), 0.0);
  for (std::size_t i = 0; i < g.size(); ++i) grad_[i] += g[i];
}

bool Tensor::all_finite() const noexcept {
  for (double v : values_)
    if (!std::isfinite(v)) return false;
  return true;
}

}  // namespace davpt
