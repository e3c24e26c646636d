#include "cadp/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace cadp {

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

template <typename T>
Tensor<T>::Tensor(Shape shape, T fill) : shape_(std::move(shape)), data_(numel(shape_), fill) {}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
  if (numel(shape_) != data_.size()) {
    throw ShapeError("tensor: shape " + to_string(shape_) + " holds " + std::to_string(numel(shape_)) +
                     " elements but " + std::to_string(data_.size()) + " were given");
  }
}

template <typename T>
void Tensor<T>::fill(T v) {
  std::fill(data_.begin(), data_.end(), v);
}

template <typename T>
void Tensor<T>::reshape(Shape shape) {
  if (numel(shape) != data_.size()) {
    throw ShapeError("reshape: cannot view " + to_string(shape_) + " as " + to_string(shape));
  }
  shape_ = std::move(shape);
}

template <typename T>
void Tensor<T>::assign_zeros(const Shape& shape) {
  shape_ = shape;
  data_.assign(numel(shape), T{0});
}

template <typename T>
Tensor<T> Tensor<T>::slice_rows(std::size_t begin, std::size_t end) const {
  if (shape_.empty() || begin > end || end > shape_[0]) {
    throw ShapeError("slice_rows: [" + std::to_string(begin) + ", " + std::to_string(end) + ") out of " +
                     to_string(shape_));
  }
  const std::size_t row = row_size();
  Shape s = shape_;
  s[0] = end - begin;
  return Tensor(std::move(s), std::vector<T>(data_.begin() + begin * row, data_.begin() + end * row));
}

template <typename T>
Tensor<T> Tensor<T>::gather_rows(std::span<const std::size_t> rows) const {
  const std::size_t row = row_size();
  Shape s = shape_;
  s[0] = rows.size();
  std::vector<T> out(rows.size() * row);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= shape_[0]) throw ShapeError("gather_rows: index out of range");
    std::copy_n(data_.begin() + rows[i] * row, row, out.begin() + i * row);
  }
  return Tensor(std::move(s), std::move(out));
}

template <typename T>
bool Tensor<T>::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
}

template class Tensor<float>;
template class Tensor<double>;

}  // namespace cadp
