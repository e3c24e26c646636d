#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "cadp/errors.hpp"

namespace cadp {

using Shape = std::vector<std::size_t>;

/// Number of elements described by a shape. The empty shape is a scalar.
std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

/// Dense row-major array of real scalars.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T{0});
  Tensor(Shape shape, std::vector<T> data);

  static Tensor scalar(T v) { return Tensor(Shape{1}, std::vector<T>{v}); }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<T> data() { return data_; }
  std::span<const T> data() const { return data_; }
  T* ptr() { return data_.data(); }
  const T* ptr() const { return data_.data(); }
  const std::vector<T>& vec() const { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  /// Element at (row, col) of a rank-2 tensor.
  T& at(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
  const T& at(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }

  void fill(T v);
  /// Changes the shape without touching the data. Element counts must agree.
  void reshape(Shape shape);
  /// Resizes to the given shape, zero-filled, reusing capacity.
  void assign_zeros(const Shape& shape);

  /// Copies rows [begin, end) along axis 0.
  Tensor slice_rows(std::size_t begin, std::size_t end) const;
  /// Gathers rows along axis 0.
  Tensor gather_rows(std::span<const std::size_t> rows) const;

  /// Shape of one row (the tensor's shape without axis 0).
  Shape row_shape() const { return Shape(shape_.begin() + 1, shape_.end()); }
  std::size_t row_size() const { return shape_.empty() ? 0 : data_.size() / shape_[0]; }

  bool all_finite() const;

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return Tensor<U>(shape_, std::move(out));
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape shape_;
  std::vector<T> data_;
};

extern template class Tensor<float>;
extern template class Tensor<double>;

}  // namespace cadp
