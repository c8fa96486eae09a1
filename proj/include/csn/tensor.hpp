#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "csn/error.hpp"

namespace csn {

using Shape = std::vector<std::int64_t>;

inline std::int64_t shape_size(const Shape& shape) {
  std::int64_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

// Dense row-major N-dimensional array. Rank 0 (empty shape) is a scalar of
// size 1. Extents must be positive.
template <typename T>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape) : shape_(std::move(shape)) {
    validate_shape();
    data_.assign(static_cast<std::size_t>(shape_size(shape_)), T{});
  }

  Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    validate_shape();
    if (static_cast<std::int64_t>(data_.size()) != shape_size(shape_)) {
      throw DimensionError("tensor: data length " + std::to_string(data_.size()) +
                           " does not match shape " + shape_str(shape_));
    }
  }

  static Tensor scalar(T v) { return Tensor(Shape{}, std::vector<T>{v}); }

  static Tensor full(Shape shape, T v) {
    Tensor t(std::move(shape));
    for (auto& x : t.data_) x = v;
    return t;
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::int64_t dim(std::size_t axis) const { return shape_[axis]; }
  std::int64_t size() const { return static_cast<std::int64_t>(data_.size()); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::vector<T>& values() { return data_; }
  const std::vector<T>& values() const { return data_; }

  T& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
  T operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }

  T& at(std::initializer_list<std::int64_t> idx) { return data_[static_cast<std::size_t>(offset(idx))]; }
  T at(std::initializer_list<std::int64_t> idx) const { return data_[static_cast<std::size_t>(offset(idx))]; }

  T item() const {
    if (data_.size() != 1) {
      throw ContractError("item() requires a single-element tensor, got shape " + shape_str(shape_));
    }
    return data_[0];
  }

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

  bool all_finite() const {
    for (const T& v : data_) {
      if (!std::isfinite(static_cast<double>(v))) return false;
    }
    return true;
  }

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.size());
    for (std::size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<U>(data_[i]);
    return Tensor<U>(shape_, std::move(out));
  }

 private:
  void validate_shape() const {
    for (auto d : shape_) {
      if (d <= 0) {
        throw DimensionError("tensor: extents must be positive, got shape " + shape_str(shape_));
      }
    }
  }

  std::int64_t offset(std::initializer_list<std::int64_t> idx) const {
    if (idx.size() != shape_.size()) {
      throw IndexError("tensor: " + std::to_string(idx.size()) + " indices for rank " +
                       std::to_string(shape_.size()));
    }
    std::int64_t flat = 0;
    std::size_t axis = 0;
    for (auto i : idx) {
      if (i < 0 || i >= shape_[axis]) {
        throw IndexError("tensor: index " + std::to_string(i) + " out of range for extent " +
                         std::to_string(shape_[axis]));
      }
      flat = flat * shape_[axis] + i;
      ++axis;
    }
    return flat;
  }

  Shape shape_;
  std::vector<T> data_;
};

}  // namespace csn
