#pragma once

// Dense N-dimensional tensor over a contiguous buffer. Double precision is
// the reference mode used everywhere in training and gradient checks; float
// instantiations are available as an opt-in speed mode.

#include <cstddef>
#include <numeric>
#include <string>
#include <vector>

#include "nupix/common.hpp"

namespace nupix {

inline std::string shape_str(const std::vector<int>& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ", ";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

template <class T = double>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<int> shape) : shape_(std::move(shape)) {
    data_.assign(checked_numel(shape_), T(0));
  }

  Tensor(std::vector<int> shape, std::vector<T> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != checked_numel(shape_))
      throw ShapeError("buffer length " + std::to_string(data_.size()) +
                       " does not match shape " + shape_str(shape_));
  }

  static Tensor scalar(T v) { return Tensor({1}, {v}); }

  const std::vector<int>& shape() const { return shape_; }
  std::size_t numel() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::vector<T>& data() { return data_; }
  const std::vector<T>& data() const { return data_; }
  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  int dim(std::size_t i) const { return shape_[i]; }
  std::size_t ndim() const { return shape_.size(); }

  // Row-major offset helpers for the common 2D/4D layouts.
  std::size_t idx2(int i, int j) const { return static_cast<std::size_t>(i) * shape_[1] + j; }
  std::size_t idx4(int n, int c, int h, int w) const {
    return ((static_cast<std::size_t>(n) * shape_[1] + c) * shape_[2] + h) * shape_[3] + w;
  }
  T& at2(int i, int j) { return data_[idx2(i, j)]; }
  const T& at2(int i, int j) const { return data_[idx2(i, j)]; }
  T& at4(int n, int c, int h, int w) { return data_[idx4(n, c, h, w)]; }
  const T& at4(int n, int c, int h, int w) const { return data_[idx4(n, c, h, w)]; }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

 private:
  static std::size_t checked_numel(const std::vector<int>& shape) {
    std::size_t n = 1;
    for (int d : shape) {
      if (d <= 0) throw ShapeError("nonpositive dimension in shape " + shape_str(shape));
      n *= static_cast<std::size_t>(d);
    }
    return n;
  }

  std::vector<int> shape_;
  std::vector<T> data_;
};

}  // namespace nupix
