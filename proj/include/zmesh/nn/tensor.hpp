#pragma once

#include <algorithm>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace zmesh::nn {

/// Dense row-major tensor. Feature maps are 4D (C, Z, Y, X) with X fastest;
/// convolution weights are 5D (Cout, Cin, KZ, KY, KX); losses are scalars
/// with shape {1}.
template <typename T>
class Tensor {
public:
  Tensor() = default;

  explicit Tensor(std::vector<std::int64_t> dims, T fill = T(0))
      : dims_(std::move(dims)) {
    std::int64_t n = 1;
    for (std::int64_t d : dims_) {
      if (d <= 0) throw std::invalid_argument("Tensor: non-positive dim");
      n *= d;
    }
    data_.assign(static_cast<std::size_t>(n), fill);
  }

  static Tensor scalar(T v) {
    Tensor t(std::vector<std::int64_t>{1});
    t.data_[0] = v;
    return t;
  }

  const std::vector<std::int64_t>& dims() const { return dims_; }
  std::int64_t dim(std::size_t i) const { return dims_.at(i); }
  std::size_t rank() const { return dims_.size(); }
  std::int64_t size() const { return static_cast<std::int64_t>(data_.size()); }
  bool empty() const { return data_.empty(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  T& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
  const T& operator[](std::int64_t i) const {
    return data_[static_cast<std::size_t>(i)];
  }

  // 4D feature-map accessors
  std::int64_t c() const { return dims_[0]; }
  std::int64_t z() const { return dims_[1]; }
  std::int64_t y() const { return dims_[2]; }
  std::int64_t x() const { return dims_[3]; }
  std::int64_t voxels() const { return dims_[1] * dims_[2] * dims_[3]; }

  T& at(std::int64_t c, std::int64_t z, std::int64_t y, std::int64_t x) {
    return data_[((c * dims_[1] + z) * dims_[2] + y) * dims_[3] + x];
  }
  const T& at(std::int64_t c, std::int64_t z, std::int64_t y,
              std::int64_t x) const {
    return data_[((c * dims_[1] + z) * dims_[2] + y) * dims_[3] + x];
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  bool same_shape(const Tensor& o) const { return dims_ == o.dims_; }

  std::string shape_str() const {
    std::string s = "(";
    for (std::size_t i = 0; i < dims_.size(); ++i) {
      if (i) s += ",";
      s += std::to_string(dims_[i]);
    }
    return s + ")";
  }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> t(dims_);
    for (std::int64_t i = 0; i < size(); ++i) {
      t[i] = static_cast<U>(data_[static_cast<std::size_t>(i)]);
    }
    return t;
  }

  bool operator==(const Tensor& o) const {
    return dims_ == o.dims_ && data_ == o.data_;
  }

private:
  std::vector<std::int64_t> dims_;
  std::vector<T> data_;
};

}  // namespace zmesh::nn
