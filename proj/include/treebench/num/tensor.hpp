#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "treebench/errors.hpp"

namespace treebench::num {

// Dimensions of a dense tensor. Rank 0 (scalar), 1 (vector) and 2 (matrix)
// cover every primitive the models need.
class Shape {
 public:
  static constexpr std::size_t kMaxRank = 2;

  Shape() = default;
  Shape(std::initializer_list<std::size_t> dims) {
    if (dims.size() > kMaxRank) throw ContractError("Shape: rank > 2 unsupported");
    for (std::size_t d : dims) dims_[rank_++] = d;
  }

  static Shape scalar() { return {}; }
  static Shape vector(std::size_t n) { return {n}; }
  static Shape matrix(std::size_t r, std::size_t c) { return {r, c}; }

  std::size_t rank() const { return rank_; }
  std::size_t operator[](std::size_t i) const { return dims_.at(i); }
  std::size_t numel() const {
    std::size_t n = 1;
    for (std::size_t i = 0; i < rank_; ++i) n *= dims_[i];
    return n;
  }

  // Rows/cols view: vectors are a single row, scalars are 1x1.
  std::size_t rows() const { return rank_ == 2 ? dims_[0] : 1; }
  std::size_t cols() const { return rank_ == 0 ? 1 : dims_[rank_ - 1]; }

  bool operator==(const Shape& o) const {
    if (rank_ != o.rank_) return false;
    for (std::size_t i = 0; i < rank_; ++i)
      if (dims_[i] != o.dims_[i]) return false;
    return true;
  }

  std::string str() const {
    std::string s = "(";
    for (std::size_t i = 0; i < rank_; ++i) {
      if (i) s += ",";
      s += std::to_string(dims_[i]);
    }
    return s + ")";
  }

 private:
  std::array<std::size_t, kMaxRank> dims_{};
  std::size_t rank_ = 0;
};

// Dense row-major array of doubles. Plain value type: copies are deep.
class Tensor {
 public:
  Tensor() : data_(1, 0.0) {}
  explicit Tensor(Shape shape, double fill = 0.0)
      : shape_(shape), data_(shape.numel(), fill) {}
  Tensor(Shape shape, std::vector<double> data)
      : shape_(shape), data_(std::move(data)) {
    if (data_.size() != shape_.numel())
      throw ContractError("Tensor: data length " + std::to_string(data_.size()) +
                          " does not match shape " + shape_.str());
  }

  static Tensor scalar(double v) { return Tensor(Shape::scalar(), {v}); }
  static Tensor vector(std::initializer_list<double> v) {
    return Tensor(Shape::vector(v.size()), std::vector<double>(v));
  }
  static Tensor vector(std::vector<double> v) {
    const std::size_t n = v.size();
    return Tensor(Shape::vector(n), std::move(v));
  }
  static Tensor matrix(std::size_t rows, std::size_t cols,
                       std::vector<double> v) {
    return Tensor(Shape::matrix(rows, cols), std::move(v));
  }
  static Tensor zeros_like(const Tensor& t) { return Tensor(t.shape()); }

  const Shape& shape() const { return shape_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  double* raw() { return data_.data(); }
  const double* raw() const { return data_.data(); }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double& at(std::size_t r, std::size_t c) { return data_[r * shape_.cols() + c]; }
  double at(std::size_t r, std::size_t c) const {
    return data_[r * shape_.cols() + c];
  }
  double item() const {
    if (data_.size() != 1) throw ContractError("Tensor::item on non-scalar " + shape_.str());
    return data_[0];
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(),
                       [](double v) { return std::isfinite(v); });
  }

  Tensor& operator+=(const Tensor& o) {
    check_same(o, "+=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
  }
  Tensor& operator*=(double s) {
    for (double& v : data_) v *= s;
    return *this;
  }
  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

  bool operator==(const Tensor& o) const {
    return shape_ == o.shape_ && data_ == o.data_;
  }

  void check_same(const Tensor& o, const char* what) const {
    if (!(shape_ == o.shape_))
      throw ContractError(std::string(what) + ": shape mismatch " + shape_.str() +
                          " vs " + o.shape_.str());
  }

 private:
  Shape shape_;
  std::vector<double> data_;
};

inline double squared_norm(const Tensor& t) {
  double s = 0;
  for (double v : t.data()) s += v * v;
  return s;
}

}  // namespace treebench::num
