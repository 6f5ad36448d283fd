// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <string>
#include <vector>

#include "occflow/common.h"

namespace occflow {

// Dense row-major tensor of doubles. Shapes follow the NCHW / NCTHW layout
// convention throughout the project.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<int> shape) : shape_(std::move(shape)) {
    v_.assign(static_cast<size_t>(count(shape_)), real(0));
  }
  Tensor(std::vector<int> shape, std::vector<real> data)
      : shape_(std::move(shape)), v_(std::move(data)) {
    OCCFLOW_CHECK(static_cast<int64_t>(v_.size()) == count(shape_), ShapeError,
                  "tensor data size " << v_.size() << " does not match shape");
  }

  static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }
  static Tensor full(std::vector<int> shape, real value) {
    Tensor t(std::move(shape));
    std::fill(t.v_.begin(), t.v_.end(), value);
    return t;
  }
  static Tensor scalar(real value) { return Tensor({1}, {value}); }

  int ndim() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_.at(static_cast<size_t>(i)); }
  const std::vector<int>& shape() const { return shape_; }
  int64_t numel() const { return static_cast<int64_t>(v_.size()); }
  bool empty() const { return v_.empty(); }

  real* data() { return v_.data(); }
  const real* data() const { return v_.data(); }
  real& operator[](int64_t i) { return v_[static_cast<size_t>(i)]; }
  real operator[](int64_t i) const { return v_[static_cast<size_t>(i)]; }

  // Multi-index access, mostly for tests and small kernels.
  real& at(std::initializer_list<int> idx) { return v_[static_cast<size_t>(offset(idx))]; }
  real at(std::initializer_list<int> idx) const { return v_[static_cast<size_t>(offset(idx))]; }

  int64_t offset(std::initializer_list<int> idx) const {
    OCCFLOW_CHECK(static_cast<int>(idx.size()) == ndim(), ShapeError,
                  "index rank " << idx.size() << " vs tensor rank " << ndim());
    int64_t off = 0;
    int d = 0;
    for (int i : idx) {
      off = off * shape_[static_cast<size_t>(d)] + i;
      ++d;
    }
    return off;
  }

  Tensor reshaped(std::vector<int> shape) const {
    OCCFLOW_CHECK(count(shape) == numel(), ShapeError,
                  "reshape " << shape_str(shape_) << " -> " << shape_str(shape));
    return Tensor(std::move(shape), v_);
  }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  bool all_finite() const {
    for (real x : v_) {
      if (!std::isfinite(x)) return false;
    }
    return true;
  }

  static int64_t count(const std::vector<int>& shape) {
    int64_t n = 1;
    for (int d : shape) {
      OCCFLOW_CHECK(d >= 0, ShapeError, "negative dimension " << d);
      n *= d;
    }
    return n;
  }

  static std::string shape_str(const std::vector<int>& shape) {
    std::string s = "[";
    for (size_t i = 0; i < shape.size(); ++i) {
      if (i) s += ",";
      s += std::to_string(shape[i]);
    }
    return s + "]";
  }
  std::string shape_str() const { return shape_str(shape_); }

 private:
  std::vector<int> shape_;
  std::vector<real> v_;
};

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  OCCFLOW_CHECK(a.same_shape(b), ShapeError,
                what << ": shape mismatch " << a.shape_str() << " vs " << b.shape_str());
}

}  // namespace occflow
