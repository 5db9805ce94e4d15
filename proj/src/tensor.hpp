#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <string>
#include <vector>

#include "errors.hpp"

namespace mvb {

// Dense row-major tensor of doubles. The whole pipeline runs in double so the
// finite-difference gradient suites hold at tight tolerances.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<int> shape) : shape_(std::move(shape)) {
    data_.assign(static_cast<size_t>(numel(shape_)), 0.0);
  }
  Tensor(std::initializer_list<int> shape) : Tensor(std::vector<int>(shape)) {}

  static Tensor full(std::vector<int> shape, double v) {
    Tensor t(std::move(shape));
    t.fill(v);
    return t;
  }

  static int64_t numel(const std::vector<int>& shape) {
    int64_t n = 1;
    for (int d : shape) n *= d;
    return n;
  }

  const std::vector<int>& shape() const { return shape_; }
  int dim(int i) const { return shape_[static_cast<size_t>(i)]; }
  int ndim() const { return static_cast<int>(shape_.size()); }
  int64_t size() const { return static_cast<int64_t>(data_.size()); }
  bool empty() const { return data_.empty(); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }

  double& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
  double operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

  // [C,H,W] accessor; the dominant layout in this codebase.
  double& at(int c, int y, int x) {
    return data_[(static_cast<size_t>(c) * shape_[1] + y) * shape_[2] + x];
  }
  double at(int c, int y, int x) const {
    return data_[(static_cast<size_t>(c) * shape_[1] + y) * shape_[2] + x];
  }
  double& at(int y, int x) { return data_[static_cast<size_t>(y) * shape_[1] + x]; }
  double at(int y, int x) const { return data_[static_cast<size_t>(y) * shape_[1] + x]; }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }
  void zero() { fill(0.0); }

  void add_(const Tensor& o, double scale = 1.0) {
    check_internal(same_shape(o), "Tensor::add_: shape mismatch");
    for (int64_t i = 0; i < size(); ++i) data_[i] += scale * o[i];
  }
  void scale_(double s) {
    for (double& v : data_) v *= s;
  }
  void clamp_(double lo, double hi) {
    for (double& v : data_) v = v < lo ? lo : (v > hi ? hi : v);
  }

  double sum() const {
    double s = 0.0;
    for (double v : data_) s += v;
    return s;
  }
  double mean() const { return empty() ? 0.0 : sum() / static_cast<double>(size()); }

  bool all_finite() const {
    for (double v : data_) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }

  std::string shape_str() const {
    std::string s = "[";
    for (size_t i = 0; i < shape_.size(); ++i) {
      if (i) s += ",";
      s += std::to_string(shape_[i]);
    }
    return s + "]";
  }

 private:
  std::vector<int> shape_;
  std::vector<double> data_;
};

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0.0;
  for (int64_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

// FNV-1a over the raw bytes; used for determinism checks and config hashing.
inline uint64_t fnv1a(const void* ptr, size_t bytes, uint64_t h = 0xcbf29ce484222325ULL) {
  const unsigned char* p = static_cast<const unsigned char*>(ptr);
  for (size_t i = 0; i < bytes; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline uint64_t tensor_checksum(const Tensor& t) {
  return fnv1a(t.data(), static_cast<size_t>(t.size()) * sizeof(double));
}

}  // namespace mvb
