#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "metaseld/common.hpp"

namespace metaseld::nn {

/// Dense row-major tensor of rank <= 4. Plain value type: copy copies data.
template <class S>
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<int64_t> shape) : shape_(std::move(shape)) {
    data_.assign(static_cast<size_t>(numel_of(shape_)), S(0));
  }
  Tensor(std::vector<int64_t> shape, std::vector<S> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (static_cast<int64_t>(data_.size()) != numel_of(shape_))
      fail_config("tensor: data length does not match shape");
  }

  static Tensor scalar(S v) {
    Tensor t({1});
    t.data_[0] = v;
    return t;
  }
  static Tensor full(std::vector<int64_t> shape, S v) {
    Tensor t(std::move(shape));
    std::fill(t.data_.begin(), t.data_.end(), v);
    return t;
  }

  const std::vector<int64_t>& shape() const { return shape_; }
  int64_t numel() const { return static_cast<int64_t>(data_.size()); }
  int64_t dim(size_t i) const { return shape_.at(i); }
  size_t rank() const { return shape_.size(); }

  S* data() { return data_.data(); }
  const S* data() const { return data_.data(); }
  S& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
  S operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

  S& at(int64_t i, int64_t j) { return data_[static_cast<size_t>(i * shape_[1] + j)]; }
  S at(int64_t i, int64_t j) const { return data_[static_cast<size_t>(i * shape_[1] + j)]; }
  S& at(int64_t i, int64_t j, int64_t k) {
    return data_[static_cast<size_t>((i * shape_[1] + j) * shape_[2] + k)];
  }
  S at(int64_t i, int64_t j, int64_t k) const {
    return data_[static_cast<size_t>((i * shape_[1] + j) * shape_[2] + k)];
  }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  bool all_finite() const {
    for (S v : data_)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  template <class T>
  Tensor<T> cast() const {
    Tensor<T> out(shape_);
    for (int64_t i = 0; i < numel(); ++i) out[i] = static_cast<T>(data_[i]);
    return out;
  }

  static int64_t numel_of(const std::vector<int64_t>& shape) {
    int64_t n = 1;
    for (int64_t d : shape) n *= d;
    return n;
  }

  static std::string shape_str(const std::vector<int64_t>& shape) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << "]";
    return os.str();
  }

 private:
  std::vector<int64_t> shape_;
  std::vector<S> data_;
};

}  // namespace metaseld::nn
