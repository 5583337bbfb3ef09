#pragma once

// Dense row-major tensors, rank <= 3. The scalar type is a template parameter:
// training runs in float, oracle and finite-difference paths instantiate double.

#include <algorithm>
#include <cstddef>
#include <numeric>
#include <string>
#include <vector>

#include "common.hpp"

namespace dlmwpo {

template <typename T>
struct Tensor {
  std::vector<int> shape;
  std::vector<T> data;

  Tensor() = default;
  explicit Tensor(std::vector<int> s) : shape(std::move(s)), data(count(shape), T(0)) {}
  Tensor(std::vector<int> s, T fill) : shape(std::move(s)), data(count(shape), fill) {}

  static std::size_t count(const std::vector<int>& s) {
    std::size_t n = 1;
    for (int d : s) {
      if (d < 0) throw std::invalid_argument("tensor: negative dimension");
      n *= static_cast<std::size_t>(d);
    }
    return n;
  }

  std::size_t size() const { return data.size(); }
  int rank() const { return static_cast<int>(shape.size()); }
  int dim(int i) const { return shape[static_cast<std::size_t>(i)]; }

  T* ptr() { return data.data(); }
  const T* ptr() const { return data.data(); }

  T& operator[](std::size_t i) { return data[i]; }
  const T& operator[](std::size_t i) const { return data[i]; }

  T& at(int i, int j) { return data[static_cast<std::size_t>(i) * dim(1) + j]; }
  const T& at(int i, int j) const { return data[static_cast<std::size_t>(i) * dim(1) + j]; }
  T& at(int i, int j, int k) {
    return data[(static_cast<std::size_t>(i) * dim(1) + j) * dim(2) + k];
  }
  const T& at(int i, int j, int k) const {
    return data[(static_cast<std::size_t>(i) * dim(1) + j) * dim(2) + k];
  }

  void fill(T v) { std::fill(data.begin(), data.end(), v); }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out;
    out.shape = shape;
    out.data.resize(data.size());
    for (std::size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<U>(data[i]);
    return out;
  }

  std::string shape_str() const {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
      if (i) s += ",";
      s += std::to_string(shape[i]);
    }
    return s + "]";
  }
};

template <typename T>
inline bool all_finite(const Tensor<T>& t) {
  for (const T& v : t.data)
    if (!is_finite(v)) return false;
  return true;
}

// log-softmax over a contiguous row of length n, written to out (may alias in).
template <typename T>
inline void log_softmax_row(const T* in, T* out, int n) {
  T m = in[0];
  for (int i = 1; i < n; ++i) m = in[i] > m ? in[i] : m;
  T s = T(0);
  for (int i = 0; i < n; ++i) s += std::exp(in[i] - m);
  T lse = m + std::log(s);
  for (int i = 0; i < n; ++i) out[i] = in[i] - lse;
}

template <typename T>
inline void softmax_row(const T* in, T* out, int n) {
  T m = in[0];
  for (int i = 1; i < n; ++i) m = in[i] > m ? in[i] : m;
  T s = T(0);
  for (int i = 0; i < n; ++i) {
    out[i] = std::exp(in[i] - m);
    s += out[i];
  }
  T inv = T(1) / s;
  for (int i = 0; i < n; ++i) out[i] *= inv;
}

}  // namespace dlmwpo
