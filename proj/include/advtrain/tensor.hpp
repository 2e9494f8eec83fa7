#pragma once

#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace advtrain {

// Dense row-major float tensor. Images are NCHW, matrices (rows, cols).
struct Tensor {
  std::vector<int64_t> shape;
  std::vector<float> data;

  Tensor() = default;
  explicit Tensor(std::vector<int64_t> s) : shape(std::move(s)) {
    data.assign(static_cast<size_t>(numel_of(shape)), 0.0f);
  }

  static int64_t numel_of(const std::vector<int64_t>& s) {
    int64_t n = 1;
    for (int64_t d : s) n *= d;
    return n;
  }

  int64_t numel() const { return static_cast<int64_t>(data.size()); }
  int64_t dim(size_t i) const { return shape.at(i); }
  size_t rank() const { return shape.size(); }

  float* ptr() { return data.data(); }
  const float* ptr() const { return data.data(); }

  float& operator[](int64_t i) { return data[static_cast<size_t>(i)]; }
  float operator[](int64_t i) const { return data[static_cast<size_t>(i)]; }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  void fill(float v) { std::fill(data.begin(), data.end(), v); }
  void zero() { fill(0.0f); }

  bool all_finite() const;

  std::string shape_str() const;
};

Tensor operator+(const Tensor& a, const Tensor& b);
Tensor operator-(const Tensor& a, const Tensor& b);

// ||a||_2 over all entries.
float l2_norm(const Tensor& a);
// max_i |a_i - b_i|; shapes must match.
float linf_dist(const Tensor& a, const Tensor& b);

}  // namespace advtrain
