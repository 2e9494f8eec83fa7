#include "advtrain/tensor.hpp"

#include <cmath>
#include <sstream>

namespace advtrain {

bool Tensor::all_finite() const {
  for (float v : data)
    if (!std::isfinite(v)) return false;
  return true;
}

std::string Tensor::shape_str() const {
  std::ostringstream os;
  os << "(";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ",";
    os << shape[i];
  }
  os << ")";
  return os.str();
}

static void check_same(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b))
    throw std::invalid_argument("tensor shape mismatch: " + a.shape_str() + " vs " + b.shape_str());
}

Tensor operator+(const Tensor& a, const Tensor& b) {
  check_same(a, b);
  Tensor out(a.shape);
  for (size_t i = 0; i < a.data.size(); ++i) out.data[i] = a.data[i] + b.data[i];
  return out;
}

Tensor operator-(const Tensor& a, const Tensor& b) {
  check_same(a, b);
  Tensor out(a.shape);
  for (size_t i = 0; i < a.data.size(); ++i) out.data[i] = a.data[i] - b.data[i];
  return out;
}

float l2_norm(const Tensor& a) {
  double s = 0.0;
  for (float v : a.data) s += static_cast<double>(v) * v;
  return static_cast<float>(std::sqrt(s));
}

float linf_dist(const Tensor& a, const Tensor& b) {
  check_same(a, b);
  float m = 0.0f;
  for (size_t i = 0; i < a.data.size(); ++i) m = std::max(m, std::fabs(a.data[i] - b.data[i]));
  return m;
}

}  // namespace advtrain
