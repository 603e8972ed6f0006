#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace handssl {

// Dense NCHW tensor of doubles. Small by design: this project's networks are
// desk-scale and double precision keeps the numeric test oracles tight.
struct Tensor {
  int n = 0, c = 0, h = 0, w = 0;
  std::vector<double> v;

  Tensor() = default;
  Tensor(int n_, int c_, int h_, int w_)
      : n(n_), c(c_), h(h_), w(w_), v(size_t(n_) * c_ * h_ * w_, 0.0) {
    if (n_ < 0 || c_ < 0 || h_ < 0 || w_ < 0)
      throw std::invalid_argument("Tensor: negative dimension");
  }

  size_t size() const { return v.size(); }

  double& at(int i, int ch, int y, int x) {
    return v[((size_t(i) * c + ch) * h + y) * w + x];
  }
  double at(int i, int ch, int y, int x) const {
    return v[((size_t(i) * c + ch) * h + y) * w + x];
  }

  double* plane(int i, int ch) { return v.data() + (size_t(i) * c + ch) * h * w; }
  const double* plane(int i, int ch) const {
    return v.data() + (size_t(i) * c + ch) * h * w;
  }

  bool same_shape(const Tensor& o) const {
    return n == o.n && c == o.c && h == o.h && w == o.w;
  }

  std::string shape_str() const {
    return "[" + std::to_string(n) + "," + std::to_string(c) + "," +
           std::to_string(h) + "," + std::to_string(w) + "]";
  }

  void fill(double x) { std::fill(v.begin(), v.end(), x); }
};

inline void add_into(Tensor& dst, const Tensor& src) {
  if (!dst.same_shape(src))
    throw std::invalid_argument("add_into: shape mismatch " + dst.shape_str() +
                                " vs " + src.shape_str());
  for (size_t i = 0; i < dst.v.size(); ++i) dst.v[i] += src.v[i];
}

}  // namespace handssl
