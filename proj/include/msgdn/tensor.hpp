#pragma once

#include <cstdint>
#include <vector>

#include "msgdn/rng.hpp"

namespace msgdn {

// Dense NCHW tensor of doubles. The carrier for images, feature maps,
// weights and gradients throughout the toolkit.
struct Tensor4 {
  int n = 0, c = 0, h = 0, w = 0;
  std::vector<double> data;

  Tensor4() = default;
  Tensor4(int n_, int c_, int h_, int w_)
      : n(n_), c(c_), h(h_), w(w_), data(static_cast<std::size_t>(n_) * c_ * h_ * w_, 0.0) {}

  static Tensor4 zeros(int n, int c, int h, int w) { return Tensor4(n, c, h, w); }
  static Tensor4 full(int n, int c, int h, int w, double v) {
    Tensor4 t(n, c, h, w);
    std::fill(t.data.begin(), t.data.end(), v);
    return t;
  }
  static Tensor4 randn(int n, int c, int h, int w, Rng& rng, double stddev = 1.0) {
    Tensor4 t(n, c, h, w);
    for (auto& v : t.data) v = rng.normal() * stddev;
    return t;
  }
  static Tensor4 uniform(int n, int c, int h, int w, Rng& rng) {
    Tensor4 t(n, c, h, w);
    for (auto& v : t.data) v = rng.uniform();
    return t;
  }
  static Tensor4 scalar(double v) { return full(1, 1, 1, 1, v); }

  std::size_t size() const { return data.size(); }
  bool empty() const { return data.empty(); }
  bool same_shape(const Tensor4& o) const { return n == o.n && c == o.c && h == o.h && w == o.w; }

  double& at(int ni, int ci, int yi, int xi) {
    return data[((static_cast<std::size_t>(ni) * c + ci) * h + yi) * w + xi];
  }
  double at(int ni, int ci, int yi, int xi) const {
    return data[((static_cast<std::size_t>(ni) * c + ci) * h + yi) * w + xi];
  }
  double* plane(int ni, int ci) { return data.data() + (static_cast<std::size_t>(ni) * c + ci) * h * w; }
  const double* plane(int ni, int ci) const {
    return data.data() + (static_cast<std::size_t>(ni) * c + ci) * h * w;
  }

  bool all_finite() const;
  double min_value() const;
  double max_value() const;
  double abs_max() const;
};

bool operator==(const Tensor4& a, const Tensor4& b);

}  // namespace msgdn
