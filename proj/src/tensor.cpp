#include "msgdn/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace msgdn {

bool Tensor4::all_finite() const {
  for (double v : data) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

double Tensor4::min_value() const {
  double m = std::numeric_limits<double>::infinity();
  for (double v : data) m = std::min(m, v);
  return m;
}

double Tensor4::max_value() const {
  double m = -std::numeric_limits<double>::infinity();
  for (double v : data) m = std::max(m, v);
  return m;
}

double Tensor4::abs_max() const {
  double m = 0.0;
  for (double v : data) m = std::max(m, std::abs(v));
  return m;
}

bool operator==(const Tensor4& a, const Tensor4& b) {
  return a.same_shape(b) && a.data == b.data;
}

}  // namespace msgdn
