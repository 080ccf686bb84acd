#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <string>

#include "msgdn/autograd.hpp"
#include "msgdn/rng.hpp"
#include "msgdn/tensor.hpp"

namespace msgdn::testing {

// Scratch directory under the build tree, wiped per test case.
inline std::string temp_dir(const std::string& name) {
  const auto dir = std::filesystem::path("msgdn_test_tmp") / name;
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir.string();
}

inline std::uint64_t fnv1a_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::uint64_t h = 0xcbf29ce484222325ull;
  char c;
  while (in.get(c)) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ull;
  }
  return h;
}

inline std::string read_text(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

// Central finite differences of scalar_fn against the analytic gradient of
// the probed coordinates. scalar_fn must rebuild its graph from the current
// leaf values on every call.
struct GradCheck {
  double max_rel_err = 0.0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

inline GradCheck grad_check(autograd::Var& leaf, const std::function<autograd::Var()>& scalar_fn,
                            const std::vector<std::size_t>& coords, double h = 1e-6,
                            double floor = 1e-8) {
  leaf.clear_grad();  // grads accumulate across backward calls
  autograd::Var loss = scalar_fn();
  autograd::backward(loss);
  Tensor4 analytic = leaf.grad().empty()
                         ? Tensor4::zeros(leaf.value().n, leaf.value().c, leaf.value().h, leaf.value().w)
                         : leaf.grad();
  leaf.clear_grad();

  GradCheck out;
  for (std::size_t idx : coords) {
    const double original = leaf.mutable_value().data[idx];
    const double step = h * std::max(1.0, std::abs(original));
    leaf.mutable_value().data[idx] = original + step;
    const double f_plus = scalar_fn().value().data[0];
    leaf.mutable_value().data[idx] = original - step;
    const double f_minus = scalar_fn().value().data[0];
    leaf.mutable_value().data[idx] = original;

    const double numeric = (f_plus - f_minus) / (2.0 * step);
    const double a = analytic.data[idx];
    const double denom = std::max({std::abs(a), std::abs(numeric), floor});
    const double rel = std::abs(a - numeric) / denom;
    if (rel > out.max_rel_err) {
      out.max_rel_err = rel;
      out.worst_analytic = a;
      out.worst_numeric = numeric;
    }
  }
  return out;
}

inline std::vector<std::size_t> sample_coords(std::size_t size, std::size_t count, Rng& rng) {
  std::vector<std::size_t> coords;
  for (std::size_t i = 0; i < count; ++i) coords.push_back(rng.below(size));
  return coords;
}

}  // namespace msgdn::testing
