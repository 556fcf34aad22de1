#pragma once

#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include "clusvpr/numerics.hpp"

namespace testutil {

inline clusvpr::Tensor random_tensor(std::vector<std::size_t> shape, clusvpr::Rng& rng, double scale = 1.0) {
  clusvpr::Tensor t(std::move(shape));
  for (auto& v : t.data) v = scale * rng.normal();
  return t;
}

inline std::vector<double> random_unit(std::size_t n, clusvpr::Rng& rng) {
  std::vector<double> v(n);
  double s = 0.0;
  for (auto& x : v) {
    x = rng.normal();
    s += x * x;
  }
  s = std::sqrt(s);
  for (auto& x : v) x /= s;
  return v;
}

inline double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

inline std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("clusvpr_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

// Gradient of sum(grad_out * f(x)) w.r.t. a tensor, by central differences.
template <class F>
std::vector<double> numeric_grad(clusvpr::Tensor& x, const clusvpr::Tensor& grad_out, F&& f, double h = 1e-5) {
  std::vector<double> g(x.numel());
  auto loss = [&] {
    const clusvpr::Tensor y = f();
    double s = 0.0;
    for (std::size_t i = 0; i < y.numel(); ++i) s += y.data[i] * grad_out.data[i];
    return s;
  };
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const double orig = x.data[i];
    x.data[i] = orig + h;
    const double fp = loss();
    x.data[i] = orig - h;
    const double fm = loss();
    x.data[i] = orig;
    g[i] = (fp - fm) / (2 * h);
  }
  return g;
}

}  // namespace testutil
