#pragma once

#include <cstddef>
#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace clusvpr {

/// Dense row-major array of doubles. The shape product always equals data.size().
struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<double> data;

  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> dims, double fill = 0.0);
  Tensor(std::vector<std::size_t> dims, std::vector<double> values);

  std::size_t numel() const { return data.size(); }
  std::size_t rank() const { return shape.size(); }
  std::size_t dim(std::size_t i) const { return shape.at(i); }

  double& operator[](std::size_t i) { return data[i]; }
  double operator[](std::size_t i) const { return data[i]; }

  /// 2-D and 3-D accessors for the common matrix / feature-map cases.
  double& at(std::size_t i, std::size_t j) { return data[i * shape[1] + j]; }
  double at(std::size_t i, std::size_t j) const { return data[i * shape[1] + j]; }
  double& at(std::size_t c, std::size_t y, std::size_t x) {
    return data[(c * shape[1] + y) * shape[2] + x];
  }
  double at(std::size_t c, std::size_t y, std::size_t x) const {
    return data[(c * shape[1] + y) * shape[2] + x];
  }

  std::span<double> row(std::size_t i) {
    return {data.data() + i * shape[1], shape[1]};
  }
  std::span<const double> row(std::size_t i) const {
    return {data.data() + i * shape[1], shape[1]};
  }

  void fill(double v);
  bool all_finite() const;
  bool same_shape(const Tensor& o) const { return shape == o.shape; }
};

std::size_t shape_numel(const std::vector<std::size_t>& shape);
std::string shape_str(const std::vector<std::size_t>& shape);

/// Throws std::domain_error naming `what` if any element is NaN or infinite.
void require_finite(std::span<const double> v, const std::string& what);

/// Numerically stable softmax of v / temperature.
std::vector<double> softmax(std::span<const double> v, double temperature = 1.0);

/// Backward of y = softmax(x / temperature): returns dL/dx given y and dL/dy.
std::vector<double> softmax_backward(std::span<const double> y, std::span<const double> grad_y,
                                     double temperature = 1.0);

double dot(std::span<const double> a, std::span<const double> b);
double l2_norm(std::span<const double> v);

/// Central-difference gradient: (f(x + h e_i) - f(x - h e_i)) / 2h per coordinate.
Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, const Tensor& x,
                        double h = 1e-5);

struct GradCheckReport {
  std::string parameter;
  double max_relative_error = 0.0;
  bool pass = false;
};

/// max_i |a_i - n_i| / max(|a|_inf, |n|_inf, floor). Zero when both are identically zero.
double max_relative_error(std::span<const double> analytic, std::span<const double> numeric,
                          double floor = 1e-8);

/// Seeded generator shared by every stochastic choice of a run. Distribution
/// transforms are implemented here so streams match across standard libraries.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : state_(seed) {}

  std::uint64_t next_u64();
  double uniform();                              // [0, 1)
  double uniform(double lo, double hi);
  double normal();                               // standard normal, Box-Muller
  std::size_t uniform_index(std::size_t n);      // [0, n)

  /// k distinct indices from [0, n), uniformly, in draw order.
  std::vector<std::size_t> sample_without_replacement(std::size_t n, std::size_t k);

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = uniform_index(i);
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::uint64_t state_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

inline double sigmoid(double x) {
  if (x >= 0) {
    double e = std::exp(-x);
    return 1.0 / (1.0 + e);
  }
  double e = std::exp(x);
  return e / (1.0 + e);
}

double gelu(double x);
double gelu_grad(double x);

}  // namespace clusvpr

namespace clusvpr {

/// A learnable tensor and its accumulated gradient.
struct Param {
  std::string name;
  Tensor value;
  Tensor grad;

  Param() = default;
  Param(std::string n, std::vector<std::size_t> shape)
      : name(std::move(n)), value(shape), grad(std::move(shape)) {}

  void zero_grad() { grad.fill(0.0); }
};

using ParamList = std::vector<Param*>;

}  // namespace clusvpr
