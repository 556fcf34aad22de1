#pragma once

#include <string>
#include <vector>

#include "clusvpr/numerics.hpp"

namespace clusvpr {

struct OptLadConfig {
  std::size_t channels = 64;    // C of the incoming map
  std::size_t expansion = 2;    // lambda
  std::size_t groups = 8;       // G
  std::size_t clusters = 64;    // K
  double gem_p = 3.0;           // initial p_g
  double gem_eps = 1e-6;        // rectification floor before the GeM power
  double sharpness = 10.0;      // a in w = 2 a c, b = -a |c|^2
  bool normalize_input = true;  // L2-normalise each pixel descriptor before expansion

  std::size_t expanded() const { return channels * expansion; }
  std::size_t group_dim() const { return expanded() / groups; }
  std::size_t descriptor_dim() const { return group_dim() * clusters; }
  void validate() const;
};

/// Grouped soft-assignment VLAD with GeM-sigmoid group weights.
class OptLad {
 public:
  struct Cache {
    std::size_t height = 0, width = 0;
    Tensor raw_pixels;    // D x C as received
    std::vector<double> pixel_norm;
    Tensor pixels;        // D x C after optional L2
    Tensor expanded;      // D x lambda C
    Tensor alpha;         // G x D x K
    Tensor gem_mass;      // G x D   (1/D') sum_j r^p
    Tensor gem;           // G x D
    std::vector<double> beta, beta_logit;
    Tensor group_vlad;    // G x D' x K
    Tensor vlad;          // D' x K
    std::vector<double> column_norm;
    Tensor intra;         // D' x K after intra-normalisation
    double global_norm = 0.0;
    std::vector<double> output;
  };

  OptLad() = default;
  OptLad(const OptLadConfig& config, Rng& rng);

  const OptLadConfig& config() const { return config_; }

  /// (Optional per-pixel L2, then) 1x1 channel expansion: C x H x W -> D x lambda C.
  Tensor expand(const Tensor& fmap) const;
  /// Intra-normalised, L2-normalised lambda C K / G descriptor.
  std::vector<double> forward(const Tensor& fmap, Cache* cache = nullptr) const;
  /// Accumulates parameter grads, returns dL/d(fmap).
  Tensor backward(const Cache& cache, std::span<const double> grad_out);

  /// Per-group k-means on expanded descriptors (rows of `samples`, D x lambda C),
  /// then NetVLAD-style assignment init w = 2 a c, b = -a |c|^2.
  void init_centers(const Tensor& samples, Rng& rng, std::size_t iterations = 20);

  /// Keeps every GeM exponent >= 1 after an optimiser step.
  void clamp_exponents();

  ParamList params();
  Param& expansion_kernel() { return expand_; }
  Param& centers() { return centers_; }
  Param& assign_weights() { return assign_w_; }
  Param& assign_biases() { return assign_b_; }
  Param& gem_exponents() { return gem_p_; }
  const Param& expansion_kernel() const { return expand_; }
  const Param& centers() const { return centers_; }
  const Param& assign_weights() const { return assign_w_; }
  const Param& assign_biases() const { return assign_b_; }
  const Param& gem_exponents() const { return gem_p_; }

 private:
  OptLadConfig config_;
  Param expand_;    // C x lambda C
  Param centers_;   // G x K x D'
  Param assign_w_;  // G x K x D'
  Param assign_b_;  // G x K
  Param gem_p_;     // G
};

/// alpha_k = softmax_k(w_gk . x + b_gk) for one low-dimensional descriptor of group g.
std::vector<double> soft_assign(std::span<const double> descriptor, std::size_t group, const OptLad& model);

/// beta_g = sigmoid(mean_i GeM_p(max(x_i, eps))). `descriptors` is D x D'.
double group_weight(const Tensor& descriptors, double p, double eps = 1e-6);

/// Group residual sums merged with group weights: D' x K. `descriptors` is D x lambda C.
/// When `beta_override` is non-empty its values replace the GeM group weights.
Tensor vlad_aggregate(const Tensor& descriptors, const OptLad& model, std::span<const double> beta_override = {});

/// Column-wise L2 (zero columns stay zero), flatten cluster-major, global L2.
std::vector<double> normalize_descriptor(const Tensor& vlad);

struct PcaParams {
  std::vector<double> mean;   // d
  Tensor projection;          // N' x d, whitened
  std::vector<double> eigenvalues;
  std::size_t output_dim() const { return projection.rank() ? projection.dim(0) : 0; }
  std::size_t input_dim() const { return mean.size(); }
};

struct PcaFitResult {
  PcaParams params;
  std::vector<std::string> warnings;
};

/// Fits mean + whitened top-N' principal axes. Eigenvalues are floored at `floor`.
PcaFitResult pca_fit(const std::vector<std::vector<double>>& samples, std::size_t output_dim,
                     double floor = 1e-8);
/// Centre and project (whitened, not re-normalised).
std::vector<double> pca_project(std::span<const double> v, const PcaParams& pca);
/// Projection followed by L2 normalisation: the stored global descriptor.
std::vector<double> pca_apply(std::span<const double> v, const PcaParams& pca);

struct ParamCountReport {
  std::size_t channels = 0, expansion = 0, groups = 0, clusters = 0, netvlad_clusters = 0, output_dim = 0;
  std::size_t optlad_dim = 0;             // lambda C K / G
  std::size_t netvlad_dim = 0;            // C K_netvlad
  std::size_t netvlad_same_k_dim = 0;     // C K
  std::size_t optlad_pca = 0, optlad_pca_with_mean = 0;
  std::size_t netvlad_pca = 0, netvlad_pca_with_mean = 0;
  std::size_t netvlad_same_k_pca = 0, netvlad_same_k_pca_with_mean = 0;
  std::size_t optlad_layer = 0;           // expansion + centers + assignment + exponents
  std::size_t netvlad_layer = 0;          // centers + assignment at K_netvlad
  double pca_ratio = 0.0;                 // netvlad_same_k_pca / optlad_pca (= G / lambda)
};

ParamCountReport param_count_report(std::size_t channels, std::size_t expansion, std::size_t groups,
                                    std::size_t clusters, std::size_t netvlad_clusters, std::size_t output_dim);

}  // namespace clusvpr
