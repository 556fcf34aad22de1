#pragma once

#include <vector>

#include "clusvpr/numerics.hpp"

// Clustering-weighted transformer feature refinement (CWTNet).
//
// A CWTNet splits the channels of a feature map into a local branch (two
// depthwise 3x3 convolutions) and a global branch. The global branch pools
// the map into tokens, weights every token by how isolated it is among its
// k nearest neighbours, and runs multi-head self-attention whose values are
// rescaled by (lambda_c + w_i) before residual MLP and up-sampling stages.

namespace clusvpr {

struct TokenSequence {
  Tensor tokens;  // N x C, row-major over the (H/P) x (W/P) grid
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t rate = 1;
};

/// Average-pools each P x P cell of a C x H x W map into one token.
TokenSequence tokenize(const Tensor& fmap, std::size_t rate);

struct Density {
  std::vector<double> distances;                   // d_i
  std::vector<double> densities;                   // rho_i
  std::vector<std::vector<std::size_t>> neighbors; // KNN(i), nearest first
  std::size_t k = 0;
  std::size_t argmin = 0, argmax = 0;
  bool degenerate = false;                         // d_max == d_min
};

/// Sum of squared distances to the k nearest other tokens, and the density
/// exp(-(d_i - d_min) / (k (d_max - d_min))). Ties go to the lower index.
Density knn_density(const Tensor& tokens, std::size_t k);

struct ClusterWeights {
  std::vector<double> w;          // rescaled to [0, 1]
  std::vector<double> normalized; // (1 - rho_i) / sum_j (1 - rho_j), before min-max
  std::vector<double> rho;
  std::vector<double> d;
  std::size_t k = 0;
  std::size_t low = 0, high = 0;  // argmin / argmax of `normalized`
  double total = 0.0;             // sum_j (1 - rho_j)
  bool degenerate = false;        // every w_i = 0.5
};

/// Normalises (1 - rho) and min-max rescales it. A degenerate input (constant
/// rho) gives w = 0.5 everywhere.
ClusterWeights cluster_weights(std::span<const double> rho);

/// Density + weights for a token matrix. k is clamped to N - 1; a single token
/// is degenerate.
ClusterWeights token_cluster_weights(const Tensor& tokens, std::size_t k, Density* density_out = nullptr);

/// dL/d(tokens) given dL/dw, differentiating through the KNN distances with the
/// neighbour sets and extreme indices held fixed.
Tensor cluster_weights_backward(const Tensor& tokens, const Density& density, const ClusterWeights& weights,
                                std::span<const double> grad_w);

struct CmsaConfig {
  std::size_t channels = 0;
  std::size_t heads = 4;
  double lambda_c = 0.5;
};

/// Clustering-weighted multi-head self-attention without layer normalisation.
class Cmsa {
 public:
  struct Cache {
    Tensor x, q, k, v, concat;
    std::vector<Tensor> attention;  // per head, N x N
    std::vector<double> scale;      // lambda_c + w_i
  };

  Cmsa() = default;
  Cmsa(const CmsaConfig& config, const std::string& prefix, Rng& rng);

  const CmsaConfig& config() const { return config_; }
  std::size_t head_dim() const { return config_.channels / config_.heads; }

  Tensor forward(const Tensor& tokens, std::span<const double> weights, Cache* cache = nullptr) const;
  /// Accumulates parameter grads; writes dL/dx and dL/dw.
  void backward(const Cache& cache, const Tensor& grad_y, Tensor& grad_x, std::vector<double>& grad_w);

  ParamList params();
  Param& wq() { return wq_; }
  Param& wk() { return wk_; }
  Param& wv() { return wv_; }
  Param& wo() { return wo_; }
  Param& bo() { return bo_; }
  const Param& wq() const { return wq_; }
  const Param& wk() const { return wk_; }
  const Param& wv() const { return wv_; }
  const Param& wo() const { return wo_; }
  const Param& bo() const { return bo_; }

 private:
  CmsaConfig config_;
  Param wq_, wk_, wv_, wo_, bo_;
};

struct CwtConfig {
  std::size_t channels = 64;       // C of the incoming map
  std::size_t local_channels = 0;  // 0 -> C / 2
  std::size_t rate = 2;            // P
  std::size_t knn = 10;            // k_n
  std::size_t heads = 4;
  double lambda_c = 0.5;
  std::size_t mlp_ratio = 2;

  std::size_t local() const { return local_channels ? local_channels : channels / 2; }
  std::size_t global() const { return channels - local(); }
};

/// Global branch: DS -> CMSA (+x) -> MLP (+z) -> US (+m).
class CwtBlock {
 public:
  struct Cache {
    std::size_t height = 0, width = 0;
    Tensor x;  // tokens
    Density density;
    ClusterWeights weights;
    Cmsa::Cache cmsa;
    Tensor z, hidden_pre, hidden, z2;
    Tensor upsampled;  // depthwise transposed output, C x H x W
  };

  CwtBlock() = default;
  CwtBlock(std::size_t channels, const CwtConfig& config, const std::string& prefix, Rng& rng);

  Tensor forward(const Tensor& patch_map, Cache* cache = nullptr) const;
  /// Returns dL/d(patch_map).
  Tensor backward(const Cache& cache, const Tensor& grad_out);

  ParamList params();
  Cmsa& cmsa() { return cmsa_; }
  const Cmsa& cmsa() const { return cmsa_; }

 private:
  std::size_t channels_ = 0;
  std::size_t rate_ = 2;
  std::size_t knn_ = 10;
  Cmsa cmsa_;
  Param mlp_w1_, mlp_b1_, mlp_w2_, mlp_b2_;
  Param us_kernel_;                // C x P x P depthwise transposed kernel
  Param us_pointwise_, us_bias_;   // C x C (out, in), C
};

/// One CWTNet: local depthwise branch and clustering-weighted transformer branch,
/// concatenated back to C channels.
class CwtNet {
 public:
  struct Cache {
    Tensor local_in, local_pre, local_act;
    CwtBlock::Cache global;
  };

  CwtNet() = default;
  CwtNet(const CwtConfig& config, const std::string& prefix, Rng& rng);

  const CwtConfig& config() const { return config_; }

  Tensor forward(const Tensor& fmap, Cache* cache = nullptr) const;
  Tensor backward(const Cache& cache, const Tensor& grad_out);

  ParamList params();
  CwtBlock& block() { return block_; }
  const CwtBlock& block() const { return block_; }

 private:
  CwtConfig config_;
  Param dw1_w_, dw1_b_, dw2_w_, dw2_b_;
  CwtBlock block_;
};

/// Splits channels [begin, end) out of a C x H x W map.
Tensor slice_channels(const Tensor& fmap, std::size_t begin, std::size_t end);
Tensor concat_channels(const Tensor& a, const Tensor& b);

}  // namespace clusvpr
