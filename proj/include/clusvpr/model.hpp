#pragma once

#include <optional>
#include <vector>

#include "clusvpr/backbone.hpp"
#include "clusvpr/cluster_attention.hpp"
#include "clusvpr/optlad.hpp"

namespace clusvpr {

struct ModelConfig {
  BackboneConfig backbone;
  std::size_t cwt_blocks = 4;
  std::size_t local_channels = 0;  // 0 -> half of the backbone output
  std::size_t rate = 2;
  std::size_t knn = 10;
  std::size_t heads = 4;
  double lambda_c = 0.5;
  std::size_t mlp_ratio = 2;
  std::size_t expansion = 2;
  std::size_t groups = 8;
  std::size_t clusters = 64;
  double gem_p = 3.0;
  double sharpness = 10.0;
  bool normalize_input = true;
  std::size_t pca_dim = 4096;

  CwtConfig cwt() const;
  OptLadConfig optlad() const;
};

/// Backbone -> CWTNet stack -> OptLAD (-> PCA for stored descriptors).
class ClusVpr {
 public:
  struct EncodeCache {
    std::vector<CwtNet::Cache> cwt;
    OptLad::Cache optlad;
  };

  ClusVpr() = default;
  /// Parameter initialisation draws from rng in order: backbone, CWTNets, OptLAD.
  ClusVpr(const ModelConfig& config, Rng& rng);

  const ModelConfig& config() const { return config_; }

  Tensor features(const Tensor& image, Backbone::Cache* cache = nullptr) const {
    return backbone_.forward(image, cache);
  }
  /// Refines a backbone map (or a patch of one) and aggregates it into a unit
  /// lambda C K / G vector.
  std::vector<double> encode_map(const Tensor& fmap, EncodeCache* cache = nullptr) const;
  /// Accumulates CWTNet/OptLAD grads; returns dL/d(fmap).
  Tensor encode_map_backward(const EncodeCache& cache, std::span<const double> grad);

  /// Pre-PCA unit descriptor of an image.
  std::vector<double> embed(const Tensor& image) const { return encode_map(features(image)); }
  /// Stored global descriptor: embed + PCA (+ L2) when a PCA has been fitted.
  std::vector<double> describe(const Tensor& image) const;

  Backbone& backbone() { return backbone_; }
  const Backbone& backbone() const { return backbone_; }
  std::vector<CwtNet>& cwtnets() { return cwt_; }
  const std::vector<CwtNet>& cwtnets() const { return cwt_; }
  OptLad& optlad() { return optlad_; }
  const OptLad& optlad() const { return optlad_; }

  const std::optional<PcaParams>& pca() const { return pca_; }
  void set_pca(PcaParams pca) { pca_ = std::move(pca); }
  void clear_pca() { pca_.reset(); }

  ParamList params();
  std::vector<const Param*> params() const;
  void zero_grad();

 private:
  ModelConfig config_;
  Backbone backbone_;
  std::vector<CwtNet> cwt_;
  OptLad optlad_;
  std::optional<PcaParams> pca_;
};

}  // namespace clusvpr
