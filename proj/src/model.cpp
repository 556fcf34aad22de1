#include "clusvpr/model.hpp"

namespace clusvpr {

CwtConfig ModelConfig::cwt() const {
  CwtConfig c;
  c.channels = backbone.channels.back();
  c.local_channels = local_channels;
  c.rate = rate;
  c.knn = knn;
  c.heads = heads;
  c.lambda_c = lambda_c;
  c.mlp_ratio = mlp_ratio;
  return c;
}

OptLadConfig ModelConfig::optlad() const {
  OptLadConfig o;
  o.channels = backbone.channels.back();
  o.expansion = expansion;
  o.groups = groups;
  o.clusters = clusters;
  o.gem_p = gem_p;
  o.sharpness = sharpness;
  o.normalize_input = normalize_input;
  return o;
}

ClusVpr::ClusVpr(const ModelConfig& config, Rng& rng) : config_(config) {
  backbone_ = Backbone(config_.backbone, rng);
  for (std::size_t b = 0; b < config_.cwt_blocks; ++b)
    cwt_.emplace_back(config_.cwt(), "cwtnet." + std::to_string(b), rng);
  optlad_ = OptLad(config_.optlad(), rng);
}

std::vector<double> ClusVpr::encode_map(const Tensor& fmap, EncodeCache* cache) const {
  if (cache) cache->cwt.resize(cwt_.size());
  Tensor x = fmap;
  for (std::size_t b = 0; b < cwt_.size(); ++b) x = cwt_[b].forward(x, cache ? &cache->cwt[b] : nullptr);
  return optlad_.forward(x, cache ? &cache->optlad : nullptr);
}

Tensor ClusVpr::encode_map_backward(const EncodeCache& cache, std::span<const double> grad) {
  Tensor g = optlad_.backward(cache.optlad, grad);
  for (std::size_t b = cwt_.size(); b-- > 0;) g = cwt_[b].backward(cache.cwt[b], g);
  return g;
}

std::vector<double> ClusVpr::describe(const Tensor& image) const {
  auto f = embed(image);
  return pca_ ? pca_apply(f, *pca_) : f;
}

ParamList ClusVpr::params() {
  ParamList out = backbone_.params();
  for (auto& c : cwt_)
    for (Param* p : c.params()) out.push_back(p);
  for (Param* p : optlad_.params()) out.push_back(p);
  return out;
}

std::vector<const Param*> ClusVpr::params() const {
  auto mut = const_cast<ClusVpr*>(this)->params();
  return {mut.begin(), mut.end()};
}

void ClusVpr::zero_grad() {
  for (Param* p : params()) p->zero_grad();
}

}  // namespace clusvpr
