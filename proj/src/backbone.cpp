#include "clusvpr/backbone.hpp"

#include <cmath>
#include <stdexcept>

#include "clusvpr/layers.hpp"

namespace clusvpr {

Backbone::Backbone(const BackboneConfig& config, Rng& rng) : config_(config) {
  if (config_.channels.empty() || config_.channels.size() != config_.strides.size()) {
    throw std::invalid_argument("backbone: channel plan and stride plan must be non-empty and equal length");
  }
  std::size_t cin = config_.in_channels;
  for (std::size_t l = 0; l < config_.channels.size(); ++l) {
    const std::size_t cout = config_.channels[l];
    if (config_.strides[l] == 0) throw std::invalid_argument("backbone: stride must be >= 1");
    Param w("backbone.conv" + std::to_string(l) + ".weight", {cout, cin, 3, 3});
    const double std_dev = std::sqrt(2.0 / static_cast<double>(cin * 9));
    for (auto& v : w.value.data) v = rng.normal() * std_dev;
    weights_.push_back(std::move(w));
    biases_.emplace_back("backbone.conv" + std::to_string(l) + ".bias", std::vector<std::size_t>{cout});
    cin = cout;
  }
}

std::size_t Backbone::total_stride() const {
  std::size_t s = 1;
  for (auto v : config_.strides) s *= v;
  return s;
}

Tensor image_to_chw(const Tensor& image) {
  if (image.rank() != 3) throw std::invalid_argument("image must be H x W x channels");
  const std::size_t h = image.dim(0), w = image.dim(1), c = image.dim(2);
  Tensor out({c, h, w});
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t ch = 0; ch < c; ++ch) out.data[(ch * h + y) * w + x] = image.data[(y * w + x) * c + ch];
  return out;
}

Tensor Backbone::forward(const Tensor& image, Cache* cache) const {
  if (image.rank() != 3 || image.dim(2) != config_.in_channels) {
    throw std::invalid_argument("backbone: expected H x W x " + std::to_string(config_.in_channels) +
                                " image, got " + shape_str(image.shape));
  }
  const std::size_t s = total_stride();
  if (image.dim(0) % s != 0 || image.dim(1) % s != 0) {
    throw std::invalid_argument("backbone: image " + std::to_string(image.dim(0)) + "x" +
                                std::to_string(image.dim(1)) + " must be divisible by total stride " +
                                std::to_string(s));
  }
  Tensor x = image_to_chw(image);
  if (cache) {
    cache->inputs.clear();
    cache->pre.clear();
  }
  for (std::size_t l = 0; l < weights_.size(); ++l) {
    Tensor z = layers::conv3x3(x, weights_[l].value, biases_[l].value, config_.strides[l]);
    if (cache) {
      cache->inputs.push_back(std::move(x));
      cache->pre.push_back(z);
    }
    for (auto& v : z.data) v = v > 0.0 ? v : 0.0;
    x = std::move(z);
  }
  return x;
}

void Backbone::backward(const Cache& cache, const Tensor& grad_out) {
  Tensor g = grad_out;
  for (std::size_t l = weights_.size(); l-- > 0;) {
    const Tensor& pre = cache.pre[l];
    for (std::size_t i = 0; i < g.numel(); ++i)
      if (pre.data[i] <= 0.0) g.data[i] = 0.0;
    Tensor gx;
    layers::conv3x3_backward(cache.inputs[l], weights_[l].value, config_.strides[l], g, weights_[l].grad,
                             biases_[l].grad, l > 0 ? &gx : nullptr);
    g = std::move(gx);
  }
}

ParamList Backbone::params() {
  ParamList out;
  for (std::size_t l = 0; l < weights_.size(); ++l) {
    out.push_back(&weights_[l]);
    out.push_back(&biases_[l]);
  }
  return out;
}

std::vector<const Param*> Backbone::params() const {
  std::vector<const Param*> out;
  for (std::size_t l = 0; l < weights_.size(); ++l) {
    out.push_back(&weights_[l]);
    out.push_back(&biases_[l]);
  }
  return out;
}

}  // namespace clusvpr
