#pragma once

#include <vector>

#include "clusvpr/numerics.hpp"

namespace clusvpr {

struct BackboneConfig {
  std::size_t in_channels = 3;
  std::vector<std::size_t> channels{16, 32, 64, 64};
  std::vector<std::size_t> strides{2, 2, 2, 2};
};

/// Small convolutional feature extractor: a stack of {3x3 conv, bias, ReLU} blocks.
class Backbone {
 public:
  struct Cache {
    std::vector<Tensor> inputs;  // input of each layer (layer 0: CHW image)
    std::vector<Tensor> pre;     // pre-activation of each layer
  };

  Backbone() = default;
  /// He (fan-in) initialisation; biases start at zero.
  Backbone(const BackboneConfig& config, Rng& rng);

  const BackboneConfig& config() const { return config_; }
  std::size_t total_stride() const;
  std::size_t out_channels() const { return config_.channels.back(); }

  /// image: H0 x W0 x 3 (HWC). Returns C x H0/s x W0/s.
  Tensor forward(const Tensor& image, Cache* cache = nullptr) const;
  /// Accumulates parameter gradients for dL/d(output) = grad_out.
  void backward(const Cache& cache, const Tensor& grad_out);

  ParamList params();
  std::vector<const Param*> params() const;

 private:
  BackboneConfig config_;
  std::vector<Param> weights_;
  std::vector<Param> biases_;
};

/// HWC image -> CHW feature layout.
Tensor image_to_chw(const Tensor& image);

}  // namespace clusvpr
