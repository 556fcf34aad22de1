#pragma once

#include "clusvpr/numerics.hpp"

// Shared convolution / dense kernels with hand-written backward passes.
// Feature maps are C x H x W tensors; token matrices are N x C.

namespace clusvpr::layers {

/// 3x3 convolution, zero padding 1. weight: Cout x Cin x 3 x 3, bias: Cout.
Tensor conv3x3(const Tensor& x, const Tensor& weight, const Tensor& bias, std::size_t stride);
/// Accumulates into grad_w / grad_b; writes grad_x when non-null.
void conv3x3_backward(const Tensor& x, const Tensor& weight, std::size_t stride, const Tensor& grad_y,
                      Tensor& grad_w, Tensor& grad_b, Tensor* grad_x);

/// Depthwise 3x3 convolution, stride 1, padding 1. weight: C x 3 x 3, bias: C.
Tensor depthwise3x3(const Tensor& x, const Tensor& weight, const Tensor& bias);
void depthwise3x3_backward(const Tensor& x, const Tensor& weight, const Tensor& grad_y,
                           Tensor& grad_w, Tensor& grad_b, Tensor& grad_x);

/// y = x W (+ b). x: N x A, W: A x B, b: B (may be empty).
Tensor matmul(const Tensor& x, const Tensor& w);
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias);
/// grad_w += x^T gy, grad_b += colsum(gy), grad_x = gy W^T (when non-null, overwritten).
void linear_backward(const Tensor& x, const Tensor& w, const Tensor& grad_y, Tensor& grad_w,
                     Tensor* grad_b, Tensor* grad_x);

/// Non-overlapping average pooling over P x P cells -> (H/P * W/P) x C token matrix (row-major grid).
Tensor avg_pool_tokens(const Tensor& fmap, std::size_t rate);
Tensor avg_pool_tokens_backward(const Tensor& grad_tokens, std::size_t channels, std::size_t height,
                                std::size_t width, std::size_t rate);

Tensor gelu(const Tensor& x);
/// grad_x = grad_y * gelu'(x)
Tensor gelu_backward(const Tensor& x, const Tensor& grad_y);

void add_inplace(Tensor& a, const Tensor& b);

}  // namespace clusvpr::layers
