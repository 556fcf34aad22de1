#include "clusvpr/layers.hpp"

#include <algorithm>
#include <stdexcept>

namespace clusvpr::layers {

namespace {

std::size_t conv_out(std::size_t n, std::size_t stride) { return (n - 1) / stride + 1; }

// Valid output range [lo, hi) along one axis for kernel tap k (0..2), so that
// input index o*stride + k - 1 stays in [0, n).
void tap_range(std::size_t n_in, std::size_t n_out, std::size_t stride, std::size_t k,
               std::size_t& lo, std::size_t& hi) {
  lo = (k == 0) ? 1 : 0;
  // need o*stride + k - 1 <= n_in - 1  ->  o <= (n_in - k) / stride
  std::size_t max_o = (n_in + 1 - k - 1) / stride;  // floor((n_in - k) / stride) for k<=n_in
  if (n_in < k) {
    hi = 0;
    return;
  }
  hi = std::min(n_out, max_o + 1);
  if (lo > hi) lo = hi;
}

}  // namespace

Tensor conv3x3(const Tensor& x, const Tensor& weight, const Tensor& bias, std::size_t stride) {
  const std::size_t cin = x.dim(0), h = x.dim(1), w = x.dim(2);
  const std::size_t cout = weight.dim(0);
  if (weight.dim(1) != cin) {
    throw std::invalid_argument("conv3x3: input has " + std::to_string(cin) + " channels, kernel expects " +
                                std::to_string(weight.dim(1)));
  }
  const std::size_t ho = conv_out(h, stride), wo = conv_out(w, stride);
  Tensor y({cout, ho, wo});
  for (std::size_t oc = 0; oc < cout; ++oc) {
    double* out = &y.data[oc * ho * wo];
    std::fill(out, out + ho * wo, bias.data[oc]);
    for (std::size_t ic = 0; ic < cin; ++ic) {
      const double* in = &x.data[ic * h * w];
      const double* k = &weight.data[(oc * cin + ic) * 9];
      for (std::size_t ky = 0; ky < 3; ++ky) {
        std::size_t ylo, yhi;
        tap_range(h, ho, stride, ky, ylo, yhi);
        for (std::size_t kx = 0; kx < 3; ++kx) {
          std::size_t xlo, xhi;
          tap_range(w, wo, stride, kx, xlo, xhi);
          const double kv = k[ky * 3 + kx];
          for (std::size_t oy = ylo; oy < yhi; ++oy) {
            const double* irow = in + (oy * stride + ky - 1) * w + kx - 1;
            double* orow = out + oy * wo;
            if (stride == 1) {
              for (std::size_t ox = xlo; ox < xhi; ++ox) orow[ox] += kv * irow[ox];
            } else {
              for (std::size_t ox = xlo; ox < xhi; ++ox) orow[ox] += kv * irow[ox * stride];
            }
          }
        }
      }
    }
  }
  return y;
}

void conv3x3_backward(const Tensor& x, const Tensor& weight, std::size_t stride, const Tensor& grad_y,
                      Tensor& grad_w, Tensor& grad_b, Tensor* grad_x) {
  const std::size_t cin = x.dim(0), h = x.dim(1), w = x.dim(2);
  const std::size_t cout = weight.dim(0);
  const std::size_t ho = grad_y.dim(1), wo = grad_y.dim(2);
  if (grad_x) *grad_x = Tensor({cin, h, w});
  for (std::size_t oc = 0; oc < cout; ++oc) {
    const double* g = &grad_y.data[oc * ho * wo];
    double bsum = 0.0;
    for (std::size_t i = 0; i < ho * wo; ++i) bsum += g[i];
    grad_b.data[oc] += bsum;
    for (std::size_t ic = 0; ic < cin; ++ic) {
      const double* in = &x.data[ic * h * w];
      double* gin = grad_x ? &grad_x->data[ic * h * w] : nullptr;
      const double* k = &weight.data[(oc * cin + ic) * 9];
      double* gk = &grad_w.data[(oc * cin + ic) * 9];
      for (std::size_t ky = 0; ky < 3; ++ky) {
        std::size_t ylo, yhi;
        tap_range(h, ho, stride, ky, ylo, yhi);
        for (std::size_t kx = 0; kx < 3; ++kx) {
          std::size_t xlo, xhi;
          tap_range(w, wo, stride, kx, xlo, xhi);
          const double kv = k[ky * 3 + kx];
          double acc = 0.0;
          for (std::size_t oy = ylo; oy < yhi; ++oy) {
            const std::size_t off = (oy * stride + ky - 1) * w + kx - 1;
            const double* irow = in + off;
            const double* grow = g + oy * wo;
            if (stride == 1) {
              for (std::size_t ox = xlo; ox < xhi; ++ox) acc += grow[ox] * irow[ox];
              if (gin) {
                double* girow = gin + off;
                for (std::size_t ox = xlo; ox < xhi; ++ox) girow[ox] += kv * grow[ox];
              }
            } else {
              for (std::size_t ox = xlo; ox < xhi; ++ox) acc += grow[ox] * irow[ox * stride];
              if (gin) {
                double* girow = gin + off;
                for (std::size_t ox = xlo; ox < xhi; ++ox) girow[ox * stride] += kv * grow[ox];
              }
            }
          }
          gk[ky * 3 + kx] += acc;
        }
      }
    }
  }
}

Tensor depthwise3x3(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  if (weight.dim(0) != c) throw std::invalid_argument("depthwise3x3: channel mismatch");
  Tensor y({c, h, w});
  for (std::size_t ch = 0; ch < c; ++ch) {
    const double* in = &x.data[ch * h * w];
    double* out = &y.data[ch * h * w];
    const double* k = &weight.data[ch * 9];
    std::fill(out, out + h * w, bias.data[ch]);
    for (std::size_t ky = 0; ky < 3; ++ky) {
      std::size_t ylo, yhi;
      tap_range(h, h, 1, ky, ylo, yhi);
      for (std::size_t kx = 0; kx < 3; ++kx) {
        std::size_t xlo, xhi;
        tap_range(w, w, 1, kx, xlo, xhi);
        const double kv = k[ky * 3 + kx];
        for (std::size_t oy = ylo; oy < yhi; ++oy) {
          const double* irow = in + (oy + ky - 1) * w + kx - 1;
          double* orow = out + oy * w;
          for (std::size_t ox = xlo; ox < xhi; ++ox) orow[ox] += kv * irow[ox];
        }
      }
    }
  }
  return y;
}

void depthwise3x3_backward(const Tensor& x, const Tensor& weight, const Tensor& grad_y,
                           Tensor& grad_w, Tensor& grad_b, Tensor& grad_x) {
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  grad_x = Tensor({c, h, w});
  for (std::size_t ch = 0; ch < c; ++ch) {
    const double* in = &x.data[ch * h * w];
    const double* g = &grad_y.data[ch * h * w];
    double* gin = &grad_x.data[ch * h * w];
    const double* k = &weight.data[ch * 9];
    double* gk = &grad_w.data[ch * 9];
    double bsum = 0.0;
    for (std::size_t i = 0; i < h * w; ++i) bsum += g[i];
    grad_b.data[ch] += bsum;
    for (std::size_t ky = 0; ky < 3; ++ky) {
      std::size_t ylo, yhi;
      tap_range(h, h, 1, ky, ylo, yhi);
      for (std::size_t kx = 0; kx < 3; ++kx) {
        std::size_t xlo, xhi;
        tap_range(w, w, 1, kx, xlo, xhi);
        const double kv = k[ky * 3 + kx];
        double acc = 0.0;
        for (std::size_t oy = ylo; oy < yhi; ++oy) {
          const std::size_t off = (oy + ky - 1) * w + kx - 1;
          const double* grow = g + oy * w;
          for (std::size_t ox = xlo; ox < xhi; ++ox) {
            acc += grow[ox] * in[off + ox];
            gin[off + ox] += kv * grow[ox];
          }
        }
        gk[ky * 3 + kx] += acc;
      }
    }
  }
}

Tensor matmul(const Tensor& x, const Tensor& w) {
  const std::size_t n = x.dim(0), a = x.dim(1), b = w.dim(1);
  if (w.dim(0) != a) {
    throw std::invalid_argument("matmul: inner dimensions " + shape_str(x.shape) + " * " + shape_str(w.shape));
  }
  Tensor y({n, b});
  for (std::size_t i = 0; i < n; ++i) {
    double* yr = &y.data[i * b];
    const double* xr = &x.data[i * a];
    for (std::size_t k = 0; k < a; ++k) {
      const double xv = xr[k];
      const double* wr = &w.data[k * b];
      for (std::size_t j = 0; j < b; ++j) yr[j] += xv * wr[j];
    }
  }
  return y;
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias) {
  Tensor y = matmul(x, w);
  if (bias.numel() != 0) {
    const std::size_t b = w.dim(1);
    for (std::size_t i = 0; i < y.dim(0); ++i)
      for (std::size_t j = 0; j < b; ++j) y.data[i * b + j] += bias.data[j];
  }
  return y;
}

void linear_backward(const Tensor& x, const Tensor& w, const Tensor& grad_y, Tensor& grad_w,
                     Tensor* grad_b, Tensor* grad_x) {
  const std::size_t n = x.dim(0), a = x.dim(1), b = w.dim(1);
  for (std::size_t i = 0; i < n; ++i) {
    const double* xr = &x.data[i * a];
    const double* gr = &grad_y.data[i * b];
    for (std::size_t k = 0; k < a; ++k) {
      const double xv = xr[k];
      double* gw = &grad_w.data[k * b];
      for (std::size_t j = 0; j < b; ++j) gw[j] += xv * gr[j];
    }
    if (grad_b) {
      for (std::size_t j = 0; j < b; ++j) grad_b->data[j] += gr[j];
    }
  }
  if (grad_x) {
    *grad_x = Tensor({n, a});
    for (std::size_t i = 0; i < n; ++i) {
      const double* gr = &grad_y.data[i * b];
      double* gx = &grad_x->data[i * a];
      for (std::size_t k = 0; k < a; ++k) {
        const double* wr = &w.data[k * b];
        double s = 0.0;
        for (std::size_t j = 0; j < b; ++j) s += wr[j] * gr[j];
        gx[k] = s;
      }
    }
  }
}

Tensor avg_pool_tokens(const Tensor& fmap, std::size_t rate) {
  const std::size_t c = fmap.dim(0), h = fmap.dim(1), w = fmap.dim(2);
  if (rate == 0 || h % rate != 0 || w % rate != 0) {
    throw std::invalid_argument("tokenize: down-sampling rate " + std::to_string(rate) +
                                " does not divide feature map " + std::to_string(h) + "x" + std::to_string(w));
  }
  const std::size_t gh = h / rate, gw = w / rate;
  Tensor t({gh * gw, c});
  const double inv = 1.0 / static_cast<double>(rate * rate);
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x)
        t.data[((y / rate) * gw + x / rate) * c + ch] += fmap.data[(ch * h + y) * w + x] * inv;
  return t;
}

Tensor avg_pool_tokens_backward(const Tensor& grad_tokens, std::size_t channels, std::size_t height,
                                std::size_t width, std::size_t rate) {
  const std::size_t gw = width / rate;
  const double inv = 1.0 / static_cast<double>(rate * rate);
  Tensor g({channels, height, width});
  for (std::size_t ch = 0; ch < channels; ++ch)
    for (std::size_t y = 0; y < height; ++y)
      for (std::size_t x = 0; x < width; ++x)
        g.data[(ch * height + y) * width + x] = grad_tokens.data[((y / rate) * gw + x / rate) * channels + ch] * inv;
  return g;
}

Tensor gelu(const Tensor& x) {
  Tensor y(x.shape);
  for (std::size_t i = 0; i < x.numel(); ++i) y.data[i] = clusvpr::gelu(x.data[i]);
  return y;
}

Tensor gelu_backward(const Tensor& x, const Tensor& grad_y) {
  Tensor g(x.shape);
  for (std::size_t i = 0; i < x.numel(); ++i) g.data[i] = grad_y.data[i] * clusvpr::gelu_grad(x.data[i]);
  return g;
}

void add_inplace(Tensor& a, const Tensor& b) {
  if (a.numel() != b.numel()) throw std::invalid_argument("add: size mismatch");
  for (std::size_t i = 0; i < a.numel(); ++i) a.data[i] += b.data[i];
}

}  // namespace clusvpr::layers
