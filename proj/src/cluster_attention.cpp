#include "clusvpr/cluster_attention.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "clusvpr/layers.hpp"

namespace clusvpr {

TokenSequence tokenize(const Tensor& fmap, std::size_t rate) {
  if (fmap.rank() != 3) throw std::invalid_argument("tokenize: expected C x H x W map");
  TokenSequence seq;
  seq.tokens = layers::avg_pool_tokens(fmap, rate);
  seq.height = fmap.dim(1);
  seq.width = fmap.dim(2);
  seq.rate = rate;
  return seq;
}

Density knn_density(const Tensor& tokens, std::size_t k) {
  const std::size_t n = tokens.dim(0), c = tokens.dim(1);
  if (k < 1 || n <= k) {
    throw std::invalid_argument("knn_density: need N > k_n >= 1 (N=" + std::to_string(n) +
                                ", k_n=" + std::to_string(k) + ")");
  }
  std::vector<double> dist(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      double s = 0.0;
      for (std::size_t ch = 0; ch < c; ++ch) {
        const double t = tokens.data[i * c + ch] - tokens.data[j * c + ch];
        s += t * t;
      }
      dist[i * n + j] = dist[j * n + i] = s;
    }

  Density out;
  out.k = k;
  out.distances.resize(n);
  out.neighbors.resize(n);
  std::vector<std::size_t> order;
  for (std::size_t i = 0; i < n; ++i) {
    order.clear();
    for (std::size_t j = 0; j < n; ++j)
      if (j != i) order.push_back(j);
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                      [&](std::size_t a, std::size_t b) {
                        const double da = dist[i * n + a], db = dist[i * n + b];
                        return da < db || (da == db && a < b);
                      });
    order.resize(k);
    double s = 0.0;
    for (auto j : order) s += dist[i * n + j];
    out.distances[i] = s;
    out.neighbors[i] = order;
  }

  const auto& d = out.distances;
  out.argmin = static_cast<std::size_t>(std::min_element(d.begin(), d.end()) - d.begin());
  out.argmax = static_cast<std::size_t>(std::max_element(d.begin(), d.end()) - d.begin());
  const double lo = d[out.argmin], hi = d[out.argmax];
  const double range = hi - lo;
  out.degenerate = !(range > 1e-12 * std::max(1.0, std::abs(hi)));
  out.densities.assign(n, 1.0);
  if (!out.degenerate) {
    for (std::size_t i = 0; i < n; ++i)
      out.densities[i] = std::exp(-(d[i] - lo) / (static_cast<double>(k) * range));
  }
  return out;
}

ClusterWeights cluster_weights(std::span<const double> rho) {
  ClusterWeights cw;
  const std::size_t n = rho.size();
  cw.rho.assign(rho.begin(), rho.end());
  cw.w.assign(n, 0.5);
  cw.normalized.assign(n, 0.0);
  double total = 0.0;
  for (double r : rho) total += 1.0 - r;
  cw.total = total;
  if (!(total > 0.0)) {
    cw.degenerate = true;
    return cw;
  }
  for (std::size_t i = 0; i < n; ++i) cw.normalized[i] = (1.0 - rho[i]) / total;
  const auto& v = cw.normalized;
  cw.low = static_cast<std::size_t>(std::min_element(v.begin(), v.end()) - v.begin());
  cw.high = static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
  const double span = v[cw.high] - v[cw.low];
  if (!(span > 1e-14)) {
    cw.degenerate = true;
    return cw;
  }
  for (std::size_t i = 0; i < n; ++i) cw.w[i] = (v[i] - v[cw.low]) / span;
  return cw;
}

ClusterWeights token_cluster_weights(const Tensor& tokens, std::size_t k, Density* density_out) {
  const std::size_t n = tokens.dim(0);
  const std::size_t k_eff = std::min(k, n > 0 ? n - 1 : 0);
  if (k_eff == 0) {
    ClusterWeights cw;
    cw.w.assign(n, 0.5);
    cw.rho.assign(n, 1.0);
    cw.d.assign(n, 0.0);
    cw.normalized.assign(n, 0.0);
    cw.degenerate = true;
    if (density_out) {
      *density_out = Density{};
      density_out->distances.assign(n, 0.0);
      density_out->densities.assign(n, 1.0);
      density_out->neighbors.assign(n, {});
      density_out->degenerate = true;
    }
    return cw;
  }
  Density density = knn_density(tokens, k_eff);
  ClusterWeights cw = cluster_weights(density.densities);
  cw.d = density.distances;
  cw.k = k_eff;
  if (density_out) *density_out = std::move(density);
  return cw;
}

Tensor cluster_weights_backward(const Tensor& tokens, const Density& density, const ClusterWeights& weights,
                                std::span<const double> grad_w) {
  const std::size_t n = tokens.dim(0), c = tokens.dim(1);
  Tensor gx({n, c});
  if (weights.degenerate || density.degenerate) return gx;

  // min-max rescale
  const auto& v = weights.normalized;
  const double lo = v[weights.low];
  const double span = v[weights.high] - lo;
  std::vector<double> g_norm(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const double gi = grad_w[i];
    if (gi == 0.0) continue;
    g_norm[i] += gi / span;
    g_norm[weights.low] += gi * (-1.0 / span + (v[i] - lo) / (span * span));
    g_norm[weights.high] -= gi * (v[i] - lo) / (span * span);
  }

  // (1 - rho_i) / sum_j (1 - rho_j)
  double weighted = 0.0;
  for (std::size_t i = 0; i < n; ++i) weighted += g_norm[i] * v[i];
  std::vector<double> g_rho(n);
  for (std::size_t j = 0; j < n; ++j) g_rho[j] = (weighted - g_norm[j]) / weights.total;

  // rho_i = exp(-(d_i - d_min) / (k (d_max - d_min)))
  const auto& d = density.distances;
  const double d_lo = d[density.argmin];
  const double range = d[density.argmax] - d_lo;
  const double kr = static_cast<double>(density.k) * range;
  std::vector<double> g_d(n, 0.0);
  double g_min = 0.0, g_max = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double gu = -density.densities[i] * g_rho[i];
    const double rel = (d[i] - d_lo) / (kr * range);
    g_d[i] += gu / kr;
    g_min += gu * (-1.0 / kr + rel);
    g_max -= gu * rel;
  }
  g_d[density.argmin] += g_min;
  g_d[density.argmax] += g_max;

  // d_i = sum_{j in KNN(i)} |x_i - x_j|^2
  for (std::size_t i = 0; i < n; ++i) {
    if (g_d[i] == 0.0) continue;
    const double s = 2.0 * g_d[i];
    for (std::size_t j : density.neighbors[i]) {
      for (std::size_t ch = 0; ch < c; ++ch) {
        const double diff = tokens.data[i * c + ch] - tokens.data[j * c + ch];
        gx.data[i * c + ch] += s * diff;
        gx.data[j * c + ch] -= s * diff;
      }
    }
  }
  return gx;
}

// ---------------------------------------------------------------------------

namespace {

void init_normal(Param& p, Rng& rng, double std_dev) {
  for (auto& v : p.value.data) v = rng.normal() * std_dev;
}

}  // namespace

Cmsa::Cmsa(const CmsaConfig& config, const std::string& prefix, Rng& rng) : config_(config) {
  const std::size_t c = config_.channels;
  if (config_.heads == 0 || c % config_.heads != 0) {
    throw std::invalid_argument("cmsa: head count " + std::to_string(config_.heads) + " must divide " +
                                std::to_string(c) + " channels");
  }
  wq_ = Param(prefix + ".wq", {c, c});
  wk_ = Param(prefix + ".wk", {c, c});
  wv_ = Param(prefix + ".wv", {c, c});
  wo_ = Param(prefix + ".wo", {c, c});
  bo_ = Param(prefix + ".bo", {c});
  const double s = 1.0 / std::sqrt(static_cast<double>(c));
  init_normal(wq_, rng, s);
  init_normal(wk_, rng, s);
  init_normal(wv_, rng, s);
  init_normal(wo_, rng, s);
}

Tensor Cmsa::forward(const Tensor& tokens, std::span<const double> weights, Cache* cache) const {
  const std::size_t n = tokens.dim(0), c = config_.channels;
  if (tokens.dim(1) != c) {
    throw std::invalid_argument("cmsa: tokens have " + std::to_string(tokens.dim(1)) + " channels, expected " +
                                std::to_string(c));
  }
  if (weights.size() != n) throw std::invalid_argument("cmsa: cluster weight count != token count");
  const std::size_t heads = config_.heads, dh = head_dim();
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));

  Tensor q = layers::matmul(tokens, wq_.value);
  Tensor k = layers::matmul(tokens, wk_.value);
  Tensor v = layers::matmul(tokens, wv_.value);
  std::vector<double> scale(n);
  for (std::size_t i = 0; i < n; ++i) scale[i] = config_.lambda_c + weights[i];

  Tensor concat({n, c});
  std::vector<Tensor> attn;
  if (cache) attn.reserve(heads);
  std::vector<double> logits(n);
  for (std::size_t h = 0; h < heads; ++h) {
    const std::size_t off = h * dh;
    Tensor a({n, n});
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        double s = 0.0;
        for (std::size_t t = 0; t < dh; ++t) s += q.data[i * c + off + t] * k.data[j * c + off + t];
        logits[j] = s * inv_sqrt;
      }
      auto row = softmax(logits);
      std::copy(row.begin(), row.end(), a.data.begin() + static_cast<std::ptrdiff_t>(i * n));
      double* out = &concat.data[i * c + off];
      for (std::size_t j = 0; j < n; ++j) {
        const double aw = row[j] * scale[j];
        const double* vr = &v.data[j * c + off];
        for (std::size_t t = 0; t < dh; ++t) out[t] += aw * vr[t];
      }
    }
    if (cache) attn.push_back(std::move(a));
  }
  Tensor y = layers::linear(concat, wo_.value, bo_.value);
  if (cache) {
    cache->x = tokens;
    cache->q = std::move(q);
    cache->k = std::move(k);
    cache->v = std::move(v);
    cache->concat = std::move(concat);
    cache->attention = std::move(attn);
    cache->scale = std::move(scale);
  }
  return y;
}

void Cmsa::backward(const Cache& cache, const Tensor& grad_y, Tensor& grad_x, std::vector<double>& grad_w) {
  const std::size_t n = cache.x.dim(0), c = config_.channels;
  const std::size_t heads = config_.heads, dh = head_dim();
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));

  Tensor g_concat;
  layers::linear_backward(cache.concat, wo_.value, grad_y, wo_.grad, &bo_.grad, &g_concat);

  Tensor gq({n, c}), gk({n, c}), gv({n, c});
  grad_w.assign(n, 0.0);
  std::vector<double> ga(n), gs(n);
  for (std::size_t h = 0; h < heads; ++h) {
    const std::size_t off = h * dh;
    const Tensor& a = cache.attention[h];
    for (std::size_t i = 0; i < n; ++i) {
      const double* go = &g_concat.data[i * c + off];
      for (std::size_t j = 0; j < n; ++j) {
        const double* vr = &cache.v.data[j * c + off];
        double s = 0.0;
        for (std::size_t t = 0; t < dh; ++t) s += go[t] * vr[t];
        ga[j] = s * cache.scale[j];
        const double aij = a.data[i * n + j];
        grad_w[j] += aij * s;
        double* gvr = &gv.data[j * c + off];
        const double coef = aij * cache.scale[j];
        for (std::size_t t = 0; t < dh; ++t) gvr[t] += coef * go[t];
      }
      double dotp = 0.0;
      for (std::size_t j = 0; j < n; ++j) dotp += a.data[i * n + j] * ga[j];
      for (std::size_t j = 0; j < n; ++j) gs[j] = a.data[i * n + j] * (ga[j] - dotp) * inv_sqrt;
      for (std::size_t j = 0; j < n; ++j) {
        if (gs[j] == 0.0) continue;
        const double* kr = &cache.k.data[j * c + off];
        const double* qr = &cache.q.data[i * c + off];
        double* gqr = &gq.data[i * c + off];
        double* gkr = &gk.data[j * c + off];
        for (std::size_t t = 0; t < dh; ++t) {
          gqr[t] += gs[j] * kr[t];
          gkr[t] += gs[j] * qr[t];
        }
      }
    }
  }
  Tensor gx_q, gx_k, gx_v;
  layers::linear_backward(cache.x, wq_.value, gq, wq_.grad, nullptr, &gx_q);
  layers::linear_backward(cache.x, wk_.value, gk, wk_.grad, nullptr, &gx_k);
  layers::linear_backward(cache.x, wv_.value, gv, wv_.grad, nullptr, &gx_v);
  grad_x = std::move(gx_q);
  layers::add_inplace(grad_x, gx_k);
  layers::add_inplace(grad_x, gx_v);
}

ParamList Cmsa::params() { return {&wq_, &wk_, &wv_, &wo_, &bo_}; }

// ---------------------------------------------------------------------------

CwtBlock::CwtBlock(std::size_t channels, const CwtConfig& config, const std::string& prefix, Rng& rng)
    : channels_(channels), rate_(config.rate), knn_(config.knn) {
  if (rate_ == 0) throw std::invalid_argument("cwt: down-sampling rate must be >= 1");
  cmsa_ = Cmsa(CmsaConfig{channels, config.heads, config.lambda_c}, prefix + ".cmsa", rng);
  const std::size_t hidden = channels * config.mlp_ratio;
  mlp_w1_ = Param(prefix + ".mlp.w1", {channels, hidden});
  mlp_b1_ = Param(prefix + ".mlp.b1", {hidden});
  mlp_w2_ = Param(prefix + ".mlp.w2", {hidden, channels});
  mlp_b2_ = Param(prefix + ".mlp.b2", {channels});
  init_normal(mlp_w1_, rng, 1.0 / std::sqrt(static_cast<double>(channels)));
  init_normal(mlp_w2_, rng, 1.0 / std::sqrt(static_cast<double>(hidden)));
  us_kernel_ = Param(prefix + ".us.kernel", {channels, rate_, rate_});
  us_kernel_.value.fill(1.0);
  // Zero pointwise mixing: a fresh block is the identity map.
  us_pointwise_ = Param(prefix + ".us.pointwise", {channels, channels});
  us_bias_ = Param(prefix + ".us.bias", {channels});
}

Tensor CwtBlock::forward(const Tensor& patch_map, Cache* cache) const {
  if (patch_map.rank() != 3 || patch_map.dim(0) != channels_) {
    throw std::invalid_argument("cwt block: expected " + std::to_string(channels_) + " x H x W map, got " +
                                shape_str(patch_map.shape));
  }
  const std::size_t c = channels_, h = patch_map.dim(1), w = patch_map.dim(2), p = rate_;
  TokenSequence seq = tokenize(patch_map, p);
  Density density;
  ClusterWeights cw = token_cluster_weights(seq.tokens, knn_, &density);

  Cmsa::Cache cmsa_cache;
  Tensor z = cmsa_.forward(seq.tokens, cw.w, cache ? &cmsa_cache : nullptr);
  layers::add_inplace(z, seq.tokens);

  Tensor hidden_pre = layers::linear(z, mlp_w1_.value, mlp_b1_.value);
  Tensor hidden = layers::gelu(hidden_pre);
  Tensor z2 = layers::linear(hidden, mlp_w2_.value, mlp_b2_.value);
  layers::add_inplace(z2, z);

  const std::size_t gw = w / p;
  Tensor up({c, h, w});
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x)
        up.data[(ch * h + y) * w + x] =
            us_kernel_.value.data[(ch * p + y % p) * p + x % p] * z2.data[((y / p) * gw + x / p) * c + ch];

  Tensor out = patch_map;
  const std::size_t hw = h * w;
  for (std::size_t o = 0; o < c; ++o) {
    double* orow = &out.data[o * hw];
    const double b = us_bias_.value.data[o];
    for (std::size_t i = 0; i < hw; ++i) orow[i] += b;
    for (std::size_t ch = 0; ch < c; ++ch) {
      const double m = us_pointwise_.value.data[o * c + ch];
      if (m == 0.0) continue;
      const double* urow = &up.data[ch * hw];
      for (std::size_t i = 0; i < hw; ++i) orow[i] += m * urow[i];
    }
  }

  if (cache) {
    cache->height = h;
    cache->width = w;
    cache->x = std::move(seq.tokens);
    cache->density = std::move(density);
    cache->weights = std::move(cw);
    cache->cmsa = std::move(cmsa_cache);
    cache->z = std::move(z);
    cache->hidden_pre = std::move(hidden_pre);
    cache->hidden = std::move(hidden);
    cache->z2 = std::move(z2);
    cache->upsampled = std::move(up);
  }
  return out;
}

Tensor CwtBlock::backward(const Cache& cache, const Tensor& grad_out) {
  const std::size_t c = channels_, h = cache.height, w = cache.width, p = rate_;
  const std::size_t hw = h * w, gw = w / p;

  // US: pointwise mixing then depthwise transposed conv
  Tensor g_up({c, h, w});
  for (std::size_t o = 0; o < c; ++o) {
    const double* grow = &grad_out.data[o * hw];
    double bsum = 0.0;
    for (std::size_t i = 0; i < hw; ++i) bsum += grow[i];
    us_bias_.grad.data[o] += bsum;
    for (std::size_t ch = 0; ch < c; ++ch) {
      const double* urow = &cache.upsampled.data[ch * hw];
      double acc = 0.0;
      for (std::size_t i = 0; i < hw; ++i) acc += grow[i] * urow[i];
      us_pointwise_.grad.data[o * c + ch] += acc;
      const double m = us_pointwise_.value.data[o * c + ch];
      if (m == 0.0) continue;
      double* gu = &g_up.data[ch * hw];
      for (std::size_t i = 0; i < hw; ++i) gu[i] += m * grow[i];
    }
  }
  Tensor g_z2({cache.z2.dim(0), c});
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        const double g = g_up.data[(ch * h + y) * w + x];
        const std::size_t tok = ((y / p) * gw + x / p) * c + ch;
        const std::size_t kidx = (ch * p + y % p) * p + x % p;
        us_kernel_.grad.data[kidx] += g * cache.z2.data[tok];
        g_z2.data[tok] += g * us_kernel_.value.data[kidx];
      }

  // MLP residual
  Tensor g_hidden;
  layers::linear_backward(cache.hidden, mlp_w2_.value, g_z2, mlp_w2_.grad, &mlp_b2_.grad, &g_hidden);
  Tensor g_pre = layers::gelu_backward(cache.hidden_pre, g_hidden);
  Tensor g_z;
  layers::linear_backward(cache.z, mlp_w1_.value, g_pre, mlp_w1_.grad, &mlp_b1_.grad, &g_z);
  layers::add_inplace(g_z, g_z2);

  // CMSA residual
  Tensor g_x;
  std::vector<double> g_w;
  cmsa_.backward(cache.cmsa, g_z, g_x, g_w);
  layers::add_inplace(g_x, g_z);
  layers::add_inplace(g_x, cluster_weights_backward(cache.x, cache.density, cache.weights, g_w));

  Tensor g_map = layers::avg_pool_tokens_backward(g_x, c, h, w, p);
  layers::add_inplace(g_map, grad_out);
  return g_map;
}

ParamList CwtBlock::params() {
  ParamList out = cmsa_.params();
  for (Param* p : {&mlp_w1_, &mlp_b1_, &mlp_w2_, &mlp_b2_, &us_kernel_, &us_pointwise_, &us_bias_})
    out.push_back(p);
  return out;
}

// ---------------------------------------------------------------------------

Tensor slice_channels(const Tensor& fmap, std::size_t begin, std::size_t end) {
  const std::size_t hw = fmap.dim(1) * fmap.dim(2);
  Tensor out({end - begin, fmap.dim(1), fmap.dim(2)});
  std::copy(fmap.data.begin() + static_cast<std::ptrdiff_t>(begin * hw),
            fmap.data.begin() + static_cast<std::ptrdiff_t>(end * hw), out.data.begin());
  return out;
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
  Tensor out({a.dim(0) + b.dim(0), a.dim(1), a.dim(2)});
  std::copy(a.data.begin(), a.data.end(), out.data.begin());
  std::copy(b.data.begin(), b.data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(a.numel()));
  return out;
}

CwtNet::CwtNet(const CwtConfig& config, const std::string& prefix, Rng& rng) : config_(config) {
  if (config_.local_channels == 0 && config_.channels % 2 != 0) {
    throw std::invalid_argument("cwtnet: odd channel count " + std::to_string(config_.channels) +
                                " needs an explicit local_channels split");
  }
  const std::size_t cl = config_.local(), cg = config_.global();
  if (cl == 0 || cg == 0 || cl >= config_.channels) {
    throw std::invalid_argument("cwtnet: invalid channel split " + std::to_string(cl) + "/" + std::to_string(cg));
  }
  dw1_w_ = Param(prefix + ".local.dw1.weight", {cl, 3, 3});
  dw1_b_ = Param(prefix + ".local.dw1.bias", {cl});
  dw2_w_ = Param(prefix + ".local.dw2.weight", {cl, 3, 3});
  dw2_b_ = Param(prefix + ".local.dw2.bias", {cl});
  init_normal(dw1_w_, rng, 1.0 / 3.0);
  block_ = CwtBlock(cg, config_, prefix + ".global", rng);
}

Tensor CwtNet::forward(const Tensor& fmap, Cache* cache) const {
  if (fmap.rank() != 3 || fmap.dim(0) != config_.channels) {
    throw std::invalid_argument("cwtnet: expected " + std::to_string(config_.channels) + " x H x W map, got " +
                                shape_str(fmap.shape));
  }
  const std::size_t cl = config_.local();
  Tensor local = slice_channels(fmap, 0, cl);
  Tensor global = slice_channels(fmap, cl, config_.channels);

  Tensor pre = layers::depthwise3x3(local, dw1_w_.value, dw1_b_.value);
  Tensor act = layers::gelu(pre);
  Tensor local_out = layers::depthwise3x3(act, dw2_w_.value, dw2_b_.value);
  layers::add_inplace(local_out, local);

  Tensor global_out = block_.forward(global, cache ? &cache->global : nullptr);
  if (cache) {
    cache->local_in = std::move(local);
    cache->local_pre = std::move(pre);
    cache->local_act = std::move(act);
  }
  return concat_channels(local_out, global_out);
}

Tensor CwtNet::backward(const Cache& cache, const Tensor& grad_out) {
  const std::size_t cl = config_.local();
  Tensor g_local = slice_channels(grad_out, 0, cl);
  Tensor g_global = slice_channels(grad_out, cl, config_.channels);

  Tensor g_act;
  layers::depthwise3x3_backward(cache.local_act, dw2_w_.value, g_local, dw2_w_.grad, dw2_b_.grad, g_act);
  Tensor g_pre = layers::gelu_backward(cache.local_pre, g_act);
  Tensor g_in;
  layers::depthwise3x3_backward(cache.local_in, dw1_w_.value, g_pre, dw1_w_.grad, dw1_b_.grad, g_in);
  layers::add_inplace(g_in, g_local);

  Tensor g_glob = block_.backward(cache.global, g_global);
  return concat_channels(g_in, g_glob);
}

ParamList CwtNet::params() {
  ParamList out{&dw1_w_, &dw1_b_, &dw2_w_, &dw2_b_};
  for (Param* p : block_.params()) out.push_back(p);
  return out;
}

}  // namespace clusvpr
