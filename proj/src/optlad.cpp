#include "clusvpr/optlad.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "clusvpr/layers.hpp"

namespace clusvpr {

void OptLadConfig::validate() const {
  if (channels == 0 || expansion == 0 || clusters == 0 || groups == 0) {
    throw std::invalid_argument("optlad: channels, expansion, groups and clusters must be >= 1");
  }
  if (expanded() % groups != 0) {
    throw std::invalid_argument("optlad: groups G=" + std::to_string(groups) + " must divide lambda*C=" +
                                std::to_string(expanded()));
  }
  if (!(gem_p > 0.0)) throw std::invalid_argument("optlad: GeM exponent must be > 0");
}

OptLad::OptLad(const OptLadConfig& config, Rng& rng) : config_(config) {
  config_.validate();
  const std::size_t c = config_.channels, e = config_.expanded(), g = config_.groups, k = config_.clusters,
                    dg = config_.group_dim();
  expand_ = Param("optlad.expand", {c, e});
  const double s = 1.0 / std::sqrt(static_cast<double>(c));
  for (auto& v : expand_.value.data) v = rng.normal() * s;
  centers_ = Param("optlad.centers", {g, k, dg});
  for (auto& v : centers_.value.data) v = rng.normal() * 0.1;
  assign_w_ = Param("optlad.assign_w", {g, k, dg});
  assign_b_ = Param("optlad.assign_b", {g, k});
  gem_p_ = Param("optlad.gem_p", {g});
  gem_p_.value.fill(config_.gem_p);
  // Until init_centers runs, tie the assignment to the random centres.
  for (std::size_t gi = 0; gi < g; ++gi)
    for (std::size_t ki = 0; ki < k; ++ki) {
      double nrm = 0.0;
      for (std::size_t j = 0; j < dg; ++j) {
        const double cv = centers_.value.data[(gi * k + ki) * dg + j];
        assign_w_.value.data[(gi * k + ki) * dg + j] = 2.0 * config_.sharpness * cv;
        nrm += cv * cv;
      }
      assign_b_.value.data[gi * k + ki] = -config_.sharpness * nrm;
    }
}

namespace {

Tensor map_to_pixels(const Tensor& fmap) {
  const std::size_t c = fmap.dim(0), hw = fmap.dim(1) * fmap.dim(2);
  Tensor px({hw, c});
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t i = 0; i < hw; ++i) px.data[i * c + ch] = fmap.data[ch * hw + i];
  return px;
}

// Row-wise L2; all-zero rows stay zero (norm recorded as 0).
Tensor normalize_rows(const Tensor& x, std::vector<double>& norms) {
  Tensor y = x;
  const std::size_t n = x.dim(0), c = x.dim(1);
  norms.assign(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const double s = l2_norm(x.row(i));
    norms[i] = s;
    if (s > 0.0)
      for (std::size_t j = 0; j < c; ++j) y.data[i * c + j] /= s;
  }
  return y;
}

}  // namespace

Tensor OptLad::expand(const Tensor& fmap) const {
  if (fmap.rank() != 3 || fmap.dim(0) != config_.channels) {
    throw std::invalid_argument("optlad: expected " + std::to_string(config_.channels) + " x H x W map, got " +
                                shape_str(fmap.shape));
  }
  Tensor px = map_to_pixels(fmap);
  if (config_.normalize_input) {
    std::vector<double> norms;
    px = normalize_rows(px, norms);
  }
  return layers::matmul(px, expand_.value);
}

std::vector<double> OptLad::forward(const Tensor& fmap, Cache* cache) const {
  const std::size_t g_count = config_.groups, k_count = config_.clusters, dg = config_.group_dim(),
                    e = config_.expanded();
  if (fmap.rank() != 3 || fmap.dim(0) != config_.channels) {
    throw std::invalid_argument("optlad: expected " + std::to_string(config_.channels) + " x H x W map, got " +
                                shape_str(fmap.shape));
  }
  Tensor raw = map_to_pixels(fmap);
  std::vector<double> pixel_norm;
  Tensor pixels = config_.normalize_input ? normalize_rows(raw, pixel_norm) : raw;
  Tensor xhat = layers::matmul(pixels, expand_.value);
  const std::size_t d = xhat.dim(0);

  Tensor alpha({g_count, d, k_count});
  Tensor mass({g_count, d}), gem({g_count, d});
  Tensor group_vlad({g_count, dg, k_count});
  std::vector<double> beta(g_count), beta_logit(g_count);
  std::vector<double> logits(k_count);
  for (std::size_t g = 0; g < g_count; ++g) {
    const double p = gem_p_.value.data[g];
    if (!(p > 0.0)) throw std::invalid_argument("optlad: GeM exponent p_g must be > 0");
    double gem_sum = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
      const double* x = &xhat.data[i * e + g * dg];
      for (std::size_t k = 0; k < k_count; ++k) {
        const double* w = &assign_w_.value.data[(g * k_count + k) * dg];
        double s = assign_b_.value.data[g * k_count + k];
        for (std::size_t j = 0; j < dg; ++j) s += w[j] * x[j];
        logits[k] = s;
      }
      auto a = softmax(logits);
      std::copy(a.begin(), a.end(), &alpha.data[(g * d + i) * k_count]);
      double m = 0.0;
      for (std::size_t j = 0; j < dg; ++j) m += std::pow(std::max(x[j], config_.gem_eps), p);
      m /= static_cast<double>(dg);
      mass.data[g * d + i] = m;
      const double gm = std::pow(m, 1.0 / p);
      gem.data[g * d + i] = gm;
      gem_sum += gm;
      for (std::size_t k = 0; k < k_count; ++k) {
        const double* c = &centers_.value.data[(g * k_count + k) * dg];
        for (std::size_t j = 0; j < dg; ++j) group_vlad.data[(g * dg + j) * k_count + k] += a[k] * (x[j] - c[j]);
      }
    }
    beta_logit[g] = gem_sum / static_cast<double>(d);
    beta[g] = sigmoid(beta_logit[g]);
  }

  Tensor vlad({dg, k_count});
  for (std::size_t g = 0; g < g_count; ++g)
    for (std::size_t t = 0; t < dg * k_count; ++t) vlad.data[t] += beta[g] * group_vlad.data[g * dg * k_count + t];

  std::vector<double> col_norm(k_count, 0.0);
  Tensor intra = vlad;
  for (std::size_t k = 0; k < k_count; ++k) {
    double s = 0.0;
    for (std::size_t j = 0; j < dg; ++j) s += vlad.data[j * k_count + k] * vlad.data[j * k_count + k];
    col_norm[k] = std::sqrt(s);
    if (col_norm[k] > 0.0)
      for (std::size_t j = 0; j < dg; ++j) intra.data[j * k_count + k] /= col_norm[k];
  }
  std::vector<double> out(dg * k_count);
  for (std::size_t k = 0; k < k_count; ++k)
    for (std::size_t j = 0; j < dg; ++j) out[k * dg + j] = intra.data[j * k_count + k];
  const double nrm = l2_norm(out);
  if (!(nrm > 0.0)) throw std::domain_error("optlad: aggregated descriptor is all zero");
  for (auto& v : out) v /= nrm;

  if (cache) {
    cache->height = fmap.dim(1);
    cache->width = fmap.dim(2);
    cache->raw_pixels = std::move(raw);
    cache->pixel_norm = std::move(pixel_norm);
    cache->pixels = std::move(pixels);
    cache->expanded = std::move(xhat);
    cache->alpha = std::move(alpha);
    cache->gem_mass = std::move(mass);
    cache->gem = std::move(gem);
    cache->beta = beta;
    cache->beta_logit = beta_logit;
    cache->group_vlad = std::move(group_vlad);
    cache->vlad = std::move(vlad);
    cache->column_norm = col_norm;
    cache->intra = std::move(intra);
    cache->global_norm = nrm;
    cache->output = out;
  }
  return out;
}

Tensor OptLad::backward(const Cache& cache, std::span<const double> grad_out) {
  const std::size_t g_count = config_.groups, k_count = config_.clusters, dg = config_.group_dim(),
                    e = config_.expanded(), c_in = config_.channels;
  const std::size_t d = cache.expanded.dim(0);

  // global L2
  const double proj = dot(cache.output, grad_out);
  std::vector<double> g_flat(dg * k_count);
  for (std::size_t t = 0; t < g_flat.size(); ++t)
    g_flat[t] = (grad_out[t] - cache.output[t] * proj) / cache.global_norm;

  // intra-normalisation
  Tensor g_vlad({dg, k_count});
  for (std::size_t k = 0; k < k_count; ++k) {
    const double n = cache.column_norm[k];
    if (!(n > 0.0)) continue;
    double s = 0.0;
    for (std::size_t j = 0; j < dg; ++j) s += cache.intra.data[j * k_count + k] * g_flat[k * dg + j];
    for (std::size_t j = 0; j < dg; ++j)
      g_vlad.data[j * k_count + k] = (g_flat[k * dg + j] - cache.intra.data[j * k_count + k] * s) / n;
  }

  Tensor g_xhat({d, e});
  std::vector<double> g_alpha(k_count), g_logit(k_count);
  for (std::size_t g = 0; g < g_count; ++g) {
    const double beta = cache.beta[g];
    const double* vg = &cache.group_vlad.data[g * dg * k_count];
    double g_beta = 0.0;
    for (std::size_t t = 0; t < dg * k_count; ++t) g_beta += g_vlad.data[t] * vg[t];
    const double g_gem = g_beta * beta * (1.0 - beta) / static_cast<double>(d);
    const double p = gem_p_.value.data[g];
    double g_p = 0.0;

    for (std::size_t i = 0; i < d; ++i) {
      const double* x = &cache.expanded.data[i * e + g * dg];
      double* gx = &g_xhat.data[i * e + g * dg];
      const double* a = &cache.alpha.data[(g * d + i) * k_count];
      for (std::size_t k = 0; k < k_count; ++k) {
        const double* c = &centers_.value.data[(g * k_count + k) * dg];
        double* gc = &centers_.grad.data[(g * k_count + k) * dg];
        double ga = 0.0;
        for (std::size_t j = 0; j < dg; ++j) {
          const double gv = beta * g_vlad.data[j * k_count + k];
          ga += gv * (x[j] - c[j]);
          gx[j] += a[k] * gv;
          gc[j] -= a[k] * gv;
        }
        g_alpha[k] = ga;
      }
      double ag = 0.0;
      for (std::size_t k = 0; k < k_count; ++k) ag += a[k] * g_alpha[k];
      for (std::size_t k = 0; k < k_count; ++k) {
        g_logit[k] = a[k] * (g_alpha[k] - ag);
        const double* w = &assign_w_.value.data[(g * k_count + k) * dg];
        double* gw = &assign_w_.grad.data[(g * k_count + k) * dg];
        assign_b_.grad.data[g * k_count + k] += g_logit[k];
        for (std::size_t j = 0; j < dg; ++j) {
          gw[j] += g_logit[k] * x[j];
          gx[j] += g_logit[k] * w[j];
        }
      }

      if (g_gem != 0.0) {
        const double m = cache.gem_mass.data[g * d + i];
        const double gm = cache.gem.data[g * d + i];
        const double pre = std::pow(m, 1.0 / p - 1.0) / static_cast<double>(dg);
        double dm_dp = 0.0;
        for (std::size_t j = 0; j < dg; ++j) {
          const double r = std::max(x[j], config_.gem_eps);
          const double rp = std::pow(r, p);
          dm_dp += rp * std::log(r);
          if (x[j] > config_.gem_eps) gx[j] += g_gem * pre * rp / r;
        }
        dm_dp /= static_cast<double>(dg);
        g_p += g_gem * gm * (-std::log(m) / (p * p) + dm_dp / (p * m));
      }
    }
    gem_p_.grad.data[g] += g_p;
  }

  Tensor g_pixels;
  layers::linear_backward(cache.pixels, expand_.value, g_xhat, expand_.grad, nullptr, &g_pixels);
  if (config_.normalize_input) {
    for (std::size_t i = 0; i < d; ++i) {
      const double n = cache.pixel_norm[i];
      double* g = &g_pixels.data[i * c_in];
      if (!(n > 0.0)) {
        std::fill(g, g + c_in, 0.0);
        continue;
      }
      const double* u = &cache.pixels.data[i * c_in];
      double s = 0.0;
      for (std::size_t j = 0; j < c_in; ++j) s += u[j] * g[j];
      for (std::size_t j = 0; j < c_in; ++j) g[j] = (g[j] - u[j] * s) / n;
    }
  }
  const std::size_t hw = cache.height * cache.width;
  Tensor g_map({c_in, cache.height, cache.width});
  for (std::size_t ch = 0; ch < c_in; ++ch)
    for (std::size_t i = 0; i < hw; ++i) g_map.data[ch * hw + i] = g_pixels.data[i * c_in + ch];
  return g_map;
}

void OptLad::init_centers(const Tensor& samples, Rng& rng, std::size_t iterations) {
  const std::size_t g_count = config_.groups, k_count = config_.clusters, dg = config_.group_dim(),
                    e = config_.expanded();
  const std::size_t n = samples.dim(0);
  if (n == 0 || samples.dim(1) != e) throw std::invalid_argument("optlad: k-means samples must be n x lambda C");
  std::vector<double> cent(k_count * dg);
  std::vector<std::size_t> assign(n);
  for (std::size_t g = 0; g < g_count; ++g) {
    // random-draw seeding (with replacement when n < K)
    std::vector<std::size_t> seeds =
        n >= k_count ? rng.sample_without_replacement(n, k_count) : std::vector<std::size_t>{};
    for (std::size_t k = 0; k < k_count; ++k) {
      const std::size_t src = n >= k_count ? seeds[k] : rng.uniform_index(n);
      for (std::size_t j = 0; j < dg; ++j)
        cent[k * dg + j] = samples.data[src * e + g * dg + j] + (n >= k_count ? 0.0 : 1e-3 * rng.normal());
    }
    for (std::size_t it = 0; it < iterations; ++it) {
      for (std::size_t i = 0; i < n; ++i) {
        const double* x = &samples.data[i * e + g * dg];
        double best = INFINITY;
        for (std::size_t k = 0; k < k_count; ++k) {
          double s = 0.0;
          for (std::size_t j = 0; j < dg; ++j) {
            const double t = x[j] - cent[k * dg + j];
            s += t * t;
          }
          if (s < best) {
            best = s;
            assign[i] = k;
          }
        }
      }
      std::vector<double> sum(k_count * dg, 0.0);
      std::vector<std::size_t> cnt(k_count, 0);
      for (std::size_t i = 0; i < n; ++i) {
        ++cnt[assign[i]];
        for (std::size_t j = 0; j < dg; ++j) sum[assign[i] * dg + j] += samples.data[i * e + g * dg + j];
      }
      for (std::size_t k = 0; k < k_count; ++k) {
        if (cnt[k] == 0) continue;  // empty cluster keeps its centre
        for (std::size_t j = 0; j < dg; ++j) cent[k * dg + j] = sum[k * dg + j] / static_cast<double>(cnt[k]);
      }
    }
    for (std::size_t k = 0; k < k_count; ++k) {
      double nrm = 0.0;
      for (std::size_t j = 0; j < dg; ++j) {
        const double cv = cent[k * dg + j];
        centers_.value.data[(g * k_count + k) * dg + j] = cv;
        assign_w_.value.data[(g * k_count + k) * dg + j] = 2.0 * config_.sharpness * cv;
        nrm += cv * cv;
      }
      assign_b_.value.data[g * k_count + k] = -config_.sharpness * nrm;
    }
  }
}

void OptLad::clamp_exponents() {
  for (auto& p : gem_p_.value.data) p = std::max(p, 1.0);
}

ParamList OptLad::params() { return {&expand_, &centers_, &assign_w_, &assign_b_, &gem_p_}; }

// ---------------------------------------------------------------------------

std::vector<double> soft_assign(std::span<const double> descriptor, std::size_t group, const OptLad& model) {
  const auto& cfg = model.config();
  const std::size_t k_count = cfg.clusters, dg = cfg.group_dim();
  if (descriptor.size() != dg) throw std::invalid_argument("soft_assign: descriptor length != D'");
  require_finite(descriptor, "soft_assign descriptor");
  std::vector<double> logits(k_count);
  for (std::size_t k = 0; k < k_count; ++k) {
    const double* w = &model.assign_weights().value.data[(group * k_count + k) * dg];
    double s = model.assign_biases().value.data[group * k_count + k];
    for (std::size_t j = 0; j < dg; ++j) s += w[j] * descriptor[j];
    logits[k] = s;
  }
  return softmax(logits);
}

double group_weight(const Tensor& descriptors, double p, double eps) {
  if (!(p > 0.0)) throw std::invalid_argument("group_weight: GeM exponent must be > 0");
  const std::size_t d = descriptors.dim(0), dg = descriptors.dim(1);
  double total = 0.0;
  for (std::size_t i = 0; i < d; ++i) {
    double m = 0.0;
    for (std::size_t j = 0; j < dg; ++j) m += std::pow(std::max(descriptors.data[i * dg + j], eps), p);
    total += std::pow(m / static_cast<double>(dg), 1.0 / p);
  }
  return sigmoid(total / static_cast<double>(d));
}

Tensor vlad_aggregate(const Tensor& descriptors, const OptLad& model, std::span<const double> beta_override) {
  const auto& cfg = model.config();
  const std::size_t g_count = cfg.groups, k_count = cfg.clusters, dg = cfg.group_dim(), e = cfg.expanded();
  if (descriptors.rank() != 2 || descriptors.dim(1) != e) {
    throw std::invalid_argument("vlad_aggregate: descriptors must be D x " + std::to_string(e));
  }
  if (!beta_override.empty() && beta_override.size() != g_count) {
    throw std::invalid_argument("vlad_aggregate: beta override needs one value per group");
  }
  const std::size_t d = descriptors.dim(0);
  Tensor out({dg, k_count});
  Tensor group({d, dg});
  for (std::size_t g = 0; g < g_count; ++g) {
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = 0; j < dg; ++j) group.data[i * dg + j] = descriptors.data[i * e + g * dg + j];
    const double beta = beta_override.empty()
                            ? group_weight(group, model.gem_exponents().value.data[g], cfg.gem_eps)
                            : beta_override[g];
    for (std::size_t i = 0; i < d; ++i) {
      auto a = soft_assign(group.row(i), g, model);
      for (std::size_t k = 0; k < k_count; ++k) {
        const double* c = &model.centers().value.data[(g * k_count + k) * dg];
        for (std::size_t j = 0; j < dg; ++j)
          out.data[j * k_count + k] += beta * a[k] * (group.data[i * dg + j] - c[j]);
      }
    }
  }
  return out;
}

std::vector<double> normalize_descriptor(const Tensor& vlad) {
  const std::size_t dg = vlad.dim(0), k_count = vlad.dim(1);
  require_finite(vlad.data, "normalize_descriptor input");
  std::vector<double> out(dg * k_count);
  for (std::size_t k = 0; k < k_count; ++k) {
    double s = 0.0;
    for (std::size_t j = 0; j < dg; ++j) s += vlad.data[j * k_count + k] * vlad.data[j * k_count + k];
    const double n = std::sqrt(s);
    for (std::size_t j = 0; j < dg; ++j) out[k * dg + j] = n > 0.0 ? vlad.data[j * k_count + k] / n : 0.0;
  }
  const double nrm = l2_norm(out);
  if (!(nrm > 0.0)) throw std::domain_error("normalize_descriptor: all-zero VLAD matrix");
  for (auto& v : out) v /= nrm;
  return out;
}

// ---------------------------------------------------------------------------

PcaFitResult pca_fit(const std::vector<std::vector<double>>& samples, std::size_t output_dim, double floor) {
  if (samples.empty()) throw std::invalid_argument("pca_fit: no samples");
  const std::size_t n = samples.size(), d = samples.front().size();
  if (output_dim == 0 || output_dim > d) {
    throw std::invalid_argument("pca_fit: output dimension " + std::to_string(output_dim) + " must be in [1, " +
                                std::to_string(d) + "]");
  }
  PcaFitResult res;
  if (n <= output_dim) {
    res.warnings.push_back("pca_fit: " + std::to_string(n) + " samples for " + std::to_string(output_dim) +
                           " output dimensions; trailing axes are noise");
  }
  Eigen::MatrixXd x(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
  for (std::size_t i = 0; i < n; ++i) {
    if (samples[i].size() != d) throw std::invalid_argument("pca_fit: ragged sample matrix");
    for (std::size_t j = 0; j < d; ++j) x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = samples[i][j];
  }
  Eigen::VectorXd mean = x.colwise().mean();
  x.rowwise() -= mean.transpose();
  Eigen::MatrixXd cov = (x.transpose() * x) / static_cast<double>(n);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(cov);
  if (solver.info() != Eigen::Success) throw std::runtime_error("pca_fit: eigen decomposition failed");

  res.params.mean.assign(mean.data(), mean.data() + d);
  res.params.projection = Tensor({output_dim, d});
  res.params.eigenvalues.resize(output_dim);
  std::size_t floored = 0;
  for (std::size_t r = 0; r < output_dim; ++r) {
    const auto col = static_cast<Eigen::Index>(d - 1 - r);  // eigenvalues ascend
    double lam = solver.eigenvalues()(col);
    if (lam < floor) {
      lam = floor;
      ++floored;
    }
    Eigen::VectorXd v = solver.eigenvectors().col(col);
    Eigen::Index arg;
    v.cwiseAbs().maxCoeff(&arg);
    if (v(arg) < 0) v = -v;
    const double s = 1.0 / std::sqrt(lam);
    res.params.eigenvalues[r] = lam;
    for (std::size_t j = 0; j < d; ++j) res.params.projection.data[r * d + j] = v(static_cast<Eigen::Index>(j)) * s;
  }
  if (floored) {
    res.warnings.push_back("pca_fit: covariance is rank deficient; " + std::to_string(floored) +
                           " eigenvalues floored at " + std::to_string(floor));
  }
  return res;
}

std::vector<double> pca_project(std::span<const double> v, const PcaParams& pca) {
  const std::size_t d = pca.input_dim(), m = pca.output_dim();
  if (v.size() != d) {
    throw std::invalid_argument("pca: input length " + std::to_string(v.size()) + " != " + std::to_string(d));
  }
  std::vector<double> centered(d);
  for (std::size_t j = 0; j < d; ++j) centered[j] = v[j] - pca.mean[j];
  std::vector<double> out(m);
  for (std::size_t r = 0; r < m; ++r) out[r] = dot({&pca.projection.data[r * d], d}, centered);
  return out;
}

std::vector<double> pca_apply(std::span<const double> v, const PcaParams& pca) {
  auto out = pca_project(v, pca);
  const double n = l2_norm(out);
  if (!(n > 0.0)) throw std::domain_error("pca_apply: projected descriptor is zero");
  for (auto& x : out) x /= n;
  return out;
}

ParamCountReport param_count_report(std::size_t channels, std::size_t expansion, std::size_t groups,
                                    std::size_t clusters, std::size_t netvlad_clusters, std::size_t output_dim) {
  OptLadConfig cfg;
  cfg.channels = channels;
  cfg.expansion = expansion;
  cfg.groups = groups;
  cfg.clusters = clusters;
  cfg.validate();
  ParamCountReport r;
  r.channels = channels;
  r.expansion = expansion;
  r.groups = groups;
  r.clusters = clusters;
  r.netvlad_clusters = netvlad_clusters;
  r.output_dim = output_dim;
  r.optlad_dim = cfg.descriptor_dim();
  r.netvlad_dim = channels * netvlad_clusters;
  r.netvlad_same_k_dim = channels * clusters;
  r.optlad_pca = r.optlad_dim * output_dim;
  r.optlad_pca_with_mean = r.optlad_pca + r.optlad_dim;
  r.netvlad_pca = r.netvlad_dim * output_dim;
  r.netvlad_pca_with_mean = r.netvlad_pca + r.netvlad_dim;
  r.netvlad_same_k_pca = r.netvlad_same_k_dim * output_dim;
  r.netvlad_same_k_pca_with_mean = r.netvlad_same_k_pca + r.netvlad_same_k_dim;
  const std::size_t dg = cfg.group_dim();
  r.optlad_layer = channels * cfg.expanded() + 2 * groups * clusters * dg + groups * clusters + groups;
  r.netvlad_layer = 2 * netvlad_clusters * channels + netvlad_clusters;
  r.pca_ratio = static_cast<double>(r.netvlad_same_k_pca) / static_cast<double>(r.optlad_pca);
  return r;
}

}  // namespace clusvpr
