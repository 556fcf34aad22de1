#include "clusvpr/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include "clusvpr/checkpoint.hpp"
#include "clusvpr/datagen.hpp"

namespace clusvpr {

MiningResult mine_triplets(const DescriptorIndex& index, std::span<const double> query_descriptor,
                           const GeoTag& query_geo, const MiningConfig& config, Rng& rng,
                           const std::string& query_id) {
  MiningResult res;
  const auto ranked = rank_all(index, query_descriptor);
  std::vector<std::size_t> in_radius, far_in_pool, far_all;
  std::size_t rank = 0;
  for (const auto& hit : ranked) {
    if (!query_id.empty() && hit.id == query_id) continue;
    const double d = geo_distance(query_geo, index.records[hit.record].geo);
    if (d <= config.positive_radius) in_radius.push_back(hit.record);
    if (d > config.negative_radius) {
      if (rank < config.pool) far_in_pool.push_back(hit.record);
      far_all.push_back(hit.record);
    }
    ++rank;
  }
  if (in_radius.empty()) {
    res.warnings.push_back("query " + query_id + ": no gallery item within " +
                           std::to_string(config.positive_radius) + " m; skipped");
    return res;
  }
  Triplet t;
  t.positive = in_radius.front();
  for (std::size_t i = 1; i < in_radius.size() && t.high_ranked.size() < config.high_ranked; ++i)
    t.high_ranked.push_back(in_radius[i]);

  const std::vector<std::size_t>* pool = &far_in_pool;
  if (far_in_pool.size() < config.negatives) {
    res.warnings.push_back("query " + query_id + ": only " + std::to_string(far_in_pool.size()) +
                           " negatives in the top-" + std::to_string(config.pool) + " pool; widened to the gallery");
    pool = &far_all;
  }
  const std::size_t m = std::min(config.negatives, pool->size());
  if (m == 0) {
    res.warnings.push_back("query " + query_id + ": no gallery item beyond " + std::to_string(config.negative_radius) +
                           " m; skipped");
    return res;
  }
  if (m < config.negatives) {
    res.warnings.push_back("query " + query_id + ": using " + std::to_string(m) + " negatives");
  }
  for (std::size_t j : rng.sample_without_replacement(pool->size(), m)) t.negatives.push_back((*pool)[j]);
  res.triplet = std::move(t);
  return res;
}

namespace {

void require_unit(std::span<const double> v, const char* what) {
  if (std::abs(l2_norm(v) - 1.0) > 1e-6) throw std::invalid_argument(std::string("triplet loss: non-unit ") + what);
}

void check_triplet_inputs(std::span<const double> q, std::span<const double> p,
                          const std::vector<std::vector<double>>& negs) {
  require_unit(q, "query");
  require_unit(p, "positive");
  for (const auto& n : negs) require_unit(n, "negative");
  if (negs.empty()) throw std::invalid_argument("triplet loss: need at least one negative");
}

double softplus(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

}  // namespace

double softmax_triplet_loss(std::span<const double> query, std::span<const double> positive,
                            const std::vector<std::vector<double>>& negatives) {
  check_triplet_inputs(query, positive, negatives);
  const double sp = dot(query, positive);
  double loss = 0.0;
  for (const auto& n : negatives) {
    const double sn = dot(query, n);
    const double m = std::max(sp, sn);
    loss += -(sp - m) + std::log(std::exp(sp - m) + std::exp(sn - m));
  }
  return loss;
}

double softmax_triplet_loss_log1p(std::span<const double> query, std::span<const double> positive,
                                  const std::vector<std::vector<double>>& negatives) {
  check_triplet_inputs(query, positive, negatives);
  const double sp = dot(query, positive);
  double loss = 0.0;
  for (const auto& n : negatives) loss += softplus(dot(query, n) - sp);
  return loss;
}

TripletLossGrad softmax_triplet_loss_grad(std::span<const double> query, std::span<const double> positive,
                                          const std::vector<std::vector<double>>& negatives) {
  TripletLossGrad g;
  g.loss = softmax_triplet_loss(query, positive, negatives);
  const std::size_t d = query.size();
  g.query.assign(d, 0.0);
  g.positive.assign(d, 0.0);
  const double sp = dot(query, positive);
  double g_sp = 0.0;
  for (const auto& n : negatives) {
    const double s = sigmoid(dot(query, n) - sp);  // dL/d s_n
    g_sp -= s;
    std::vector<double> gn(d);
    for (std::size_t j = 0; j < d; ++j) {
      gn[j] = s * query[j];
      g.query[j] += s * n[j];
    }
    g.negatives.push_back(std::move(gn));
  }
  for (std::size_t j = 0; j < d; ++j) {
    g.query[j] += g_sp * positive[j];
    g.positive[j] = g_sp * query[j];
  }
  return g;
}

double total_loss(double triplet_loss, std::span<const double> pyramid_losses, double lambda_s) {
  if (lambda_s == 0.0) return triplet_loss;
  double s = 0.0;
  for (double v : pyramid_losses) s += v;
  return triplet_loss + lambda_s * s;
}

// ---------------------------------------------------------------------------

Sgd::Sgd(ParamList params, double lr, double momentum, double weight_decay)
    : params_(std::move(params)), lr_(lr), momentum_(momentum), weight_decay_(weight_decay) {
  reset();
}

void Sgd::reset() {
  velocity_.clear();
  for (Param* p : params_) velocity_.emplace_back(p->value.numel(), 0.0);
}

void Sgd::step() {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& val = params_[i]->value.data;
    const auto& grad = params_[i]->grad.data;
    auto& vel = velocity_[i];
    for (std::size_t j = 0; j < val.size(); ++j) {
      vel[j] = momentum_ * vel[j] + grad[j] + weight_decay_ * val[j];
      val[j] -= lr_ * vel[j];
    }
  }
}

void TrainConfig::validate() const {
  if (!(learning_rate >= 0.0) || !(weight_decay >= 0.0) || !(momentum >= 0.0)) {
    throw std::invalid_argument("train: learning rate, weight decay and momentum must be >= 0");
  }
  if (batch_size == 0) throw std::invalid_argument("train: batch size must be >= 1");
  if (!(mining.positive_radius > 0.0) || !(mining.negative_radius > 0.0)) {
    throw std::invalid_argument("train: geo radii must be positive");
  }
  if (mining.negatives == 0) throw std::invalid_argument("train: need M >= 1 negatives");
  if (mining.pool < mining.negatives) throw std::invalid_argument("train: candidate pool must be >= M");
  schedule.validate();
}

std::vector<Sample> load_samples(const std::filesystem::path& manifest) {
  std::vector<Sample> out;
  const auto base = manifest.parent_path();
  for (auto& row : read_manifest(manifest)) {
    Sample s;
    s.image = load_image(base / row.path);
    s.row = std::move(row);
    out.push_back(std::move(s));
  }
  return out;
}

TrainingData load_training_data(const std::filesystem::path& dir) {
  TrainingData d;
  d.gallery = load_samples(dir / "gallery.csv");
  d.train_queries = load_samples(dir / "train_queries.csv");
  d.test_queries = load_samples(dir / "test_queries.csv");
  return d;
}

// ---------------------------------------------------------------------------

namespace {

struct ImageState {
  const Tensor* image = nullptr;
  Backbone::Cache backbone;
  Tensor fmap;
  Tensor grad;
};

struct Encoded {
  std::vector<double> rep;
  ClusVpr::EncodeCache cache;
};

}  // namespace

QueryLoss query_loss(ClusVpr& model, const QueryExample& ex, std::optional<double> grad_scale) {
  const bool train = grad_scale.has_value();
  const double scale = grad_scale.value_or(0.0);

  std::vector<ImageState> states;
  std::map<const Tensor*, std::size_t> slot;
  auto state_of = [&](const Tensor* img) -> std::size_t {
    auto it = slot.find(img);
    if (it != slot.end()) return it->second;
    ImageState st;
    st.image = img;
    st.fmap = model.features(*img, train ? &st.backbone : nullptr);
    if (train) st.grad = Tensor(st.fmap.shape);
    states.push_back(std::move(st));
    slot.emplace(img, states.size() - 1);
    return states.size() - 1;
  };

  const std::size_t qs = state_of(ex.query);
  const std::size_t ps = state_of(ex.positive);
  std::vector<std::size_t> ns;
  for (const Tensor* n : ex.negatives) ns.push_back(state_of(n));

  auto encode = [&](const Tensor& fmap) {
    Encoded e;
    e.rep = model.encode_map(fmap, train ? &e.cache : nullptr);
    return e;
  };
  Encoded fq = encode(states[qs].fmap);
  Encoded fp = encode(states[ps].fmap);
  std::vector<Encoded> fn;
  std::vector<std::vector<double>> neg_reps;
  for (auto s : ns) {
    fn.push_back(encode(states[s].fmap));
    neg_reps.push_back(fn.back().rep);
  }

  QueryLoss out;
  TripletLossGrad trip = softmax_triplet_loss_grad(fq.rep, fp.rep, neg_reps);
  out.triplet = trip.loss;

  std::vector<double> pyramid_parts;
  const bool use_pyramid =
      ex.lambda_s > 0.0 && std::any_of(ex.targets.begin(), ex.targets.end(), [](auto* t) { return t != nullptr; });
  if (use_pyramid) {
    const PatchPyramid qpyr = build_pyramid(states[qs].fmap, PatchRole::query);
    std::vector<Encoded> qpatch;
    std::vector<std::vector<double>> qreps;
    for (const auto& patch : qpyr.patches) {
      qpatch.push_back(encode(patch));
      qreps.push_back(qpatch.back().rep);
    }
    std::vector<std::vector<double>> g_qreps(qreps.size(), std::vector<double>(qreps.front().size(), 0.0));

    for (std::size_t k = 0; k < ex.high_ranked.size(); ++k) {
      const PyramidScores* target = k < ex.targets.size() ? ex.targets[k] : nullptr;
      if (!target) continue;
      const std::size_t hs = state_of(ex.high_ranked[k]);
      const PatchPyramid ppyr = build_pyramid(states[hs].fmap, PatchRole::positive);
      std::vector<Encoded> ppatch;
      std::vector<std::vector<double>> preps;
      for (const auto& patch : ppyr.patches) {
        ppatch.push_back(encode(patch));
        preps.push_back(ppatch.back().rep);
      }
      PyramidScores current = pyramid_scores(qreps, preps, 1.0);
      pyramid_parts.push_back(pyramid_loss(current, *target));
      if (!train) continue;

      auto g_scores = pyramid_loss_grad(current, *target);
      auto g_logits = softmax_backward(current.values, g_scores, 1.0);
      const double coef = scale * ex.lambda_s;
      const std::size_t np = preps.size(), dim = preps.front().size();
      std::vector<std::vector<double>> g_preps(np, std::vector<double>(dim, 0.0));
      for (std::size_t a = 0; a < qreps.size(); ++a)
        for (std::size_t b = 0; b < np; ++b) {
          const double g = coef * g_logits[a * np + b];
          for (std::size_t j = 0; j < dim; ++j) {
            g_qreps[a][j] += g * preps[b][j];
            g_preps[b][j] += g * qreps[a][j];
          }
        }
      for (std::size_t b = 0; b < np; ++b) {
        Tensor gpatch = model.encode_map_backward(ppatch[b].cache, g_preps[b]);
        scatter_patch_grad(states[hs].grad, gpatch, ppyr.composition.cells[b], ppyr.composition.grid);
      }
    }
    if (train) {
      for (std::size_t a = 0; a < qpatch.size(); ++a) {
        Tensor gpatch = model.encode_map_backward(qpatch[a].cache, g_qreps[a]);
        scatter_patch_grad(states[qs].grad, gpatch, qpyr.composition.cells[a], qpyr.composition.grid);
      }
    }
  }
  for (double v : pyramid_parts) out.pyramid += v;
  out.total = total_loss(out.triplet, pyramid_parts, ex.lambda_s);

  if (train) {
    auto scaled = [&](const std::vector<double>& g) {
      std::vector<double> s(g);
      for (auto& v : s) v *= scale;
      return s;
    };
    {
      Tensor g = model.encode_map_backward(fq.cache, scaled(trip.query));
      for (std::size_t i = 0; i < g.numel(); ++i) states[qs].grad.data[i] += g.data[i];
      g = model.encode_map_backward(fp.cache, scaled(trip.positive));
      for (std::size_t i = 0; i < g.numel(); ++i) states[ps].grad.data[i] += g.data[i];
      for (std::size_t n = 0; n < fn.size(); ++n) {
        g = model.encode_map_backward(fn[n].cache, scaled(trip.negatives[n]));
        for (std::size_t i = 0; i < g.numel(); ++i) states[ns[n]].grad.data[i] += g.data[i];
      }
    }
    for (auto& st : states) model.backbone().backward(st.backbone, st.grad);
  }
  return out;
}

// ---------------------------------------------------------------------------

DescriptorIndex embed_index(const ClusVpr& model, const std::vector<Sample>& samples, bool apply_pca) {
  DescriptorIndex idx;
  for (const auto& s : samples) {
    auto d = apply_pca ? model.describe(s.image) : model.embed(s.image);
    IndexRecord r;
    r.id = s.row.id;
    r.geo = s.row.geo();
    r.descriptor.assign(d.begin(), d.end());
    idx.add(std::move(r));
  }
  return idx;
}

std::vector<EvalQuery> embed_queries(const ClusVpr& model, const std::vector<Sample>& samples, bool apply_pca) {
  std::vector<EvalQuery> out;
  for (const auto& s : samples)
    out.push_back({s.row.id, apply_pca ? model.describe(s.image) : model.embed(s.image), s.row.geo()});
  return out;
}

void init_optlad_centers(ClusVpr& model, const std::vector<const Tensor*>& images, Rng& rng) {
  std::vector<double> rows;
  std::size_t width = 0;
  for (const Tensor* img : images) {
    Tensor x = model.features(*img);
    for (const auto& c : model.cwtnets()) x = c.forward(x);
    Tensor e = model.optlad().expand(x);
    width = e.dim(1);
    rows.insert(rows.end(), e.data.begin(), e.data.end());
  }
  if (rows.empty()) throw std::invalid_argument("init_optlad_centers: no images");
  const std::size_t n = rows.size() / width;
  model.optlad().init_centers(Tensor({n, width}, std::move(rows)), rng);
}

std::vector<std::string> fit_model_pca(ClusVpr& model, const std::vector<Sample>& gallery) {
  std::vector<std::vector<double>> emb;
  for (const auto& s : gallery) emb.push_back(model.embed(s.image));
  const std::size_t dim = std::min(model.config().pca_dim, emb.front().size());
  auto fit = pca_fit(emb, dim);
  model.set_pca(std::move(fit.params));
  return fit.warnings;
}

namespace {

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.10g", v);
  return buf;
}

double heldout_recall1(const ClusVpr& model, const TrainingData& data, double threshold, bool apply_pca) {
  auto idx = embed_index(model, data.gallery, apply_pca);
  auto q = embed_queries(model, data.test_queries, apply_pca);
  return recall_at_k(idx, q, {1}, threshold).recall.front();
}

}  // namespace

TrainResult train_generations(const TrainingData& data, const ModelConfig& model_config, const TrainConfig& config,
                              const std::filesystem::path& out_dir) {
  config.validate();
  if (data.gallery.empty() || data.train_queries.empty()) throw std::invalid_argument("train: empty gallery or queries");
  std::filesystem::create_directories(out_dir);

  // RNG draw order: parameter init, k-means sampling/seeding, then per epoch
  // the query shuffle followed by negative sampling in processing order.
  Rng rng(config.seed);
  ClusVpr model(model_config, rng);
  {
    std::vector<std::size_t> pick = rng.sample_without_replacement(
        data.gallery.size(), std::min(config.kmeans_images, data.gallery.size()));
    std::vector<const Tensor*> imgs;
    for (auto i : pick) imgs.push_back(&data.gallery[i].image);
    init_optlad_centers(model, imgs, rng);
  }

  TrainResult result;
  result.metrics_log = out_dir / "metrics.csv";
  std::ofstream log(result.metrics_log);
  log << kMetricsHeader << '\n';

  for (const auto& w : fit_model_pca(model, data.gallery)) std::cerr << "warning: " << w << '\n';
  result.initial_checkpoint = out_dir / "init.ckpt";
  save_model(model, result.initial_checkpoint);
  result.initial_recall1 = heldout_recall1(model, data, config.eval_threshold, true);

  const auto& sched = config.schedule;
  Sgd opt(model.params(), config.learning_rate, config.momentum, config.weight_decay);
  std::size_t step = 0;
  std::map<std::string, std::size_t> gallery_pos;
  for (std::size_t i = 0; i < data.gallery.size(); ++i) gallery_pos[data.gallery[i].row.id] = i;

  for (std::size_t gen = 0; gen < sched.generations; ++gen) {
    std::optional<ClusVpr> frozen;
    TargetCache targets;
    double tau_prev = 0.0;
    if (gen > 0) {
      frozen = model;
      tau_prev = sched.temperature(gen - 1);
    }
    opt.reset();

    for (std::size_t epoch = 0; epoch < sched.epochs_per_generation; ++epoch) {
      DescriptorIndex idx = embed_index(model, data.gallery, false);
      std::vector<std::vector<double>> qdesc;
      for (const auto& q : data.train_queries) qdesc.push_back(model.embed(q.image));

      std::vector<std::size_t> order(data.train_queries.size());
      for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
      rng.shuffle(order);

      double sum_t = 0.0, sum_s = 0.0;
      std::size_t counted = 0;
      for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
        const std::size_t end = std::min(order.size(), start + config.batch_size);
        struct Job {
          std::size_t query;
          Triplet triplet;
        };
        std::vector<Job> jobs;
        for (std::size_t b = start; b < end; ++b) {
          const auto& q = data.train_queries[order[b]];
          auto mined = mine_triplets(idx, qdesc[order[b]], q.row.geo(), config.mining, rng, q.row.id);
          for (const auto& w : mined.warnings) std::cerr << "warning: " << w << '\n';
          if (mined.triplet) jobs.push_back({order[b], *mined.triplet});
        }
        if (jobs.empty()) continue;
        model.zero_grad();
        const double scale = 1.0 / static_cast<double>(jobs.size());
        for (const auto& job : jobs) {
          const auto& q = data.train_queries[job.query];
          QueryExample ex;
          ex.query = &q.image;
          ex.positive = &data.gallery[job.triplet.positive].image;
          for (auto n : job.triplet.negatives) ex.negatives.push_back(&data.gallery[n].image);
          ex.lambda_s = frozen ? sched.lambda_s : 0.0;
          if (frozen && sched.lambda_s > 0.0) {
            for (auto h : job.triplet.high_ranked) {
              const auto& pos = data.gallery[h];
              const PyramidScores* t = targets.find(static_cast<std::uint32_t>(gen), q.row.id, pos.row.id);
              if (!t) {
                t = &targets.insert(static_cast<std::uint32_t>(gen), q.row.id, pos.row.id,
                                    pyramid_target(*frozen, q.image, pos.image, tau_prev));
              }
              ex.high_ranked.push_back(&pos.image);
              ex.targets.push_back(t);
            }
          }
          QueryLoss l = query_loss(model, ex, scale);
          if (!std::isfinite(l.total)) {
            throw NumericalFailure("non-finite loss at generation " + std::to_string(gen) + ", epoch " +
                                   std::to_string(epoch) + ", query " + q.row.id);
          }
          sum_t += l.triplet;
          sum_s += l.pyramid;
          ++counted;
        }
        opt.step();
        model.optlad().clamp_exponents();
        ++step;
      }
      for (const Param* p : model.params())
        if (!p->value.all_finite()) throw NumericalFailure("non-finite parameter " + p->name);

      const double denom = counted ? static_cast<double>(counted) : 1.0;
      const double r1 = heldout_recall1(model, data, config.eval_threshold, false);
      log << gen << ',' << epoch << ',' << step << ',' << fmt(sum_t / denom) << ',' << fmt(sum_s / denom) << ','
          << fmt(r1) << '\n';
      log.flush();
    }

    for (const auto& w : fit_model_pca(model, data.gallery)) std::cerr << "warning: " << w << '\n';
    GenerationResult gr;
    gr.checkpoint = out_dir / ("gen" + std::to_string(gen + 1) + ".ckpt");
    save_model(model, gr.checkpoint);
    if (!targets.empty()) targets.save(out_dir / ("targets_gen" + std::to_string(gen) + ".bin"));
    gr.recall1 = heldout_recall1(model, data, config.eval_threshold, true);
    result.generations.push_back(gr);
  }
  return result;
}

// ---------------------------------------------------------------------------

std::vector<GradCheckReport> gradient_check_suite(ClusVpr& model, const QueryExample& example,
                                                  const GradCheckOptions& options) {
  model.zero_grad();
  query_loss(model, example, 1.0);
  std::vector<GradCheckReport> reports;
  Rng rng(options.seed);
  for (Param* p : model.params()) {
    const std::size_t n = p->value.numel();
    std::vector<std::size_t> coords;
    if (options.max_coords == 0 || options.max_coords >= n) {
      coords.resize(n);
      for (std::size_t i = 0; i < n; ++i) coords[i] = i;
    } else {
      coords = rng.sample_without_replacement(n, options.max_coords);
      std::sort(coords.begin(), coords.end());
    }
    std::vector<double> analytic, numeric;
    for (auto i : coords) {
      const double orig = p->value.data[i];
      p->value.data[i] = orig + options.step;
      const double fp = query_loss(model, example).total;
      p->value.data[i] = orig - options.step;
      const double fm = query_loss(model, example).total;
      p->value.data[i] = orig;
      if (!std::isfinite(fp) || !std::isfinite(fm)) throw std::domain_error("gradcheck: non-finite loss for " + p->name);
      numeric.push_back((fp - fm) / (2.0 * options.step));
      analytic.push_back(p->grad.data[i]);
    }
    GradCheckReport r;
    r.parameter = p->name;
    r.max_relative_error = max_relative_error(analytic, numeric);
    r.pass = r.max_relative_error < options.tolerance;
    reports.push_back(r);
  }
  return reports;
}

void perturb_parameters(ClusVpr& model, Rng& rng, double scale) {
  for (Param* p : model.params())
    for (auto& v : p->value.data) v += scale * rng.normal();
  model.optlad().clamp_exponents();
}

}  // namespace clusvpr

namespace clusvpr {

std::unique_ptr<GradCheckFixture> make_gradcheck_fixture(const ModelConfig& model_config, const WorldSpec& world,
                                                         std::uint64_t seed, double lambda_s, double temperature) {
  if (world.places < 3 || world.variants < 3) throw std::invalid_argument("gradcheck fixture: need >= 3 places and variants");
  auto fx = std::make_unique<GradCheckFixture>();
  Rng rng(seed);
  fx->model = ClusVpr(model_config, rng);
  perturb_parameters(fx->model, rng, 0.3);
  ClusVpr frozen = fx->model;
  perturb_parameters(fx->model, rng, 0.05);

  const auto rendered = render_world(world);
  auto pick = [&](std::size_t place, std::size_t variant) {
    fx->images.push_back(image_tensor(rendered[place * world.variants + variant].second));
  };
  fx->images.reserve(5);
  pick(0, 0);  // query
  pick(0, 1);  // positive
  pick(1, 0);  // negatives
  pick(2, 0);
  pick(0, 2);  // high-ranked positive
  fx->targets.push_back(pyramid_target(frozen, fx->images[0], fx->images[4], temperature));

  auto& ex = fx->example;
  ex.query = &fx->images[0];
  ex.positive = &fx->images[1];
  ex.negatives = {&fx->images[2], &fx->images[3]};
  ex.high_ranked = {&fx->images[4]};
  ex.targets = {&fx->targets[0]};
  ex.lambda_s = lambda_s;
  return fx;
}

}  // namespace clusvpr
