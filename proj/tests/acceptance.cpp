// Acceptance checks. Prints one PASS/FAIL line per criterion and exits nonzero
// when any selected criterion fails.

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <functional>
#include <iostream>
#include <iterator>
#include <map>
#include <optional>
#include <set>
#include <sstream>

#include "clusvpr/checkpoint.hpp"
#include "clusvpr/config.hpp"
#include "clusvpr/training.hpp"
#include "helpers.hpp"
#include "oracles.hpp"

using namespace clusvpr;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), f, v);
  return buf;
}

// ---------------------------------------------------------------------------

Outcome reduction_oracle() {
  Rng rng(101);
  double worst = 0.0;
  for (int t = 0; t < 200; ++t) {
    OptLadConfig cfg;
    cfg.channels = 1 + rng.uniform_index(6);
    cfg.expansion = 1;
    cfg.groups = 1;
    cfg.clusters = 1 + rng.uniform_index(4);
    OptLad m(cfg, rng);
    for (Param* p : m.params())
      for (auto& v : p->value.data) v = rng.normal();
    const std::size_t h = 1 + rng.uniform_index(3), w = 1 + rng.uniform_index(3);
    Tensor f = testutil::random_tensor({cfg.channels, h, w}, rng);
    const Tensor x = m.expand(f);
    const auto ref = oracle::netvlad(x, m.assign_weights().value, m.assign_biases().value, m.centers().value);
    const auto got = normalize_descriptor(vlad_aggregate(x, m, std::vector<double>{1.0}));
    worst = std::max(worst, testutil::max_abs_diff(got, ref));
  }
  return {worst < 1e-10, "max abs err " + fmt("%.2e", worst) + " over 200 instances"};
}

Outcome attention_reduction() {
  Rng rng(102);
  double worst = 0.0;
  for (int t = 0; t < 100; ++t) {
    std::size_t heads, c;
    do {
      heads = 1 + rng.uniform_index(8);
      c = heads * (1 + rng.uniform_index(8));
    } while (c > 32);
    const std::size_t n = 1 + rng.uniform_index(16);
    Cmsa m({c, heads, 0.5}, "cmsa", rng);
    for (auto& v : m.bo().value.data) v = rng.normal();
    Tensor x = testutil::random_tensor({n, c}, rng);
    const auto y = m.forward(x, std::vector<double>(n, 0.5));
    worst = std::max(worst, testutil::max_abs_diff(y.data, oracle::vanilla_mha(x, m).data));
  }
  return {worst < 1e-10, "max abs err " + fmt("%.2e", worst) + " over 100 token sets"};
}

Outcome parameter_accounting() {
  const auto cfg = preset_config("default");
  const auto& m = cfg.model;
  const auto r = param_count_report(cfg.params.channels, m.expansion, m.groups, m.clusters, cfg.params.netvlad_clusters,
                                    m.pca_dim);
  const double rel = std::abs(double(r.netvlad_pca) / 537e6 - 1.0);
  const bool ratio_exact = r.netvlad_same_k_pca == 4 * r.optlad_pca && r.pca_ratio == 4.0;
  return {rel < 0.01 && ratio_exact, "netvlad PCA " + std::to_string(r.netvlad_pca) + " (" + fmt("%.3f", 100 * rel) +
                                         "% from 537M), ratio " + fmt("%g", r.pca_ratio)};
}

Outcome gradient_suite() {
  const auto cfg = preset_config("tiny");
  auto fx = make_gradcheck_fixture(cfg.model, cfg.world, cfg.train.seed, cfg.train.schedule.lambda_s,
                                   cfg.train.schedule.temperature(0));
  GradCheckOptions opt;
  opt.seed = cfg.train.seed;
  const auto reports = gradient_check_suite(fx->model, fx->example, opt);
  double worst = 0.0;
  std::vector<std::string> failed;
  std::set<std::string> names;
  for (const auto& r : reports) {
    worst = std::max(worst, r.max_relative_error);
    if (!r.pass) failed.push_back(r.parameter);
    names.insert(r.parameter);
  }
  const std::vector<std::string> required{"backbone.conv0.weight", "cwtnet.0.global.cmsa.wq", "cwtnet.0.global.mlp.w1",
                                          "cwtnet.0.global.us.pointwise", "cwtnet.0.local.dw1.weight", "optlad.centers",
                                          "optlad.assign_w", "optlad.gem_p", "optlad.expand"};
  std::vector<std::string> missing;
  for (const auto& n : required)
    if (!names.count(n)) missing.push_back(n);
  std::string detail = std::to_string(reports.size()) + " tensors, max rel err " + fmt("%.2e", worst);
  for (const auto& f : failed) detail += ", failed " + f;
  for (const auto& f : missing) detail += ", missing " + f;
  return {failed.empty() && missing.empty(), detail};
}

std::vector<double> random_simplex(Rng& rng, std::size_t n) {
  std::vector<double> p(n);
  double s = 0.0;
  for (auto& v : p) s += (v = -std::log(rng.uniform(1e-12, 1.0)));
  for (auto& v : p) v /= s;
  return p;
}

Outcome loss_identities() {
  Rng rng(105);
  double form_gap = 0.0;
  bool ok = true;
  for (int t = 0; t < 1000; ++t) {
    const std::size_t d = 1 + rng.uniform_index(32), m = 1 + rng.uniform_index(10);
    auto q = testutil::random_unit(d, rng), p = testutil::random_unit(d, rng);
    std::vector<std::vector<double>> negs;
    for (std::size_t i = 0; i < m; ++i) negs.push_back(testutil::random_unit(d, rng));
    const double a = softmax_triplet_loss(q, p, negs);
    form_gap = std::max(form_gap, std::abs(a - softmax_triplet_loss_log1p(q, p, negs)));
    std::vector<double> parts(rng.uniform_index(5));
    for (auto& v : parts) v = rng.uniform(0.0, 3.0);
    ok = ok && total_loss(a, parts, 0.0) == a;
  }
  double min_kl = INFINITY, self_kl = 0.0;
  for (int t = 0; t < 10000; ++t) {
    const std::size_t n = 2 + rng.uniform_index(87);
    PyramidScores a{random_simplex(rng, n)}, b{random_simplex(rng, n)};
    const double kl = pyramid_loss(a, b);
    min_kl = std::min(min_kl, kl);
    self_kl = std::max(self_kl, std::abs(pyramid_loss(a, a)));
    ok = ok && kl > 0.0;
  }
  double simplex_gap = 0.0;
  for (int t = 0; t < 1000; ++t) {
    const std::size_t d = 1 + rng.uniform_index(16);
    std::vector<std::vector<double>> qs, ps;
    for (int i = 0; i < 4; ++i) qs.push_back(testutil::random_unit(d, rng));
    for (int i = 0; i < 22; ++i) ps.push_back(testutil::random_unit(d, rng));
    const auto s = pyramid_scores(qs, ps, rng.uniform(0.01, 2.0));
    double sum = 0.0;
    for (double v : s.values) {
      ok = ok && v >= 0.0 && std::isfinite(v);
      sum += v;
    }
    simplex_gap = std::max(simplex_gap, std::abs(sum - 1.0));
  }
  ok = ok && form_gap < 1e-12 && self_kl == 0.0 && simplex_gap < 1e-12;
  return {ok, "two-form gap " + fmt("%.1e", form_gap) + ", min KL " + fmt("%.1e", min_kl) + ", KL(p,p) " +
                  fmt("%.1e", self_kl) + ", simplex gap " + fmt("%.1e", simplex_gap)};
}

Outcome mining_contract() {
  Rng rng(106);
  std::size_t violations = 0, mined = 0;
  for (int t = 0; t < 500; ++t) {
    const std::size_t dim = 2 + rng.uniform_index(7), n = 20 + rng.uniform_index(800);
    DescriptorIndex idx;
    idx.dim = static_cast<std::uint32_t>(dim);
    for (std::size_t i = 0; i < n; ++i) {
      const double r = rng.uniform(0.0, 200.0) * std::sqrt(rng.uniform()), a = rng.uniform(0.0, 2 * std::numbers::pi);
      IndexRecord rec;
      rec.id = "g" + std::to_string(i);
      const auto d = testutil::random_unit(dim, rng);
      rec.descriptor.assign(d.begin(), d.end());
      rec.geo = GeoTag::planar(r * std::cos(a), r * std::sin(a));
      idx.add(std::move(rec));
    }
    MiningConfig cfg;
    cfg.negatives = 1 + rng.uniform_index(10);
    const auto q = testutil::random_unit(dim, rng);
    const GeoTag qg = GeoTag::planar(0, 0);
    const auto res = mine_triplets(idx, q, qg, cfg, rng);

    // exhaustive per-instance verification against a full sort
    std::vector<std::pair<double, std::size_t>> order;
    for (std::size_t i = 0; i < n; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < dim; ++j) s += q[j] * double(idx.records[i].descriptor[j]);
      order.push_back({s, i});
    }
    std::sort(order.begin(), order.end(), [&](auto& a, auto& b) {
      return a.first != b.first ? a.first > b.first : idx.records[a.second].id < idx.records[b.second].id;
    });
    std::vector<std::size_t> rank(n);
    for (std::size_t r = 0; r < n; ++r) rank[order[r].second] = r;
    std::size_t best_in = n, far_in_pool = 0;
    for (std::size_t r = 0; r < n; ++r) {
      const double d = geo_distance(qg, idx.records[order[r].second].geo);
      if (d <= 10.0 && best_in == n) best_in = order[r].second;
      if (d > 25.0 && r < cfg.pool) ++far_in_pool;
    }
    if (best_in == n) {
      violations += res.triplet.has_value();
      continue;
    }
    if (!res.triplet) {
      ++violations;
      continue;
    }
    ++mined;
    const auto& tr = *res.triplet;
    violations += tr.positive != best_in;
    violations += geo_distance(qg, idx.records[tr.positive].geo) > 10.0;
    const bool widened = far_in_pool < cfg.negatives;
    for (auto i : tr.negatives) {
      violations += !(geo_distance(qg, idx.records[i].geo) > 25.0);
      if (!widened) violations += rank[i] >= cfg.pool;
    }
    if (!widened) violations += tr.negatives.size() != cfg.negatives;
  }
  return {violations == 0 && mined > 0,
          std::to_string(mined) + " of 500 galleries mined, " + std::to_string(violations) + " violations"};
}

Outcome retrieval_oracle() {
  Rng rng(107);
  std::size_t mismatches = 0, monotone_breaks = 0, roundtrip_fail = 0;
  const auto dir = testutil::temp_dir("acceptance_index");
  for (int t = 0; t < 100; ++t) {
    const std::size_t dim = 1 + rng.uniform_index(32), n = 1 + rng.uniform_index(1000);
    DescriptorIndex idx;
    idx.dim = static_cast<std::uint32_t>(dim);
    for (std::size_t i = 0; i < n; ++i) {
      IndexRecord rec;
      char id[16];
      std::snprintf(id, sizeof(id), "r%04zu", rng.uniform_index(100000));
      rec.id = id + std::to_string(i);
      const auto d = testutil::random_unit(dim, rng);
      rec.descriptor.assign(d.begin(), d.end());
      rec.geo = GeoTag::planar(rng.uniform(0, 300), rng.uniform(0, 300));
      idx.add(std::move(rec));
    }
    const auto q = testutil::random_unit(dim, rng);
    std::vector<std::pair<double, std::string>> full;
    for (const auto& r : idx.records) {
      double s = 0.0;
      for (std::size_t j = 0; j < dim; ++j) s += q[j] * double(r.descriptor[j]);
      full.push_back({s, r.id});
    }
    std::sort(full.begin(), full.end(), [](auto& a, auto& b) { return a.first != b.first ? a.first > b.first : a.second < b.second; });
    const std::size_t k = 1 + rng.uniform_index(n);
    const auto top = query_topk(idx, q, k);
    if (top.hits.size() != k) ++mismatches;
    for (std::size_t i = 0; i < std::min(k, top.hits.size()); ++i) mismatches += top.hits[i].id != full[i].second;

    std::vector<EvalQuery> qs;
    for (int i = 0; i < 10; ++i)
      qs.push_back({"q" + std::to_string(i), testutil::random_unit(dim, rng), GeoTag::planar(rng.uniform(0, 300), rng.uniform(0, 300))});
    const auto rep = recall_at_k(idx, qs, {1, 2, 5, 10, 20, 50});
    for (std::size_t i = 1; i < rep.recall.size(); ++i) monotone_breaks += rep.recall[i] < rep.recall[i - 1];

    save_index(idx, dir / "i.idx");
    const auto back = load_index(dir / "i.idx");
    bool same = back.size() == idx.size() && back.dim == idx.dim && back.mode == idx.mode;
    for (std::size_t i = 0; same && i < n; ++i) {
      const auto &a = idx.records[i], &b = back.records[i];
      same = a.id == b.id && std::memcmp(a.descriptor.data(), b.descriptor.data(), dim * sizeof(float)) == 0 &&
             std::memcmp(&a.geo.a, &b.geo.a, sizeof(double)) == 0 && std::memcmp(&a.geo.b, &b.geo.b, sizeof(double)) == 0;
    }
    roundtrip_fail += !same;
  }
  return {mismatches == 0 && monotone_breaks == 0 && roundtrip_fail == 0,
          std::to_string(mismatches) + " ranking mismatches, " + std::to_string(monotone_breaks) +
              " monotonicity breaks, " + std::to_string(roundtrip_fail) + " round-trip failures over 100 indices"};
}

// ---------------------------------------------------------------------------

struct RunSummary {
  TrainResult result;
  double seconds = 0.0;
  std::string metrics;
};

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), {}};
}

class EndToEnd {
 public:
  EndToEnd(fs::path work, std::string config) : work_(std::move(work)), config_(std::move(config)) {}

  RunSummary& run(const std::string& name, double lambda_s) {
    auto it = runs_.find(name);
    if (it != runs_.end()) return it->second;
    RunConfig cfg = load_config(config_);
    cfg.train.schedule.lambda_s = lambda_s;
    cfg.validate();
    if (!data_) {
      const fs::path world = work_ / "world";
      fs::remove_all(world);
      synth_world(cfg.world, world);
      data_ = load_training_data(world);
    }
    const fs::path out = work_ / name;
    fs::remove_all(out);
    const auto t0 = std::chrono::steady_clock::now();
    RunSummary s;
    s.result = train_generations(*data_, cfg.model, cfg.train, out);
    s.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    s.metrics = slurp(s.result.metrics_log);
    std::cerr << name << ": untrained " << s.result.initial_recall1;
    for (const auto& g : s.result.generations) std::cerr << ", " << g.recall1;
    std::cerr << " (" << s.seconds << " s)\n";
    return runs_.emplace(name, std::move(s)).first->second;
  }

 private:
  fs::path work_;
  std::string config_;
  std::optional<TrainingData> data_;
  std::map<std::string, RunSummary> runs_;
};

Outcome learning_signal(EndToEnd& e2e) {
  const auto& pss = e2e.run("lambda_0.55", 0.55);
  const auto& base = e2e.run("lambda_0", 0.0);
  const auto& g = pss.result.generations;
  if (g.empty()) return {false, "no generations trained"};
  const double fin = g.back().recall1, gen1 = g.front().recall1, init = pss.result.initial_recall1;
  const double fin0 = base.result.generations.back().recall1;
  const bool ok = fin >= 0.8 && fin > init && fin > gen1 && fin >= fin0 && pss.seconds < 1800 && base.seconds < 1800;
  return {ok, "final " + fmt("%.4f", fin) + ", untrained " + fmt("%.4f", init) + ", gen1 " + fmt("%.4f", gen1) +
                  ", lambda_s=0 final " + fmt("%.4f", fin0) + ", runtime " + fmt("%.0f", pss.seconds) + " s / " +
                  fmt("%.0f", base.seconds) + " s"};
}

Outcome determinism(EndToEnd& e2e) {
  const auto& a = e2e.run("lambda_0.55", 0.55);
  const auto& b = e2e.run("lambda_0.55_repeat", 0.55);
  const bool same = !a.metrics.empty() && a.metrics == b.metrics;
  return {same, same ? "metrics logs byte-identical (" + std::to_string(a.metrics.size()) + " bytes)"
                     : "metrics logs differ"};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance checks"};
  std::vector<int> only;
  std::string work = (fs::temp_directory_path() / "clusvpr_acceptance").string();
  std::string config = "desk";
  app.add_option("--only", only, "criteria to run (default all)")->delimiter(',');
  app.add_option("--work-dir", work, "scratch directory for the end-to-end runs");
  app.add_option("--config", config, "preset or JSON file for the end-to-end runs");
  CLI11_PARSE(app, argc, argv);

  EndToEnd e2e(work, config);
  struct Criterion {
    std::string name;
    std::function<Outcome()> run;
    double limit_seconds;
  };
  const double none = INFINITY;
  const std::vector<Criterion> criteria{
      {"reduction oracle", reduction_oracle, 10},
      {"attention reduction", attention_reduction, 10},
      {"parameter accounting", parameter_accounting, none},
      {"gradient suite", gradient_suite, 300},
      {"loss identities", loss_identities, none},
      {"mining contract", mining_contract, none},
      {"retrieval oracle", retrieval_oracle, none},
      {"end-to-end learning signal", [&] { return learning_signal(e2e); }, none},
      {"determinism", [&] { return determinism(e2e); }, none},
  };
  bool all = true;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i + 1);
    if (!only.empty() && std::find(only.begin(), only.end(), id) == only.end()) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[i].run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (secs >= criteria[i].limit_seconds) {
      o.pass = false;
      o.detail += ", over the " + fmt("%.0f", criteria[i].limit_seconds) + " s limit";
    }
    std::printf("criterion %d %s: %s (%s, %.1f s)\n", id, o.pass ? "PASS" : "FAIL", criteria[i].name.c_str(),
                o.detail.c_str(), secs);
    std::fflush(stdout);
    all = all && o.pass;
  }
  return all ? 0 : 1;
}
