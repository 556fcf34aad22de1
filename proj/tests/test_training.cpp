#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "clusvpr/training.hpp"
#include "helpers.hpp"

using namespace clusvpr;

namespace {

std::vector<double> unit2(double angle) { return {std::cos(angle), std::sin(angle)}; }

IndexRecord record(const std::string& id, std::vector<double> d, GeoTag geo) {
  IndexRecord r;
  r.id = id;
  r.descriptor.assign(d.begin(), d.end());
  r.geo = geo;
  return r;
}

// Random gallery around the origin: descriptors on the unit sphere, positions
// scattered up to 60 m so all three distance bands are populated.
DescriptorIndex random_gallery(Rng& rng, std::size_t n, std::size_t dim) {
  DescriptorIndex idx;
  idx.dim = static_cast<std::uint32_t>(dim);
  for (std::size_t i = 0; i < n; ++i) {
    const double r = rng.uniform(0.0, 60.0), a = rng.uniform(0.0, 2 * std::numbers::pi);
    idx.add(record("g" + std::to_string(i), testutil::random_unit(dim, rng), GeoTag::planar(r * std::cos(a), r * std::sin(a))));
  }
  return idx;
}

}  // namespace

TEST_CASE("triplet loss examples") {
  const auto q = unit2(0.0);
  CHECK(std::abs(softmax_triplet_loss(q, unit2(0.3), {unit2(-0.3)}) - std::log(2.0)) < 1e-15);
  const std::vector<double> x{1.0, 0.0}, nx{-1.0, 0.0};
  const double expect = std::log1p(std::exp(-2.0));
  CHECK(std::abs(softmax_triplet_loss(x, x, {nx}) - expect) < 1e-15);
  CHECK(std::abs(expect - 0.1269) < 5e-5);
  CHECK(softmax_triplet_loss(x, x, {nx, nx}) == doctest::Approx(2 * expect).epsilon(1e-15));
  CHECK_THROWS_AS(softmax_triplet_loss(std::vector<double>{2.0, 0.0}, x, {nx}), std::invalid_argument);
  CHECK_THROWS_AS(softmax_triplet_loss(x, x, {}), std::invalid_argument);
}

TEST_CASE("triplet loss is nonnegative and falls as the positive moves closer") {
  Rng rng(1);
  const auto q = unit2(0.0);
  std::vector<std::vector<double>> negs{unit2(1.0), unit2(-2.0), unit2(2.5)};
  double prev = INFINITY;
  for (double a = 3.0; a >= 0.0; a -= 0.25) {
    const double l = softmax_triplet_loss(q, unit2(a), negs);
    CHECK(l >= 0.0);
    CHECK(l < prev);
    prev = l;
  }
}

TEST_CASE("triplet loss forms agree") {
  Rng rng(2);
  for (int t = 0; t < 1000; ++t) {
    const std::size_t d = 1 + rng.uniform_index(16), m = 1 + rng.uniform_index(10);
    auto q = testutil::random_unit(d, rng), p = testutil::random_unit(d, rng);
    std::vector<std::vector<double>> negs;
    for (std::size_t i = 0; i < m; ++i) negs.push_back(testutil::random_unit(d, rng));
    CHECK(std::abs(softmax_triplet_loss(q, p, negs) - softmax_triplet_loss_log1p(q, p, negs)) < 1e-12);
  }
}

TEST_CASE("triplet loss gradient") {
  Rng rng(3);
  const std::size_t d = 5;
  auto q = testutil::random_unit(d, rng), p = testutil::random_unit(d, rng);
  std::vector<std::vector<double>> negs{testutil::random_unit(d, rng), testutil::random_unit(d, rng)};
  const auto g = softmax_triplet_loss_grad(q, p, negs);
  CHECK(g.loss == doctest::Approx(softmax_triplet_loss(q, p, negs)).epsilon(1e-14));
  // the loss is defined for unit inputs; its bilinear form extends to any vector
  auto f = [&] {
    double s = 0.0;
    double sp = 0.0;
    for (std::size_t j = 0; j < d; ++j) sp += q[j] * p[j];
    for (const auto& n : negs) {
      double sn = 0.0;
      for (std::size_t j = 0; j < d; ++j) sn += q[j] * n[j];
      s += std::log1p(std::exp(sn - sp));
    }
    return s;
  };
  auto check = [&](std::vector<double>& v, const std::vector<double>& analytic) {
    for (std::size_t j = 0; j < d; ++j) {
      const double o = v[j];
      v[j] = o + 1e-6;
      const double fp = f();
      v[j] = o - 1e-6;
      const double fm = f();
      v[j] = o;
      CHECK(std::abs((fp - fm) / 2e-6 - analytic[j]) < 1e-8);
    }
  };
  check(q, g.query);
  check(p, g.positive);
  check(negs[0], g.negatives[0]);
  check(negs[1], g.negatives[1]);
}

TEST_CASE("total loss") {
  const std::vector<double> parts{0.3, 0.7};
  CHECK(total_loss(1.25, parts, 0.0) == 1.25);
  CHECK(total_loss(1.25, parts, 0.55) == doctest::Approx(1.25 + 0.55));
  const std::vector<double> same(4, 0.2);
  CHECK(total_loss(0.0, same, 1.0) == doctest::Approx(4 * 0.2));
  CHECK(total_loss(2.0, {}, 0.55) == 2.0);
}

TEST_CASE("mining examples") {
  DescriptorIndex idx;
  idx.dim = 2;
  idx.add(record("near", unit2(0.1), GeoTag::planar(5, 0)));
  idx.add(record("far1", unit2(1.0), GeoTag::planar(100, 0)));
  idx.add(record("far2", unit2(2.0), GeoTag::planar(0, 100)));
  MiningConfig cfg;
  cfg.negatives = 2;
  Rng rng(4);
  auto r = mine_triplets(idx, unit2(0.0), GeoTag::planar(0, 0), cfg, rng);
  REQUIRE(r.triplet);
  CHECK(r.triplet->positive == 0);
  auto negs = r.triplet->negatives;
  std::sort(negs.begin(), negs.end());
  CHECK(negs == std::vector<std::size_t>{1, 2});

  DescriptorIndex edge;
  edge.dim = 2;
  edge.add(record("edge", unit2(0.0), GeoTag::planar(10.0, 0)));
  edge.add(record("mid", unit2(0.1), GeoTag::planar(25.0, 0)));
  edge.add(record("far", unit2(0.2), GeoTag::planar(25.5, 0)));
  cfg.negatives = 1;
  r = mine_triplets(edge, unit2(0.0), GeoTag::planar(0, 0), cfg, rng);
  REQUIRE(r.triplet);
  CHECK(r.triplet->positive == 0);
  CHECK(r.triplet->negatives == std::vector<std::size_t>{2});

  DescriptorIndex none;
  none.dim = 2;
  none.add(record("far", unit2(0.0), GeoTag::planar(50, 0)));
  r = mine_triplets(none, unit2(0.0), GeoTag::planar(0, 0), cfg, rng, "q");
  CHECK_FALSE(r.triplet);
  CHECK_FALSE(r.warnings.empty());
}

TEST_CASE("mining skips the query itself and widens a short pool") {
  DescriptorIndex idx;
  idx.dim = 2;
  idx.add(record("q", unit2(0.0), GeoTag::planar(0, 0)));
  idx.add(record("p", unit2(0.5), GeoTag::planar(3, 0)));
  idx.add(record("n1", unit2(0.1), GeoTag::planar(80, 0)));
  idx.add(record("n2", unit2(3.0), GeoTag::planar(0, 80)));
  MiningConfig cfg;
  cfg.negatives = 2;
  cfg.pool = 2;
  Rng rng(5);
  auto r = mine_triplets(idx, unit2(0.0), GeoTag::planar(0, 0), cfg, rng, "q");
  REQUIRE(r.triplet);
  CHECK(r.triplet->positive == 1);
  CHECK(r.triplet->negatives.size() == 2);
  CHECK_FALSE(r.warnings.empty());
}

TEST_CASE("mining contract on random galleries") {
  Rng rng(6);
  for (int t = 0; t < 100; ++t) {
    const std::size_t dim = 2 + rng.uniform_index(6);
    auto idx = random_gallery(rng, 20 + rng.uniform_index(60), dim);
    MiningConfig cfg;
    cfg.negatives = 1 + rng.uniform_index(5);
    cfg.pool = cfg.negatives + rng.uniform_index(30);
    cfg.high_ranked = rng.uniform_index(4);
    const auto q = testutil::random_unit(dim, rng);
    const GeoTag qg = GeoTag::planar(0, 0);
    auto r = mine_triplets(idx, q, qg, cfg, rng);

    // exhaustive oracle: similarities of every record
    std::vector<std::pair<double, std::size_t>> sims;
    for (std::size_t i = 0; i < idx.size(); ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < dim; ++j) s += q[j] * idx.records[i].descriptor[j];
      sims.push_back({s, i});
    }
    std::vector<std::size_t> in_radius;
    for (auto& [s, i] : sims)
      if (geo_distance(qg, idx.records[i].geo) <= 10.0) in_radius.push_back(i);
    if (in_radius.empty()) {
      CHECK_FALSE(r.triplet);
      continue;
    }
    REQUIRE(r.triplet);
    const auto& tr = *r.triplet;
    CHECK(geo_distance(qg, idx.records[tr.positive].geo) <= 10.0);
    for (auto i : in_radius) CHECK(sims[i].first <= sims[tr.positive].first);
    for (auto h : tr.high_ranked) {
      CHECK(geo_distance(qg, idx.records[h].geo) <= 10.0);
      CHECK(h != tr.positive);
    }
    CHECK(tr.high_ranked.size() == std::min(cfg.high_ranked, in_radius.size() - 1));

    auto sorted = sims;
    std::sort(sorted.begin(), sorted.end(), [&](auto& a, auto& b) {
      return a.first != b.first ? a.first > b.first : idx.records[a.second].id < idx.records[b.second].id;
    });
    std::vector<std::size_t> pool_far;
    for (std::size_t k = 0; k < std::min(cfg.pool, sorted.size()); ++k)
      if (geo_distance(qg, idx.records[sorted[k].second].geo) > 25.0) pool_far.push_back(sorted[k].second);
    const bool widened = pool_far.size() < cfg.negatives;
    std::vector<std::size_t> seen;
    for (auto n : tr.negatives) {
      CHECK(geo_distance(qg, idx.records[n].geo) > 25.0);
      if (!widened) CHECK(std::find(pool_far.begin(), pool_far.end(), n) != pool_far.end());
      CHECK(std::find(seen.begin(), seen.end(), n) == seen.end());
      seen.push_back(n);
    }
    if (!widened) CHECK(tr.negatives.size() == cfg.negatives);
  }
}

TEST_CASE("mining is seed deterministic") {
  Rng g(7);
  auto idx = random_gallery(g, 60, 4);
  const auto q = testutil::random_unit(4, g);
  MiningConfig cfg;
  cfg.negatives = 5;
  Rng a(99), b(99);
  auto ra = mine_triplets(idx, q, GeoTag::planar(0, 0), cfg, a);
  auto rb = mine_triplets(idx, q, GeoTag::planar(0, 0), cfg, b);
  REQUIRE(ra.triplet);
  CHECK(ra.triplet->negatives == rb.triplet->negatives);
}

TEST_CASE("sgd semantics") {
  Param p("w", {3});
  p.value.data = {1.0, -2.0, 0.5};
  p.grad.data = {0.3, 0.1, -0.2};
  {
    Param q = p;
    Sgd opt({&q}, 0.0, 0.9, 1e-3);
    opt.step();
    opt.step();
    CHECK(q.value.data == p.value.data);
  }
  {
    Param q = p;
    q.grad.fill(0.0);
    const double lr = 0.1, wd = 0.01;
    Sgd opt({&q}, lr, 0.0, wd);
    for (int s = 1; s <= 3; ++s) {
      opt.step();
      for (std::size_t i = 0; i < 3; ++i)
        CHECK(q.value.data[i] == doctest::Approx(p.value.data[i] * std::pow(1 - lr * wd, s)).epsilon(1e-14));
    }
  }
  {
    // v1 = g; v2 = mu g + g
    Param q = p;
    Sgd opt({&q}, 0.5, 0.9, 0.0);
    opt.step();
    opt.step();
    for (std::size_t i = 0; i < 3; ++i)
      CHECK(q.value.data[i] == doctest::Approx(p.value.data[i] - 0.5 * (1.0 + 1.9) * p.grad.data[i]).epsilon(1e-14));
    opt.reset();
    const auto before = q.value.data;
    opt.step();
    for (std::size_t i = 0; i < 3; ++i)
      CHECK(q.value.data[i] == doctest::Approx(before[i] - 0.5 * p.grad.data[i]).epsilon(1e-14));
  }
}

TEST_CASE("train config validation") {
  TrainConfig c;
  CHECK_NOTHROW(c.validate());
  c.mining.pool = 5;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = TrainConfig{};
  c.mining.positive_radius = 0.0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
}

TEST_CASE("default preset training settings") {
  TrainConfig c;
  CHECK(c.learning_rate == 1e-4);
  CHECK(c.weight_decay == 1e-3);
  CHECK(c.momentum == 0.9);
  CHECK(c.mining.positive_radius == 10.0);
  CHECK(c.mining.negative_radius == 25.0);
  CHECK(c.mining.pool == 500);
  CHECK(c.schedule.generations == 5);
  CHECK(c.schedule.epochs_per_generation == 8);
  CHECK(c.schedule.lambda_s == 0.55);
}
