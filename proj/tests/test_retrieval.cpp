#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include "clusvpr/retrieval.hpp"
#include "helpers.hpp"

using namespace clusvpr;

namespace {

IndexRecord record(const std::string& id, const std::vector<double>& d, GeoTag geo) {
  IndexRecord r;
  r.id = id;
  r.descriptor.assign(d.begin(), d.end());
  r.geo = geo;
  return r;
}

DescriptorIndex random_index(Rng& rng, std::size_t n, std::size_t dim) {
  DescriptorIndex idx;
  idx.dim = static_cast<std::uint32_t>(dim);
  for (std::size_t i = 0; i < n; ++i) {
    char id[16];
    std::snprintf(id, sizeof(id), "r%05zu", i);
    idx.add(record(id, testutil::random_unit(dim, rng), GeoTag::planar(rng.uniform(0, 500), rng.uniform(0, 500))));
  }
  return idx;
}

// Similarities in the stored f32 precision, sorted by descending similarity then id.
std::vector<std::string> oracle_order(const DescriptorIndex& idx, const std::vector<double>& q) {
  std::vector<std::pair<double, std::string>> s;
  for (const auto& r : idx.records) {
    double v = 0.0;
    for (std::size_t j = 0; j < q.size(); ++j) v += q[j] * static_cast<double>(r.descriptor[j]);
    s.push_back({v, r.id});
  }
  std::sort(s.begin(), s.end(), [](auto& a, auto& b) { return a.first != b.first ? a.first > b.first : a.second < b.second; });
  std::vector<std::string> ids;
  for (auto& e : s) ids.push_back(e.second);
  return ids;
}

}  // namespace

TEST_CASE("geo distance examples") {
  CHECK(geo_distance(GeoTag::planar(3, 4), GeoTag::planar(3, 4)) == 0.0);
  CHECK(geo_distance(GeoTag::planar(0, 0), GeoTag::planar(3, 4)) == 5.0);
  CHECK(geo_distance(GeoTag::spherical(10, 20), GeoTag::spherical(10, 20)) == 0.0);
  const double arc = kEarthRadiusMeters * std::numbers::pi / 180.0;
  CHECK(std::abs(geo_distance(GeoTag::spherical(0, 0), GeoTag::spherical(0, 1)) - arc) < 1e-6);
  CHECK(std::abs(geo_distance(GeoTag::spherical(0, 0), GeoTag::spherical(0, 1)) - 111195.0) < 1.0);
  CHECK(std::abs(geo_distance(GeoTag::spherical(0, 0), GeoTag::spherical(1, 0)) - arc) < 1e-6);
  CHECK_THROWS_AS(geo_distance(GeoTag::planar(0, 0), GeoTag::spherical(0, 0)), std::invalid_argument);
  CHECK_THROWS_AS(GeoTag::spherical(91, 0), std::invalid_argument);
  CHECK_THROWS_AS(GeoTag::spherical(0, -181), std::invalid_argument);
}

TEST_CASE("index add invariants") {
  DescriptorIndex idx;
  idx.dim = 2;
  idx.add(record("a", {1.0, 0.0}, GeoTag::planar(0, 0)));
  CHECK_THROWS_AS(idx.add(record("b", {1.0, 1.0}, GeoTag::planar(0, 0))), std::invalid_argument);
  CHECK_THROWS_AS(idx.add(record("c", {1.0, 0.0, 0.0}, GeoTag::planar(0, 0))), std::invalid_argument);
  CHECK_THROWS_AS(idx.add(record("s", {0.0, 1.0}, GeoTag::spherical(0, 0))), std::invalid_argument);
  CHECK(idx.size() == 1);
}

TEST_CASE("query topk examples") {
  Rng rng(1);
  auto idx = random_index(rng, 30, 6);
  std::vector<double> q(idx.records[7].descriptor.begin(), idx.records[7].descriptor.end());
  auto top = query_topk(idx, q, 5);
  CHECK(top.hits.size() == 5);
  CHECK(top.hits[0].id == idx.records[7].id);
  CHECK(std::abs(top.hits[0].similarity - 1.0) < 1e-3);
  auto one = query_topk(idx, q, 1);
  CHECK(one.hits[0].id == top.hits[0].id);
  CHECK_FALSE(top.truncated_k);
  auto all = query_topk(idx, q, 100);
  CHECK(all.truncated_k);
  CHECK(all.hits.size() == 30);
  CHECK_THROWS_AS(query_topk(idx, q, 0), std::invalid_argument);

  DescriptorIndex ties;
  ties.dim = 2;
  ties.add(record("b", {0.0, 1.0}, GeoTag::planar(0, 0)));
  ties.add(record("a", {0.0, 1.0}, GeoTag::planar(0, 0)));
  ties.add(record("c", {1.0, 0.0}, GeoTag::planar(0, 0)));
  auto t = query_topk(ties, std::vector<double>{1.0, 0.0}, 3);
  CHECK(t.hits[0].id == "c");
  CHECK(t.hits[1].id == "a");
  CHECK(t.hits[2].id == "b");
}

TEST_CASE("query topk matches a full sort") {
  Rng rng(2);
  for (int t = 0; t < 30; ++t) {
    const std::size_t dim = 1 + rng.uniform_index(12);
    auto idx = random_index(rng, 1 + rng.uniform_index(300), dim);
    const auto q = testutil::random_unit(dim, rng);
    const auto order = oracle_order(idx, q);
    const std::size_t k = 1 + rng.uniform_index(idx.size());
    auto top = query_topk(idx, q, k);
    REQUIRE(top.hits.size() == k);
    for (std::size_t i = 0; i < k; ++i) CHECK(top.hits[i].id == order[i]);
    auto full = rank_all(idx, q);
    REQUIRE(full.size() == idx.size());
    for (std::size_t i = 0; i < full.size(); ++i) CHECK(full[i].id == order[i]);
  }
}

TEST_CASE("recall examples") {
  DescriptorIndex idx;
  idx.dim = 2;
  idx.add(record("far", {1.0, 0.0}, GeoTag::planar(30, 0)));
  idx.add(record("near", {0.0, 1.0}, GeoTag::planar(5, 0)));
  std::vector<EvalQuery> qs{{"q", {0.8, 0.6}, GeoTag::planar(0, 0)}};
  auto rep = recall_at_k(idx, qs, {1, 2});
  CHECK(rep.at(1) == 0.0);
  CHECK(rep.at(2) == 1.0);
  CHECK(rep.query_count == 1);
  CHECK(rep.threshold == 25.0);
  CHECK(rep.unreachable.empty());

  qs.push_back({"lost", {1.0, 0.0}, GeoTag::planar(500, 500)});
  rep = recall_at_k(idx, qs, {2});
  CHECK(rep.at(2) == 0.5);
  CHECK(rep.unreachable == std::vector<std::string>{"lost"});
  CHECK(rep.to_text().rfind("k,recall,queries,threshold_m\n", 0) == 0);
  CHECK_THROWS_AS(recall_at_k(idx, qs, {1}, 0.0), std::invalid_argument);
}

TEST_CASE("recall is monotone in k and threshold") {
  Rng rng(3);
  for (int t = 0; t < 20; ++t) {
    auto idx = random_index(rng, 50, 4);
    std::vector<EvalQuery> qs;
    for (int i = 0; i < 20; ++i)
      qs.push_back({"q" + std::to_string(i), testutil::random_unit(4, rng), GeoTag::planar(rng.uniform(0, 500), rng.uniform(0, 500))});
    auto rep = recall_at_k(idx, qs, {1, 2, 5, 10, 50});
    for (std::size_t i = 1; i < rep.recall.size(); ++i) CHECK(rep.recall[i] >= rep.recall[i - 1]);
    CHECK(recall_at_k(idx, qs, {5}, 80.0).at(5) >= recall_at_k(idx, qs, {5}, 40.0).at(5));
  }
}

TEST_CASE("index round trip") {
  Rng rng(4);
  auto idx = random_index(rng, 40, 7);
  auto dir = testutil::temp_dir("index");
  save_index(idx, dir / "a.idx");
  auto back = load_index(dir / "a.idx");
  REQUIRE(back.size() == idx.size());
  CHECK(back.dim == idx.dim);
  CHECK(back.mode == idx.mode);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    CHECK(back.records[i].id == idx.records[i].id);
    CHECK(std::memcmp(back.records[i].descriptor.data(), idx.records[i].descriptor.data(), 7 * sizeof(float)) == 0);
    CHECK(back.records[i].geo == idx.records[i].geo);
  }
  CHECK(serialize_index(back) == serialize_index(idx));

  auto bytes = serialize_index(idx);
  CHECK(std::string(bytes.begin(), bytes.begin() + 8) == "CVPRIDX1");
  auto bad = bytes;
  bad[0] = 'X';
  CHECK_THROWS_AS(deserialize_index(bad), std::runtime_error);
  bytes.resize(bytes.size() - 3);
  CHECK_THROWS_AS(deserialize_index(bytes), std::runtime_error);

  DescriptorIndex empty;
  empty.dim = 3;
  save_index(empty, dir / "e.idx");
  CHECK(load_index(dir / "e.idx").size() == 0);
}

TEST_CASE("manifest round trip") {
  std::vector<ManifestRow> rows{{"a", "images/a.ppm", 1.5, -2.25, GeoMode::planar},
                                {"b", "x/b.ppm", 40.4, -79.9, GeoMode::spherical}};
  const auto text = format_manifest(rows);
  CHECK(text.rfind(std::string(kManifestHeader) + "\n", 0) == 0);
  auto back = parse_manifest(text);
  REQUIRE(back.size() == 2);
  CHECK(back[0].id == "a");
  CHECK(back[0].lon == -2.25);
  CHECK(back[1].mode == GeoMode::spherical);
  CHECK(back[1].geo() == GeoTag::spherical(40.4, -79.9));
  CHECK(parse_manifest(std::string(kManifestHeader) + "\n").empty());
  CHECK_THROWS_AS(parse_manifest("id,path\n"), std::runtime_error);
  CHECK_THROWS_AS(parse_manifest(std::string(kManifestHeader) + "\na,p,1,2,polar\n"), std::runtime_error);
  CHECK_THROWS_AS(parse_manifest(std::string(kManifestHeader) + "\na,p,x,2,planar\n"), std::runtime_error);
}
