#include "clusvpr/pyramid.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace clusvpr {

PyramidComposition PyramidComposition::query_default() {
  PyramidComposition c;
  c.grid = 2;
  for (std::size_t r = 0; r < 2; ++r)
    for (std::size_t col = 0; col < 2; ++col) c.cells.push_back({r, col, 1, 1});
  return c;
}

PyramidComposition PyramidComposition::positive_default() {
  PyramidComposition c;
  c.grid = 4;
  for (std::size_t r = 0; r < 4; ++r)
    for (std::size_t col = 0; col < 4; ++col) c.cells.push_back({r, col, 1, 1});
  for (std::size_t r = 0; r < 4; r += 2)
    for (std::size_t col = 0; col < 4; col += 2) c.cells.push_back({r, col, 2, 2});
  c.cells.push_back({0, 0, 4, 4});
  c.cells.push_back({1, 1, 2, 2});
  return c;
}

PatchPyramid build_pyramid(const Tensor& fmap, PatchRole role) {
  // query and positive maps share one shape, so both defaults require the finer grid
  if (fmap.rank() == 3 && (fmap.dim(1) % 4 != 0 || fmap.dim(2) % 4 != 0)) {
    throw std::invalid_argument("build_pyramid: map " + std::to_string(fmap.dim(1)) + "x" +
                                std::to_string(fmap.dim(2)) + " is not divisible by 4");
  }
  return build_pyramid(fmap, role,
                       role == PatchRole::query ? PyramidComposition::query_default()
                                                : PyramidComposition::positive_default());
}

PatchPyramid build_pyramid(const Tensor& fmap, PatchRole role, const PyramidComposition& composition) {
  if (fmap.rank() != 3) throw std::invalid_argument("build_pyramid: expected C x H x W map");
  const std::size_t c = fmap.dim(0), h = fmap.dim(1), w = fmap.dim(2), g = composition.grid;
  if (g == 0 || h % g != 0 || w % g != 0) {
    throw std::invalid_argument("build_pyramid: map " + std::to_string(h) + "x" + std::to_string(w) +
                                " is not divisible by grid " + std::to_string(g));
  }
  const std::size_t ch = h / g, cw = w / g;
  PatchPyramid out;
  out.role = role;
  out.composition = composition;
  for (const auto& cell : composition.cells) {
    if (cell.row + cell.rows > g || cell.col + cell.cols > g || cell.rows == 0 || cell.cols == 0) {
      throw std::invalid_argument("build_pyramid: cell outside the grid");
    }
    const std::size_t ph = cell.rows * ch, pw = cell.cols * cw, y0 = cell.row * ch, x0 = cell.col * cw;
    Tensor patch({c, ph, pw});
    for (std::size_t k = 0; k < c; ++k)
      for (std::size_t y = 0; y < ph; ++y)
        for (std::size_t x = 0; x < pw; ++x) patch.at(k, y, x) = fmap.at(k, y0 + y, x0 + x);
    out.patches.push_back(std::move(patch));
  }
  return out;
}

void scatter_patch_grad(Tensor& grad_map, const Tensor& grad_patch, const PatchCell& cell, std::size_t grid) {
  const std::size_t c = grad_map.dim(0), ch = grad_map.dim(1) / grid, cw = grad_map.dim(2) / grid;
  const std::size_t y0 = cell.row * ch, x0 = cell.col * cw;
  for (std::size_t k = 0; k < c; ++k)
    for (std::size_t y = 0; y < grad_patch.dim(1); ++y)
      for (std::size_t x = 0; x < grad_patch.dim(2); ++x) grad_map.at(k, y0 + y, x0 + x) += grad_patch.at(k, y, x);
}

namespace {

void require_unit(const std::vector<std::vector<double>>& reps, const char* what) {
  for (const auto& r : reps)
    if (std::abs(l2_norm(r) - 1.0) > 1e-4) throw std::invalid_argument(std::string("pyramid_scores: non-unit ") + what);
}

}  // namespace

PyramidScores pyramid_scores(const std::vector<std::vector<double>>& query_reps,
                             const std::vector<std::vector<double>>& positive_reps, double temperature) {
  if (!(temperature > 0.0)) throw std::invalid_argument("pyramid_scores: temperature must be > 0");
  require_unit(query_reps, "query representation");
  require_unit(positive_reps, "positive representation");
  std::vector<double> logits;
  logits.reserve(query_reps.size() * positive_reps.size());
  for (const auto& q : query_reps)
    for (const auto& p : positive_reps) logits.push_back(dot(q, p));
  PyramidScores s;
  s.values = softmax(logits, temperature);
  s.temperature = temperature;
  s.queries = query_reps.size();
  s.positives = positive_reps.size();
  return s;
}

double pyramid_loss(const PyramidScores& current, const PyramidScores& target) {
  if (current.values.size() != target.values.size()) throw std::invalid_argument("pyramid_loss: length mismatch");
  double l = 0.0;
  for (std::size_t i = 0; i < current.values.size(); ++i) {
    const double t = target.values[i];
    if (t == 0.0) continue;
    l += t * (std::log(std::max(t, kKlEpsilon)) - std::log(std::max(current.values[i], kKlEpsilon)));
  }
  return l;
}

std::vector<double> pyramid_loss_grad(const PyramidScores& current, const PyramidScores& target) {
  std::vector<double> g(current.values.size(), 0.0);
  for (std::size_t i = 0; i < g.size(); ++i)
    if (current.values[i] > kKlEpsilon) g[i] = -target.values[i] / current.values[i];
  return g;
}

double entropy(std::span<const double> p) {
  double h = 0.0;
  for (double v : p)
    if (v > 0.0) h -= v * std::log(v);
  return h;
}

double GenerationSchedule::temperature(std::size_t generation) const {
  if (temperatures.empty()) throw std::invalid_argument("schedule: no temperatures");
  return temperatures[std::min(generation, temperatures.size() - 1)];
}

void GenerationSchedule::validate() const {
  if (generations < 1) throw std::invalid_argument("schedule: generations must be >= 1");
  if (epochs_per_generation < 1) throw std::invalid_argument("schedule: epochs per generation must be >= 1");
  if (temperatures.empty()) throw std::invalid_argument("schedule: temperature list is empty");
  for (double t : temperatures)
    if (!(t > 0.0)) throw std::invalid_argument("schedule: temperatures must be > 0");
  if (!(lambda_s >= 0.0)) throw std::invalid_argument("schedule: lambda_s must be >= 0");
}

const PyramidScores* TargetCache::find(std::uint32_t generation, const std::string& query,
                                       const std::string& positive) const {
  auto it = entries_.find(Key{generation, query, positive});
  return it == entries_.end() ? nullptr : &it->second;
}

const PyramidScores& TargetCache::insert(std::uint32_t generation, const std::string& query,
                                         const std::string& positive, PyramidScores scores) {
  auto [it, inserted] = entries_.emplace(Key{generation, query, positive}, std::move(scores));
  if (!inserted) throw std::logic_error("target cache: entry already written for " + query + "/" + positive);
  return it->second;
}

namespace {

template <typename U>
void put(std::ofstream& f, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) f.put(static_cast<char>(static_cast<std::uint8_t>(v >> (8 * i))));
}

template <typename U>
U get(std::ifstream& f) {
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) {
    const int ch = f.get();
    if (ch == EOF) throw std::runtime_error("target cache: truncated file");
    v |= static_cast<U>(static_cast<U>(static_cast<std::uint8_t>(ch)) << (8 * i));
  }
  return v;
}

void put_str(std::ofstream& f, const std::string& s) {
  put<std::uint16_t>(f, static_cast<std::uint16_t>(s.size()));
  f.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string get_str(std::ifstream& f) {
  const auto n = get<std::uint16_t>(f);
  std::string s(n, '\0');
  f.read(s.data(), n);
  if (f.gcount() != n) throw std::runtime_error("target cache: truncated id");
  return s;
}

}  // namespace

void TargetCache::save(const std::filesystem::path& path) const {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write target cache " + path.string());
  f.write("CVPRTGT1", 8);
  put<std::uint32_t>(f, static_cast<std::uint32_t>(entries_.size()));
  for (const auto& [key, s] : entries_) {
    put<std::uint32_t>(f, std::get<0>(key));
    put_str(f, std::get<1>(key));
    put_str(f, std::get<2>(key));
    put<std::uint64_t>(f, std::bit_cast<std::uint64_t>(s.temperature));
    put<std::uint32_t>(f, static_cast<std::uint32_t>(s.queries));
    put<std::uint32_t>(f, static_cast<std::uint32_t>(s.positives));
    for (double v : s.values) put<std::uint64_t>(f, std::bit_cast<std::uint64_t>(v));
  }
}

TargetCache TargetCache::load(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot read target cache " + path.string());
  char magic[8];
  f.read(magic, 8);
  if (f.gcount() != 8 || std::memcmp(magic, "CVPRTGT1", 8) != 0) throw std::runtime_error("target cache: bad magic");
  TargetCache cache;
  const auto count = get<std::uint32_t>(f);
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto gen = get<std::uint32_t>(f);
    auto q = get_str(f);
    auto p = get_str(f);
    PyramidScores s;
    s.temperature = std::bit_cast<double>(get<std::uint64_t>(f));
    s.queries = get<std::uint32_t>(f);
    s.positives = get<std::uint32_t>(f);
    s.values.resize(s.queries * s.positives);
    for (auto& v : s.values) v = std::bit_cast<double>(get<std::uint64_t>(f));
    cache.insert(gen, q, p, std::move(s));
  }
  return cache;
}

std::vector<std::vector<double>> encode_pyramid(const ClusVpr& model, const PatchPyramid& pyramid) {
  std::vector<std::vector<double>> reps;
  reps.reserve(pyramid.patches.size());
  for (const auto& patch : pyramid.patches) reps.push_back(model.encode_map(patch));
  return reps;
}

PyramidScores pyramid_target(const ClusVpr& frozen, const Tensor& query_image, const Tensor& positive_image,
                             double temperature) {
  auto q = encode_pyramid(frozen, build_pyramid(frozen.features(query_image), PatchRole::query));
  auto p = encode_pyramid(frozen, build_pyramid(frozen.features(positive_image), PatchRole::positive));
  return pyramid_scores(q, p, temperature);
}

void generation_targets(const ClusVpr* frozen, std::uint32_t generation, const std::vector<TargetPair>& pairs,
                        double temperature, TargetCache& cache) {
  if (generation == 0 || frozen == nullptr) return;
  for (const auto& pair : pairs) {
    if (cache.find(generation, pair.query_id, pair.positive_id)) continue;
    cache.insert(generation, pair.query_id, pair.positive_id,
                 pyramid_target(*frozen, *pair.query_image, *pair.positive_image, temperature));
  }
}

}  // namespace clusvpr
