#include "clusvpr/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <stdexcept>

namespace clusvpr {

namespace {

constexpr char kMagic[8] = {'C', 'V', 'P', 'R', 'M', 'D', 'L', '1'};
constexpr std::uint32_t kVersion = 1;

template <typename U>
void put(std::vector<std::uint8_t>& out, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

struct Reader {
  const std::vector<std::uint8_t>& bytes;
  std::size_t pos = 0;
  template <typename U>
  U get() {
    if (pos + sizeof(U) > bytes.size()) throw std::runtime_error("checkpoint: truncated");
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(static_cast<U>(bytes[pos + i]) << (8 * i));
    pos += sizeof(U);
    return v;
  }
};

void put_section(std::vector<std::uint8_t>& out, const std::string& name, const Tensor& t) {
  put<std::uint16_t>(out, static_cast<std::uint16_t>(name.size()));
  out.insert(out.end(), name.begin(), name.end());
  put<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
  for (auto d : t.shape) put<std::uint32_t>(out, static_cast<std::uint32_t>(d));
  for (double v : t.data) put<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
}

Tensor config_tensor(const ModelConfig& c) {
  std::vector<double> v;
  v.push_back(static_cast<double>(c.backbone.in_channels));
  v.push_back(static_cast<double>(c.backbone.channels.size()));
  for (auto x : c.backbone.channels) v.push_back(static_cast<double>(x));
  for (auto x : c.backbone.strides) v.push_back(static_cast<double>(x));
  for (auto x : {c.cwt_blocks, c.local_channels, c.rate, c.knn, c.heads}) v.push_back(static_cast<double>(x));
  v.push_back(c.lambda_c);
  for (auto x : {c.mlp_ratio, c.expansion, c.groups, c.clusters}) v.push_back(static_cast<double>(x));
  v.push_back(c.gem_p);
  v.push_back(c.sharpness);
  v.push_back(static_cast<double>(c.pca_dim));
  v.push_back(c.normalize_input ? 1.0 : 0.0);
  const std::size_t n = v.size();
  return Tensor({n}, std::move(v));
}

ModelConfig config_from_tensor(const Tensor& t) {
  std::size_t i = 0;
  auto next = [&]() {
    if (i >= t.numel()) throw std::runtime_error("checkpoint: meta.config too short");
    return t.data[i++];
  };
  auto next_u = [&]() { return static_cast<std::size_t>(next()); };
  ModelConfig c;
  c.backbone.in_channels = next_u();
  const std::size_t layers = next_u();
  c.backbone.channels.resize(layers);
  c.backbone.strides.resize(layers);
  for (auto& x : c.backbone.channels) x = next_u();
  for (auto& x : c.backbone.strides) x = next_u();
  c.cwt_blocks = next_u();
  c.local_channels = next_u();
  c.rate = next_u();
  c.knn = next_u();
  c.heads = next_u();
  c.lambda_c = next();
  c.mlp_ratio = next_u();
  c.expansion = next_u();
  c.groups = next_u();
  c.clusters = next_u();
  c.gem_p = next();
  c.sharpness = next();
  c.pca_dim = next_u();
  c.normalize_input = next() != 0.0;
  if (i != t.numel()) throw std::runtime_error("checkpoint: meta.config has trailing values");
  return c;
}

}  // namespace

std::vector<std::uint8_t> serialize_model(const ClusVpr& model) {
  std::vector<std::pair<std::string, const Tensor*>> sections;
  Tensor meta = config_tensor(model.config());
  sections.emplace_back("meta.config", &meta);
  for (const Param* p : model.params()) sections.emplace_back(p->name, &p->value);
  Tensor mean, eig;
  if (model.pca()) {
    const auto& pca = *model.pca();
    mean = Tensor({pca.mean.size()}, pca.mean);
    eig = Tensor({pca.eigenvalues.size()}, pca.eigenvalues);
    sections.emplace_back("pca.mean", &mean);
    sections.emplace_back("pca.projection", &pca.projection);
    sections.emplace_back("pca.eigenvalues", &eig);
  }
  std::vector<std::uint8_t> out(kMagic, kMagic + 8);
  put<std::uint32_t>(out, kVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(sections.size()));
  for (const auto& [name, t] : sections) put_section(out, name, *t);
  return out;
}

std::vector<CheckpointSection> read_sections(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kMagic, 8) != 0) throw std::runtime_error("checkpoint: bad magic");
  Reader rd{bytes, 8};
  const auto version = rd.get<std::uint32_t>();
  if (version != kVersion) throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
  const auto count = rd.get<std::uint32_t>();
  std::vector<CheckpointSection> out;
  for (std::uint32_t s = 0; s < count; ++s) {
    CheckpointSection sec;
    const auto len = rd.get<std::uint16_t>();
    if (rd.pos + len > bytes.size()) throw std::runtime_error("checkpoint: truncated section name");
    sec.name.assign(reinterpret_cast<const char*>(bytes.data() + rd.pos), len);
    rd.pos += len;
    const auto rank = rd.get<std::uint32_t>();
    std::vector<std::size_t> dims(rank);
    for (auto& d : dims) d = rd.get<std::uint32_t>();
    sec.value = Tensor(dims);
    for (auto& v : sec.value.data) v = std::bit_cast<double>(rd.get<std::uint64_t>());
    out.push_back(std::move(sec));
  }
  if (rd.pos != bytes.size()) throw std::runtime_error("checkpoint: trailing bytes");
  return out;
}

ClusVpr deserialize_model(const std::vector<std::uint8_t>& bytes) {
  auto sections = read_sections(bytes);
  std::map<std::string, Tensor> by_name;
  for (auto& s : sections) {
    if (!by_name.emplace(s.name, std::move(s.value)).second) throw std::runtime_error("checkpoint: duplicate section " + s.name);
  }
  auto meta = by_name.find("meta.config");
  if (meta == by_name.end()) throw std::runtime_error("checkpoint: missing meta.config");
  Rng rng(0);
  ClusVpr model(config_from_tensor(meta->second), rng);
  by_name.erase(meta);
  for (Param* p : model.params()) {
    auto it = by_name.find(p->name);
    if (it == by_name.end()) throw std::runtime_error("checkpoint: missing section " + p->name);
    if (it->second.shape != p->value.shape) {
      throw std::runtime_error("checkpoint: section " + p->name + " has shape " + shape_str(it->second.shape) +
                               ", model expects " + shape_str(p->value.shape));
    }
    p->value = std::move(it->second);
    by_name.erase(it);
  }
  if (by_name.count("pca.mean")) {
    PcaParams pca;
    pca.mean = by_name.at("pca.mean").data;
    pca.projection = by_name.at("pca.projection");
    pca.eigenvalues = by_name.at("pca.eigenvalues").data;
    if (pca.projection.rank() != 2 || pca.projection.dim(1) != pca.mean.size()) {
      throw std::runtime_error("checkpoint: inconsistent PCA sections");
    }
    model.set_pca(std::move(pca));
    by_name.erase("pca.mean");
    by_name.erase("pca.projection");
    by_name.erase("pca.eigenvalues");
  }
  if (!by_name.empty()) throw std::runtime_error("checkpoint: unknown section " + by_name.begin()->first);
  return model;
}

void save_model(const ClusVpr& model, const std::filesystem::path& path) {
  auto bytes = serialize_model(model);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write checkpoint " + path.string());
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

ClusVpr load_model(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot read checkpoint " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return deserialize_model(bytes);
}

}  // namespace clusvpr
