#include "clusvpr/retrieval.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <sstream>
#include <stdexcept>

namespace clusvpr {

GeoTag GeoTag::spherical(double lat, double lon) {
  if (!(lat >= -90.0 && lat <= 90.0) || !(lon >= -180.0 && lon <= 180.0)) {
    throw std::invalid_argument("geotag: latitude/longitude out of range");
  }
  return {GeoMode::spherical, lat, lon};
}

double geo_distance(const GeoTag& a, const GeoTag& b) {
  if (a.mode != b.mode) throw std::invalid_argument("geo_distance: planar and spherical tags cannot be mixed");
  if (a.mode == GeoMode::planar) return std::hypot(a.a - b.a, a.b - b.b);
  constexpr double rad = std::numbers::pi / 180.0;
  const double dlat = (b.a - a.a) * rad, dlon = (b.b - a.b) * rad;
  const double s1 = std::sin(dlat / 2), s2 = std::sin(dlon / 2);
  const double h = s1 * s1 + std::cos(a.a * rad) * std::cos(b.a * rad) * s2 * s2;
  return 2.0 * kEarthRadiusMeters * std::asin(std::min(1.0, std::sqrt(h)));
}

void DescriptorIndex::add(IndexRecord record) {
  if (records.empty() && dim == 0) {
    dim = static_cast<std::uint32_t>(record.descriptor.size());
    mode = record.geo.mode;
  }
  if (record.descriptor.size() != dim) throw std::invalid_argument("index: descriptor dimension mismatch for " + record.id);
  if (record.geo.mode != mode) throw std::invalid_argument("index: geo mode mismatch for " + record.id);
  if (record.id.size() > 0xFFFF) throw std::invalid_argument("index: id longer than 65535 bytes");
  double s = 0.0;
  for (float v : record.descriptor) s += static_cast<double>(v) * v;
  if (std::abs(std::sqrt(s) - 1.0) > 1e-3) throw std::invalid_argument("index: descriptor of " + record.id + " is not unit norm");
  records.push_back(std::move(record));
}

namespace {

constexpr char kIndexMagic[8] = {'C', 'V', 'P', 'R', 'I', 'D', 'X', '1'};

template <typename U>
void put_le(std::vector<std::uint8_t>& out, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

struct Reader {
  const std::vector<std::uint8_t>& bytes;
  std::size_t pos = 0;

  void need(std::size_t n) const {
    if (pos + n > bytes.size()) throw std::runtime_error("index file truncated at byte " + std::to_string(pos));
  }
  template <typename U>
  U get() {
    need(sizeof(U));
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(static_cast<U>(bytes[pos + i]) << (8 * i));
    pos += sizeof(U);
    return v;
  }
};

}  // namespace

std::vector<std::uint8_t> serialize_index(const DescriptorIndex& index) {
  std::vector<std::uint8_t> out(kIndexMagic, kIndexMagic + 8);
  put_le<std::uint32_t>(out, 1);
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(index.records.size()));
  put_le<std::uint32_t>(out, index.dim);
  out.push_back(static_cast<std::uint8_t>(index.mode));
  for (const auto& r : index.records) {
    put_le<std::uint16_t>(out, static_cast<std::uint16_t>(r.id.size()));
    out.insert(out.end(), r.id.begin(), r.id.end());
    for (float v : r.descriptor) put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(v));
    put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(r.geo.a));
    put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(r.geo.b));
  }
  return out;
}

DescriptorIndex deserialize_index(const std::vector<std::uint8_t>& bytes) {
  Reader rd{bytes};
  rd.need(8);
  if (std::memcmp(bytes.data(), kIndexMagic, 8) != 0) throw std::runtime_error("index file: bad magic");
  rd.pos = 8;
  const auto version = rd.get<std::uint32_t>();
  if (version != 1) throw std::runtime_error("index file: unsupported version " + std::to_string(version));
  const auto count = rd.get<std::uint32_t>();
  DescriptorIndex idx;
  idx.dim = rd.get<std::uint32_t>();
  const auto mode = rd.get<std::uint8_t>();
  if (mode > 1) throw std::runtime_error("index file: unknown geo mode");
  idx.mode = static_cast<GeoMode>(mode);
  idx.records.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    IndexRecord r;
    const auto len = rd.get<std::uint16_t>();
    rd.need(len);
    r.id.assign(reinterpret_cast<const char*>(bytes.data() + rd.pos), len);
    rd.pos += len;
    r.descriptor.resize(idx.dim);
    for (auto& v : r.descriptor) v = std::bit_cast<float>(rd.get<std::uint32_t>());
    r.geo.mode = idx.mode;
    r.geo.a = std::bit_cast<double>(rd.get<std::uint64_t>());
    r.geo.b = std::bit_cast<double>(rd.get<std::uint64_t>());
    idx.records.push_back(std::move(r));
  }
  if (rd.pos != bytes.size()) throw std::runtime_error("index file: trailing bytes");
  return idx;
}

void save_index(const DescriptorIndex& index, const std::filesystem::path& path) {
  auto bytes = serialize_index(index);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write index " + path.string());
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

DescriptorIndex load_index(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot read index " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return deserialize_index(bytes);
}

std::vector<Hit> rank_all(const DescriptorIndex& index, std::span<const double> descriptor) {
  if (!index.records.empty() && descriptor.size() != index.dim) {
    throw std::invalid_argument("query: descriptor dimension " + std::to_string(descriptor.size()) +
                                " != index dimension " + std::to_string(index.dim));
  }
  std::vector<Hit> hits(index.records.size());
  for (std::size_t r = 0; r < index.records.size(); ++r) {
    const auto& d = index.records[r].descriptor;
    double s = 0.0;
    for (std::size_t j = 0; j < d.size(); ++j) s += static_cast<double>(d[j]) * descriptor[j];
    hits[r] = Hit{r, index.records[r].id, s};
  }
  std::sort(hits.begin(), hits.end(), [](const Hit& a, const Hit& b) {
    return a.similarity > b.similarity || (a.similarity == b.similarity && a.id < b.id);
  });
  return hits;
}

TopK query_topk(const DescriptorIndex& index, std::span<const double> descriptor, std::size_t k) {
  if (k == 0) throw std::invalid_argument("query_topk: k must be >= 1");
  TopK out;
  out.hits = rank_all(index, descriptor);
  if (k > out.hits.size()) {
    out.truncated_k = true;
  } else {
    out.hits.resize(k);
  }
  return out;
}

double EvalReport::at(std::size_t k) const {
  for (std::size_t i = 0; i < ks.size(); ++i)
    if (ks[i] == k) return recall[i];
  throw std::out_of_range("EvalReport: k=" + std::to_string(k) + " not evaluated");
}

std::string EvalReport::to_text() const {
  std::ostringstream os;
  os << "k,recall,queries,threshold_m\n";
  for (std::size_t i = 0; i < ks.size(); ++i)
    os << ks[i] << ',' << std::setprecision(9) << recall[i] << ',' << query_count << ',' << threshold << '\n';
  return os.str();
}

EvalReport recall_at_k(const DescriptorIndex& index, const std::vector<EvalQuery>& queries,
                       std::vector<std::size_t> ks, double threshold) {
  if (!(threshold > 0.0)) throw std::invalid_argument("recall_at_k: threshold must be > 0");
  if (ks.empty()) throw std::invalid_argument("recall_at_k: no k values");
  std::sort(ks.begin(), ks.end());
  ks.erase(std::unique(ks.begin(), ks.end()), ks.end());
  if (ks.front() == 0) throw std::invalid_argument("recall_at_k: k must be >= 1");
  EvalReport rep;
  rep.ks = ks;
  rep.threshold = threshold;
  rep.query_count = queries.size();
  std::vector<std::size_t> hits(ks.size(), 0);
  for (const auto& q : queries) {
    bool reachable = false;
    for (const auto& r : index.records)
      if (geo_distance(q.geo, r.geo) <= threshold) {
        reachable = true;
        break;
      }
    if (!reachable) rep.unreachable.push_back(q.id);
    auto ranked = rank_all(index, q.descriptor);
    std::size_t first = ranked.size();  // rank of first correct item
    for (std::size_t i = 0; i < ranked.size(); ++i)
      if (geo_distance(q.geo, index.records[ranked[i].record].geo) <= threshold) {
        first = i;
        break;
      }
    for (std::size_t i = 0; i < ks.size(); ++i)
      if (first < ks[i]) ++hits[i];
  }
  for (std::size_t i = 0; i < ks.size(); ++i)
    rep.recall.push_back(queries.empty() ? 0.0 : static_cast<double>(hits[i]) / static_cast<double>(queries.size()));
  return rep;
}

// ---------------------------------------------------------------------------

namespace {

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : line) {
    if (ch == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (ch != '\r') {
      cur.push_back(ch);
    }
  }
  out.push_back(cur);
  return out;
}

double parse_double(const std::string& s, std::size_t line_no) {
  try {
    std::size_t used = 0;
    double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw std::runtime_error("manifest line " + std::to_string(line_no) + ": bad number '" + s + "'");
  }
}

std::string fmt_double(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

}  // namespace

std::vector<ManifestRow> parse_manifest(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error("manifest: empty file (header required)");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != kManifestHeader) throw std::runtime_error("manifest: header must be '" + std::string(kManifestHeader) + "'");
  std::vector<ManifestRow> rows;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    auto f = split_csv(line);
    if (f.size() != 5) throw std::runtime_error("manifest line " + std::to_string(line_no) + ": expected 5 fields");
    ManifestRow r;
    r.id = f[0];
    r.path = f[1];
    r.lat = parse_double(f[2], line_no);
    r.lon = parse_double(f[3], line_no);
    if (f[4] == "planar") {
      r.mode = GeoMode::planar;
    } else if (f[4] == "spherical") {
      r.mode = GeoMode::spherical;
      GeoTag::spherical(r.lat, r.lon);
    } else {
      throw std::runtime_error("manifest line " + std::to_string(line_no) + ": mode must be planar|spherical");
    }
    if (r.id.empty()) throw std::runtime_error("manifest line " + std::to_string(line_no) + ": empty id");
    rows.push_back(std::move(r));
  }
  return rows;
}

std::string format_manifest(const std::vector<ManifestRow>& rows) {
  std::ostringstream os;
  os << kManifestHeader << '\n';
  for (const auto& r : rows)
    os << r.id << ',' << r.path << ',' << fmt_double(r.lat) << ',' << fmt_double(r.lon) << ','
       << (r.mode == GeoMode::planar ? "planar" : "spherical") << '\n';
  return os.str();
}

std::vector<ManifestRow> read_manifest(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot read manifest " + path.string());
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_manifest(ss.str());
}

void write_manifest(const std::filesystem::path& path, const std::vector<ManifestRow>& rows) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write manifest " + path.string());
  f << format_manifest(rows);
}

}  // namespace clusvpr
