#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "clusvpr/numerics.hpp"

namespace clusvpr {

enum class GeoMode : std::uint8_t { planar = 0, spherical = 1 };

/// Planar: (x m, y m). Spherical: (lat deg, lon deg).
struct GeoTag {
  GeoMode mode = GeoMode::planar;
  double a = 0.0;
  double b = 0.0;

  static GeoTag planar(double x, double y) { return {GeoMode::planar, x, y}; }
  static GeoTag spherical(double lat, double lon);
  bool operator==(const GeoTag&) const = default;
};

inline constexpr double kEarthRadiusMeters = 6371000.0;

/// Euclidean (planar) or haversine (spherical) distance in metres.
double geo_distance(const GeoTag& a, const GeoTag& b);

struct IndexRecord {
  std::string id;
  std::vector<float> descriptor;
  GeoTag geo;
};

struct DescriptorIndex {
  GeoMode mode = GeoMode::planar;
  std::uint32_t dim = 0;
  std::vector<IndexRecord> records;

  std::size_t size() const { return records.size(); }
  /// Checks id/geo/dimension/unit-norm invariants before insertion.
  void add(IndexRecord record);
};

/// Binary little-endian index file (magic CVPRIDX1, version 1).
void save_index(const DescriptorIndex& index, const std::filesystem::path& path);
DescriptorIndex load_index(const std::filesystem::path& path);
std::vector<std::uint8_t> serialize_index(const DescriptorIndex& index);
DescriptorIndex deserialize_index(const std::vector<std::uint8_t>& bytes);

struct Hit {
  std::size_t record = 0;  // position in index.records
  std::string id;
  double similarity = 0.0;
};

struct TopK {
  std::vector<Hit> hits;
  bool truncated_k = false;  // k exceeded the index size
};

/// Exact ranking by descending inner product; ties broken by id.
TopK query_topk(const DescriptorIndex& index, std::span<const double> descriptor, std::size_t k);
/// Full ranking over every record.
std::vector<Hit> rank_all(const DescriptorIndex& index, std::span<const double> descriptor);

struct EvalQuery {
  std::string id;
  std::vector<double> descriptor;
  GeoTag geo;
};

struct EvalReport {
  std::vector<std::size_t> ks;
  std::vector<double> recall;
  std::size_t query_count = 0;
  double threshold = 25.0;
  std::vector<std::string> unreachable;  // queries without any gallery item inside the threshold

  double at(std::size_t k) const;
  /// `k,recall,queries,threshold_m` lines with a header.
  std::string to_text() const;
};

/// A query counts for k when one of its top-k results lies within `threshold` metres.
EvalReport recall_at_k(const DescriptorIndex& index, const std::vector<EvalQuery>& queries,
                       std::vector<std::size_t> ks, double threshold = 25.0);

// ---------------------------------------------------------------------------
// Dataset manifest: header `id,path,lat,lon,mode`; for planar rows lat/lon hold x/y metres.

struct ManifestRow {
  std::string id;
  std::string path;
  double lat = 0.0;
  double lon = 0.0;
  GeoMode mode = GeoMode::planar;

  GeoTag geo() const { return mode == GeoMode::planar ? GeoTag::planar(lat, lon) : GeoTag::spherical(lat, lon); }
};

inline constexpr const char* kManifestHeader = "id,path,lat,lon,mode";

std::vector<ManifestRow> read_manifest(const std::filesystem::path& path);
void write_manifest(const std::filesystem::path& path, const std::vector<ManifestRow>& rows);
std::string format_manifest(const std::vector<ManifestRow>& rows);
std::vector<ManifestRow> parse_manifest(const std::string& text);

}  // namespace clusvpr
