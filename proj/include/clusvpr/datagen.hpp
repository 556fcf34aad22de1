#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "clusvpr/numerics.hpp"
#include "clusvpr/retrieval.hpp"

namespace clusvpr {

// Images are stored as binary PPM (P6): ASCII header "P6\n<width> <height>\n255\n"
// followed by width*height RGB byte triples, row-major, top row first.

struct Image8 {
  std::size_t width = 0, height = 0;
  std::vector<std::uint8_t> rgb;  // height x width x 3
};

void write_ppm(const std::filesystem::path& path, const Image8& img);
Image8 read_ppm(const std::filesystem::path& path);
/// H x W x 3 tensor with values in [0, 1].
Tensor image_tensor(const Image8& img);
Tensor load_image(const std::filesystem::path& path);

struct WorldSpec {
  std::uint64_t seed = 7;
  std::size_t places = 25;
  double spacing = 60.0;             // metres between neighbouring place centres
  std::size_t variants = 12;
  std::size_t image_size = 32;
  double gain_min = 0.6, gain_max = 1.4;
  std::size_t occlusions_max = 2;
  double occlusion_max_fraction = 0.25;  // of image area
  double jitter = 5.0;               // metres, < positive radius
  std::size_t shift_max = 4;         // pixels of translation between variants
  double pixel_noise = 0.04;         // additive noise std (fraction of full scale)
  double gallery_fraction = 0.5;
  double train_query_fraction = 0.25;  // remainder are held-out test queries

  void validate(double positive_radius = 10.0, double negative_radius = 25.0) const;
};

struct WorldSplit {
  std::vector<ManifestRow> gallery, train_queries, test_queries;
};

/// Renders every place/variant, writes images/<id>.ppm and gallery.csv,
/// train_queries.csv, test_queries.csv under out_dir (paths relative to out_dir).
WorldSplit synth_world(const WorldSpec& spec, const std::filesystem::path& out_dir);

/// Same rendering without touching the filesystem (ids in place-then-variant order).
std::vector<std::pair<ManifestRow, Image8>> render_world(const WorldSpec& spec);

/// Place index and centre for a row produced by the generator.
GeoTag place_center(const WorldSpec& spec, std::size_t place);

}  // namespace clusvpr
