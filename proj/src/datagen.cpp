#include "clusvpr/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <sstream>
#include <stdexcept>

namespace clusvpr {

void write_ppm(const std::filesystem::path& path, const Image8& img) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write image " + path.string());
  f << "P6\n" << img.width << ' ' << img.height << "\n255\n";
  f.write(reinterpret_cast<const char*>(img.rgb.data()), static_cast<std::streamsize>(img.rgb.size()));
}

Image8 read_ppm(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot read image " + path.string());
  std::string magic;
  std::size_t maxval = 0;
  Image8 img;
  f >> magic >> img.width >> img.height >> maxval;
  if (magic != "P6" || maxval != 255 || img.width == 0 || img.height == 0) {
    throw std::runtime_error("image " + path.string() + ": expected 8-bit binary PPM (P6)");
  }
  f.get();  // single whitespace after the header
  img.rgb.resize(img.width * img.height * 3);
  f.read(reinterpret_cast<char*>(img.rgb.data()), static_cast<std::streamsize>(img.rgb.size()));
  if (f.gcount() != static_cast<std::streamsize>(img.rgb.size())) {
    throw std::runtime_error("image " + path.string() + ": truncated pixel data");
  }
  return img;
}

Tensor image_tensor(const Image8& img) {
  Tensor t({img.height, img.width, 3});
  for (std::size_t i = 0; i < img.rgb.size(); ++i) t.data[i] = img.rgb[i] / 255.0;
  return t;
}

Tensor load_image(const std::filesystem::path& path) { return image_tensor(read_ppm(path)); }

void WorldSpec::validate(double positive_radius, double negative_radius) const {
  if (places < 2 || variants < 3) throw std::invalid_argument("world: need >= 2 places and >= 3 variants");
  if (!(spacing > 2.0 * negative_radius)) {
    throw std::invalid_argument("world: spacing must exceed twice the negative radius");
  }
  if (!(jitter < positive_radius) || jitter < 0) throw std::invalid_argument("world: jitter must be < positive radius");
  if (image_size == 0) throw std::invalid_argument("world: image size must be > 0");
  if (!(gain_min > 0 && gain_max >= gain_min)) throw std::invalid_argument("world: bad gain range");
  if (!(occlusion_max_fraction >= 0 && occlusion_max_fraction <= 0.25)) {
    throw std::invalid_argument("world: occlusions are limited to 25% of the image");
  }
  if (!(gallery_fraction > 0 && train_query_fraction >= 0 && gallery_fraction + train_query_fraction < 1.0)) {
    throw std::invalid_argument("world: split fractions must leave room for held-out queries");
  }
}

GeoTag place_center(const WorldSpec& spec, std::size_t place) {
  const auto cols = static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(spec.places))));
  return GeoTag::planar(static_cast<double>(place % cols) * spec.spacing,
                        static_cast<double>(place / cols) * spec.spacing);
}

namespace {

// Canvas of floats in [0,1], channel-last.
struct Canvas {
  std::size_t size = 0;
  std::vector<double> px;
  double& at(std::size_t y, std::size_t x, std::size_t c) { return px[(y * size + x) * 3 + c]; }
};

// Multi-scale value noise plus a few solid motifs, unique per place.
Canvas place_texture(std::size_t size, Rng& rng) {
  Canvas cv{size, std::vector<double>(size * size * 3, 0.0)};
  double amp = 0.5, total = 0.0;
  for (std::size_t cells : {2u, 4u, 8u}) {
    std::vector<double> grid((cells + 1) * (cells + 1) * 3);
    for (auto& g : grid) g = rng.uniform();
    for (std::size_t y = 0; y < size; ++y)
      for (std::size_t x = 0; x < size; ++x) {
        const double fy = static_cast<double>(y) * cells / size, fx = static_cast<double>(x) * cells / size;
        const auto iy = static_cast<std::size_t>(fy), ix = static_cast<std::size_t>(fx);
        const double ty = fy - iy, tx = fx - ix;
        for (std::size_t c = 0; c < 3; ++c) {
          auto g = [&](std::size_t a, std::size_t b) { return grid[(a * (cells + 1) + b) * 3 + c]; };
          const double v = (1 - ty) * ((1 - tx) * g(iy, ix) + tx * g(iy, ix + 1)) +
                           ty * ((1 - tx) * g(iy + 1, ix) + tx * g(iy + 1, ix + 1));
          cv.at(y, x, c) += amp * v;
        }
      }
    total += amp;
    amp *= 0.5;
  }
  for (auto& v : cv.px) v /= total;

  const std::size_t motifs = 3 + rng.uniform_index(3);
  for (std::size_t m = 0; m < motifs; ++m) {
    const double col[3] = {rng.uniform(), rng.uniform(), rng.uniform()};
    const bool disc = rng.uniform() < 0.5;
    const double cy = rng.uniform(0, size), cx = rng.uniform(0, size);
    const double r = rng.uniform(0.08, 0.22) * size;
    const double hy = rng.uniform(0.05, 0.2) * size, hx = rng.uniform(0.05, 0.2) * size;
    for (std::size_t y = 0; y < size; ++y)
      for (std::size_t x = 0; x < size; ++x) {
        const double dy = y - cy, dx = x - cx;
        const bool inside = disc ? (dy * dy + dx * dx <= r * r) : (std::abs(dy) <= hy && std::abs(dx) <= hx);
        if (inside)
          for (std::size_t c = 0; c < 3; ++c) cv.at(y, x, c) = col[c];
      }
  }
  return cv;
}

std::uint8_t to_byte(double v) {
  v = std::clamp(v, 0.0, 1.0);
  return static_cast<std::uint8_t>(std::lround(v * 255.0));
}

std::string row_id(std::size_t place, std::size_t variant) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "p%03zu_v%02zu", place, variant);
  return buf;
}

}  // namespace

std::vector<std::pair<ManifestRow, Image8>> render_world(const WorldSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);
  const std::size_t s = spec.image_size, canvas = s + 2 * spec.shift_max;
  std::vector<std::pair<ManifestRow, Image8>> out;
  for (std::size_t p = 0; p < spec.places; ++p) {
    Canvas tex = place_texture(canvas, rng);
    const GeoTag center = place_center(spec, p);
    for (std::size_t v = 0; v < spec.variants; ++v) {
      // draw order per variant: shift, gain, occlusions, jitter, pixel noise
      const std::size_t oy = rng.uniform_index(2 * spec.shift_max + 1);
      const std::size_t ox = rng.uniform_index(2 * spec.shift_max + 1);
      const double gain = rng.uniform(spec.gain_min, spec.gain_max);
      std::vector<double> img(s * s * 3);
      for (std::size_t y = 0; y < s; ++y)
        for (std::size_t x = 0; x < s; ++x)
          for (std::size_t c = 0; c < 3; ++c) img[(y * s + x) * 3 + c] = gain * tex.at(y + oy, x + ox, c);

      const std::size_t occ = spec.occlusions_max ? rng.uniform_index(spec.occlusions_max + 1) : 0;
      for (std::size_t o = 0; o < occ; ++o) {
        const double frac = rng.uniform(0.02, spec.occlusion_max_fraction);
        const double aspect = rng.uniform(0.5, 2.0);
        const auto h = std::clamp<std::size_t>(static_cast<std::size_t>(std::sqrt(frac * s * s * aspect)), 1, s);
        const auto w = std::clamp<std::size_t>(static_cast<std::size_t>(frac * s * s / h), 1, s);
        const std::size_t y0 = rng.uniform_index(s - h + 1), x0 = rng.uniform_index(s - w + 1);
        const double col[3] = {rng.uniform(), rng.uniform(), rng.uniform()};
        for (std::size_t y = y0; y < y0 + h; ++y)
          for (std::size_t x = x0; x < x0 + w; ++x)
            for (std::size_t c = 0; c < 3; ++c) img[(y * s + x) * 3 + c] = col[c];
      }

      const double radius = spec.jitter * std::sqrt(rng.uniform());
      const double angle = 2.0 * std::numbers::pi * rng.uniform();
      Image8 im{s, s, std::vector<std::uint8_t>(s * s * 3)};
      for (std::size_t i = 0; i < img.size(); ++i) im.rgb[i] = to_byte(img[i] + spec.pixel_noise * rng.normal());

      ManifestRow row;
      row.id = row_id(p, v);
      row.path = "images/" + row.id + ".ppm";
      row.lat = center.a + radius * std::cos(angle);
      row.lon = center.b + radius * std::sin(angle);
      row.mode = GeoMode::planar;
      out.emplace_back(std::move(row), std::move(im));
    }
  }
  return out;
}

WorldSplit synth_world(const WorldSpec& spec, const std::filesystem::path& out_dir) {
  auto world = render_world(spec);
  std::filesystem::create_directories(out_dir / "images");
  const auto n_gallery = static_cast<std::size_t>(std::lround(spec.gallery_fraction * spec.variants));
  const auto n_train = static_cast<std::size_t>(std::lround(spec.train_query_fraction * spec.variants));
  WorldSplit split;
  for (std::size_t i = 0; i < world.size(); ++i) {
    const auto& [row, img] = world[i];
    write_ppm(out_dir / row.path, img);
    const std::size_t v = i % spec.variants;
    if (v < n_gallery) {
      split.gallery.push_back(row);
    } else if (v < n_gallery + n_train) {
      split.train_queries.push_back(row);
    } else {
      split.test_queries.push_back(row);
    }
  }
  write_manifest(out_dir / "gallery.csv", split.gallery);
  write_manifest(out_dir / "train_queries.csv", split.train_queries);
  write_manifest(out_dir / "test_queries.csv", split.test_queries);
  return split;
}

}  // namespace clusvpr
