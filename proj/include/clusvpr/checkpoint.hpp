#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "clusvpr/model.hpp"

namespace clusvpr {

// Model checkpoint: little-endian, magic CVPRMDL1, u32 version, u32 section
// count; each section is u16 name length, name, u32 rank, rank x u32 dims,
// f64 payload. Sections: meta.config, every backbone / cwtnet.<b> / optlad
// parameter by name, and pca.mean / pca.projection / pca.eigenvalues when fitted.

struct CheckpointSection {
  std::string name;
  Tensor value;
};

std::vector<std::uint8_t> serialize_model(const ClusVpr& model);
ClusVpr deserialize_model(const std::vector<std::uint8_t>& bytes);
void save_model(const ClusVpr& model, const std::filesystem::path& path);
ClusVpr load_model(const std::filesystem::path& path);

std::vector<CheckpointSection> read_sections(const std::vector<std::uint8_t>& bytes);

}  // namespace clusvpr
