#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <tuple>
#include <vector>

#include "clusvpr/model.hpp"

namespace clusvpr {

/// A rectangle of cells on a `grid` x `grid` partition of the feature map.
struct PatchCell {
  std::size_t row = 0, col = 0, rows = 1, cols = 1;
  bool operator==(const PatchCell&) const = default;
};

struct PyramidComposition {
  std::size_t grid = 2;
  std::vector<PatchCell> cells;

  /// 2 x 2 split: four quarter patches.
  static PyramidComposition query_default();
  /// 4 x 4 split (16), 2 x 2 quadrant merges (4), full map (1), central 2 x 2 merge (1).
  static PyramidComposition positive_default();
};

enum class PatchRole { query, positive };

struct PatchPyramid {
  PatchRole role = PatchRole::query;
  PyramidComposition composition;
  std::vector<Tensor> patches;  // C x h x w crops, composition order
};

PatchPyramid build_pyramid(const Tensor& fmap, PatchRole role);
PatchPyramid build_pyramid(const Tensor& fmap, PatchRole role, const PyramidComposition& composition);

/// Adds a patch gradient back into the full-map gradient.
void scatter_patch_grad(Tensor& grad_map, const Tensor& grad_patch, const PatchCell& cell, std::size_t grid);

struct PyramidScores {
  std::vector<double> values;  // query-major: index a * positives + b
  double temperature = 1.0;
  std::size_t queries = 0, positives = 0;
};

/// softmax over <q_a, p_b> / tau for every pair. All representations must be unit length (1e-4).
PyramidScores pyramid_scores(const std::vector<std::vector<double>>& query_reps,
                             const std::vector<std::vector<double>>& positive_reps, double temperature);

inline constexpr double kKlEpsilon = 1e-12;

/// sum_i target_i log(target_i / current_i), with both clamped at 1e-12 inside the logs.
double pyramid_loss(const PyramidScores& current, const PyramidScores& target);
/// dL/d(current.values).
std::vector<double> pyramid_loss_grad(const PyramidScores& current, const PyramidScores& target);

double entropy(std::span<const double> p);

struct GenerationSchedule {
  std::size_t generations = 5;             // omega
  std::size_t epochs_per_generation = 8;
  std::vector<double> temperatures{0.06};  // per generation; the last value repeats
  double lambda_s = 0.55;
  std::size_t high_ranked_positives = 4;   // K_pos

  double temperature(std::size_t generation) const;
  void validate() const;
};

/// Pyramid targets of the frozen previous-generation model, keyed by
/// (generation, query id, positive id). Write-once per key.
class TargetCache {
 public:
  using Key = std::tuple<std::uint32_t, std::string, std::string>;

  const PyramidScores* find(std::uint32_t generation, const std::string& query, const std::string& positive) const;
  const PyramidScores& insert(std::uint32_t generation, const std::string& query, const std::string& positive,
                              PyramidScores scores);
  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  void clear() { entries_.clear(); }

  /// Binary sidecar: magic CVPRTGT1, u32 count, then per entry
  /// u32 generation, u16+bytes query id, u16+bytes positive id, f64 tau,
  /// u32 queries, u32 positives, f64 values.
  void save(const std::filesystem::path& path) const;
  static TargetCache load(const std::filesystem::path& path);

  const std::map<Key, PyramidScores>& entries() const { return entries_; }

 private:
  std::map<Key, PyramidScores> entries_;
};

/// Patch representations of a query / positive map under a model (forward only).
std::vector<std::vector<double>> encode_pyramid(const ClusVpr& model, const PatchPyramid& pyramid);

/// Target scores S_{prev}(tau) for one query/positive image pair.
PyramidScores pyramid_target(const ClusVpr& frozen, const Tensor& query_image, const Tensor& positive_image,
                             double temperature);

struct TargetPair {
  std::string query_id, positive_id;
  const Tensor* query_image = nullptr;
  const Tensor* positive_image = nullptr;
};

/// Fills the cache for every pair not already present. Generation 0 has no
/// previous model: nothing is computed and the cache stays empty.
void generation_targets(const ClusVpr* frozen, std::uint32_t generation, const std::vector<TargetPair>& pairs,
                        double temperature, TargetCache& cache);

}  // namespace clusvpr
