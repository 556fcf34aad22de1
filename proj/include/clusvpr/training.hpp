#pragma once

#include <filesystem>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "clusvpr/datagen.hpp"
#include "clusvpr/model.hpp"
#include "clusvpr/pyramid.hpp"
#include "clusvpr/retrieval.hpp"

namespace clusvpr {

struct MiningConfig {
  double positive_radius = 10.0;   // closed: d <= r
  double negative_radius = 25.0;   // open: d > r
  std::size_t pool = 500;          // descriptor neighbours eligible as negatives
  std::size_t negatives = 10;      // M
  std::size_t high_ranked = 4;     // K_pos
};

/// Positions in DescriptorIndex::records.
struct Triplet {
  std::size_t positive = 0;               // p*
  std::vector<std::size_t> negatives;     // n_1..n_M
  std::vector<std::size_t> high_ranked;   // p^1..p^K_pos
};

struct MiningResult {
  std::optional<Triplet> triplet;
  std::vector<std::string> warnings;
};

/// p* = descriptor-nearest gallery item within the positive radius; the next
/// in-radius items are the high-ranked positives; negatives are drawn uniformly
/// without replacement from the top-`pool` neighbours beyond the negative radius
/// (the pool widens to the whole gallery, with a warning, when it is too small).
MiningResult mine_triplets(const DescriptorIndex& index, std::span<const double> query_descriptor,
                           const GeoTag& query_geo, const MiningConfig& config, Rng& rng,
                           const std::string& query_id = {});

/// sum_i -log(e^{<q,p>} / (e^{<q,p>} + e^{<q,n_i>})), log-sum-exp stabilised.
double softmax_triplet_loss(std::span<const double> query, std::span<const double> positive,
                            const std::vector<std::vector<double>>& negatives);
/// Same loss written as sum_i log(1 + exp(<q,n_i> - <q,p>)).
double softmax_triplet_loss_log1p(std::span<const double> query, std::span<const double> positive,
                                  const std::vector<std::vector<double>>& negatives);

struct TripletLossGrad {
  double loss = 0.0;
  std::vector<double> query, positive;
  std::vector<std::vector<double>> negatives;
};
TripletLossGrad softmax_triplet_loss_grad(std::span<const double> query, std::span<const double> positive,
                                          const std::vector<std::vector<double>>& negatives);

/// L_t + lambda_s * sum_k L_s(q, p^k).
double total_loss(double triplet_loss, std::span<const double> pyramid_losses, double lambda_s);

/// SGD with momentum and coupled weight decay: v = mu v + (g + wd theta); theta -= lr v.
class Sgd {
 public:
  Sgd(ParamList params, double lr, double momentum, double weight_decay);
  void step();
  void reset();  // drop momentum buffers

 private:
  ParamList params_;
  double lr_, momentum_, weight_decay_;
  std::vector<std::vector<double>> velocity_;
};

struct TrainConfig {
  double learning_rate = 1e-4;
  double weight_decay = 1e-3;
  double momentum = 0.9;
  std::size_t batch_size = 4;
  MiningConfig mining;
  GenerationSchedule schedule;
  std::uint64_t seed = 7;
  std::size_t kmeans_images = 64;     // gallery images sampled for centre initialisation
  double eval_threshold = 25.0;

  void validate() const;
};

struct Sample {
  ManifestRow row;
  Tensor image;
};

struct TrainingData {
  std::vector<Sample> gallery, train_queries, test_queries;
};

/// Loads gallery.csv / train_queries.csv / test_queries.csv (image paths relative to dir).
TrainingData load_training_data(const std::filesystem::path& dir);
std::vector<Sample> load_samples(const std::filesystem::path& manifest);

/// One query's training example: images plus, per high-ranked positive, an optional target.
struct QueryExample {
  const Tensor* query = nullptr;
  const Tensor* positive = nullptr;
  std::vector<const Tensor*> negatives;
  std::vector<const Tensor*> high_ranked;
  std::vector<const PyramidScores*> targets;  // same length as high_ranked; null -> no pyramid term
  double lambda_s = 0.0;
};

struct QueryLoss {
  double triplet = 0.0;
  double pyramid = 0.0;  // sum over high-ranked positives
  double total = 0.0;
};

/// Forward pass of the total loss; when `grad_scale` is set, also accumulates
/// grad_scale * dL/dtheta into the model's parameter grads.
QueryLoss query_loss(ClusVpr& model, const QueryExample& example, std::optional<double> grad_scale = std::nullopt);

/// Thrown when the loss turns non-finite; the previous checkpoint stays valid.
struct NumericalFailure : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct GenerationResult {
  std::filesystem::path checkpoint;
  double recall1 = 0.0;  // held-out, after PCA, at the generation checkpoint
};

struct TrainResult {
  std::filesystem::path initial_checkpoint;
  double initial_recall1 = 0.0;
  std::vector<GenerationResult> generations;
  std::filesystem::path metrics_log;
};

inline constexpr const char* kMetricsHeader = "generation,epoch,step,loss_t,loss_s,recall1";

/// Builds the model from `seed`, initialises OptLAD centres, writes init.ckpt,
/// then runs the generational loop writing gen<g>.ckpt, targets_gen<g>.bin and
/// metrics.csv into out_dir.
TrainResult train_generations(const TrainingData& data, const ModelConfig& model_config, const TrainConfig& config,
                              const std::filesystem::path& out_dir);

/// Index of pre-PCA embeddings (used for mining) or of stored descriptors.
DescriptorIndex embed_index(const ClusVpr& model, const std::vector<Sample>& samples, bool apply_pca);
std::vector<EvalQuery> embed_queries(const ClusVpr& model, const std::vector<Sample>& samples, bool apply_pca);

/// k-means centre initialisation from refined, expanded pixel descriptors of `images`.
void init_optlad_centers(ClusVpr& model, const std::vector<const Tensor*>& images, Rng& rng);
/// Fits PCA on the gallery embeddings and installs it in the model.
std::vector<std::string> fit_model_pca(ClusVpr& model, const std::vector<Sample>& gallery);

// ---------------------------------------------------------------------------

struct GradCheckOptions {
  double step = 1e-5;
  double tolerance = 1e-4;
  std::size_t max_coords = 0;  // 0 -> every coordinate
  std::uint64_t seed = 1;      // coordinate sampling
};

/// Central-difference check of every parameter tensor's gradient of the total loss.
std::vector<GradCheckReport> gradient_check_suite(ClusVpr& model, const QueryExample& example,
                                                  const GradCheckOptions& options = {});

/// A self-contained tiny example for gradient checking: rendered images, a
/// perturbed model, and pyramid targets from a differently perturbed copy.
struct GradCheckFixture {
  ClusVpr model;
  std::vector<Tensor> images;
  std::vector<PyramidScores> targets;
  QueryExample example;
};

/// Uses the world spec to render images; the example holds pointers into the fixture.
std::unique_ptr<GradCheckFixture> make_gradcheck_fixture(const ModelConfig& model_config, const WorldSpec& world,
                                                         std::uint64_t seed, double lambda_s = 0.55,
                                                         double temperature = 0.06);

/// Adds N(0, scale^2) noise to every parameter (so zero-initialised layers pass signal).
void perturb_parameters(ClusVpr& model, Rng& rng, double scale);

}  // namespace clusvpr
