#pragma once

#include "latent_lens/classifier.hpp"
#include "latent_lens/dvae.hpp"
#include "latent_lens/infotheory.hpp"
#include "latent_lens/intervention.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace latent_lens::explainer {

struct DeconvSpec {
  int out_channels = 32;
  int kernel = 3;
  int stride = 2;
};

struct GeneratorConfig {
  ImageShape output_shape{3, 32, 32};
  /// Channels of the grid produced by the initial linear layer.
  int base_channels = 64;
  std::vector<DeconvSpec> deconv_layers{{32, 3, 2}, {16, 3, 2}, {3, 3, 2}};
  /// Weight of the inverse-similarity penalty; 0 disables it. When
  /// `calibrate_lambda` is set the weight is relative: the effective weight is
  /// lambda * recon_0 * dot_0, so the penalty starts at lambda times the initial
  /// reconstruction loss whatever the scale of the information vectors.
  /// Training rescales the head information to unit sum at every step.
  double lambda = 0.1;
  bool calibrate_lambda = true;
  /// Global gradient-norm clip for generator updates; 0 disables.
  double clip_norm = 0.0;
  int epochs = 10;
  int batch_size = 64;
  double learning_rate = 1e-3;
  std::uint64_t seed = 0;
  /// Probe used by the training penalty (samples per coordinate).
  infotheory::GaussianProbe probe{8, 0};
  /// Coordinates importance-sampled per step for the generator information.
  int coords_per_step = 4;
  /// Batch members used as probe centers per step.
  int centers_per_step = 1;
  /// Probe for the per-epoch alignment diagnostic.
  int log_centers = 4;
  int log_samples = 8;

  void validate() const;
};

void to_json(nlohmann::json& j, const GeneratorConfig& c);
void from_json(const nlohmann::json& j, GeneratorConfig& c);

struct GeneratorEpochLog {
  int epoch = 0;
  double effective_lambda = 0.0;
  double recon = 0.0;
  /// Mean penalty value over the epoch's training steps (zero when lambda = 0).
  double train_penalty = 0.0;
  /// Penalty and alignment evaluated on a fixed probe after the epoch; the
  /// same computation runs whether or not lambda is zero. The penalty uses the
  /// head information rescaled to unit sum, as in training. Epoch 0 describes
  /// the untrained generator.
  double penalty = 0.0;
  double info_alignment = 0.0;
};

void to_json(nlohmann::json& j, const GeneratorEpochLog& e);
void from_json(const nlohmann::json& j, GeneratorEpochLog& e);

nn::Sequential build_generator(const GeneratorConfig& config, Index repr_dim, Rng& init_rng);

/// Mean binary cross-entropy over pixels and images, outputs clamped at 1e-6.
double reconstruction_bce(const Matrix& renders, const Matrix& images);

class TrainedGenerator {
 public:
  TrainedGenerator(GeneratorConfig config, nn::Sequential net, std::string classifier_checksum,
                   std::string dvae_checksum, std::vector<GeneratorEpochLog> log);

  const GeneratorConfig& config() const noexcept { return config_; }
  const nn::Sequential& network() const noexcept { return net_; }
  const std::vector<GeneratorEpochLog>& training_log() const noexcept { return log_; }
  const std::string& classifier_checksum() const noexcept { return classifier_checksum_; }
  const std::string& dvae_checksum() const noexcept { return dvae_checksum_; }
  Index repr_dim() const noexcept { return net_.input_size(); }
  const ImageShape& output_shape() const noexcept { return config_.output_shape; }

  /// g(repr) as a flattened CHW image in [0,1].
  Vector explain(const Vector& repr) const;
  Matrix render(const Matrix& reprs) const;

  std::string checksum() const;
  void save(const std::filesystem::path& dir) const;
  static TrainedGenerator load(const std::filesystem::path& dir,
                               const std::optional<std::string>& expected_dvae_checksum = {});

 private:
  GeneratorConfig config_;
  nn::Sequential net_;
  std::string classifier_checksum_;
  std::string dvae_checksum_;
  std::vector<GeneratorEpochLog> log_;
};

using GeneratorEpochCallback = std::function<void(const GeneratorEpochLog&)>;

/// Trains g on pairs (phi'(x), x) with the classifier and DVAE frozen.
/// Throws ArtifactError if either upstream checksum changes during training.
TrainedGenerator train_generator(const GeneratorConfig& config,
                                 const classifier::TrainedClassifier& clf,
                                 const dvae::TrainedDVAE& dvae,
                                 const datagen::LabeledImageSet& dataset,
                                 const GeneratorEpochCallback& on_epoch = {});

/// Generator and head information vectors at the given centers, and their cosine.
struct AlignmentReport {
  infotheory::InfoVector info_g;
  infotheory::InfoVector info_f;
  double alignment = 0.0;
};

void to_json(nlohmann::json& j, const AlignmentReport& r);

AlignmentReport measure_alignment(const nn::Sequential& generator,
                                  const classifier::TrainedClassifier& clf, const Matrix& centers,
                                  const infotheory::GaussianProbe& probe);

struct ExplanationPanel {
  long sample_id = -1;
  int label = -1;
  int confound = -1;
  Vector original;
  Vector factual_render;
  Vector counterfactual_render;
  double p_original = 0.0;
  double p_counterfactual = 0.0;
  bool prediction_changed = false;
  intervention::InterventionMask mask;
  std::vector<int> bits;
  double b_original = 0.0;
  double b_factual = 0.0;
  double b_counterfactual = 0.0;
};

/// Panel metadata (everything except pixel data).
void to_json(nlohmann::json& j, const ExplanationPanel& p);

/// Renders g(phi'(x)) and g(psi(x)) for the mask; `image` is one flattened CHW image.
ExplanationPanel concept_panel(const TrainedGenerator& gen, const dvae::TrainedDVAE& dvae,
                               const classifier::TrainedClassifier& clf, const Vector& image,
                               const intervention::InterventionMask& mask);

/// Chooses the mask by strategy. A greedy search that fails yields an empty
/// greedy_minimal mask.
ExplanationPanel concept_panel(const TrainedGenerator& gen, const dvae::TrainedDVAE& dvae,
                               const classifier::TrainedClassifier& clf, const Vector& image,
                               intervention::Strategy strategy,
                               std::optional<int> greedy_budget = {});

/// One row per panel: original | factual | counterfactual.
void write_panel_grid(const std::filesystem::path& png_path, std::span<const ExplanationPanel> panels,
                      const ImageShape& shape, int scale = 3);

}  // namespace latent_lens::explainer
