#pragma once

#include "latent_lens/datagen.hpp"
#include "latent_lens/nn/sequential.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace latent_lens::dvae {
class TrainedDVAE;
}

namespace latent_lens::classifier {

struct ConvSpec {
  int out_channels = 16;
  int kernel = 3;
  int stride = 2;
  bool operator==(const ConvSpec&) const = default;
};

struct ClassifierConfig {
  ImageShape input_shape{3, 32, 32};
  std::vector<ConvSpec> conv_layers{{16, 3, 2}, {32, 3, 2}, {64, 3, 2}};
  std::vector<int> fc_widths{128, 64};
  /// Index into fc_widths of the layer exposed as the hidden representation; -1 = last.
  int repr_layer = -1;
  /// Take the representation after the rectifier (non-negative) rather than before it.
  bool repr_post_activation = true;
  double dropout_rate = 0.2;
  int epochs = 10;
  int batch_size = 64;
  double learning_rate = 1e-3;
  std::uint64_t seed = 0;

  void validate() const;
  int repr_index() const;
  int repr_dim() const { return fc_widths.at(static_cast<std::size_t>(repr_index())); }
};

void to_json(nlohmann::json& j, const ClassifierConfig& c);
void from_json(const nlohmann::json& j, ClassifierConfig& c);

struct EpochLog {
  int epoch = 0;
  double loss = 0.0;
  double val_accuracy = 0.0;
};

void to_json(nlohmann::json& j, const EpochLog& e);
void from_json(const nlohmann::json& j, EpochLog& e);

/// Backbone maps images to the hidden representation; head maps it to one logit.
struct ClassifierNetworks {
  nn::Sequential backbone;
  nn::Sequential head;
};

ClassifierNetworks build_networks(const ClassifierConfig& config, Rng& init_rng);

/// Mean binary cross-entropy of the head's logit against `labels`. When the
/// gradient pointers are non-null, parameter gradients are accumulated into them.
/// In training mode `dropout_rng` drives the dropout masks.
double classifier_loss(const ClassifierNetworks& nets, const Matrix& images,
                       std::span<const int> labels, nn::Mode mode, Rng* dropout_rng,
                       nn::Gradients* backbone_grads = nullptr,
                       nn::Gradients* head_grads = nullptr);

/// A frozen classifier. Every accessor is const and inference-only.
class TrainedClassifier {
 public:
  TrainedClassifier(ClassifierConfig config, ClassifierNetworks nets, std::vector<EpochLog> log);

  const ClassifierConfig& config() const noexcept { return config_; }
  const ClassifierNetworks& networks() const noexcept { return nets_; }
  const std::vector<EpochLog>& training_log() const noexcept { return log_; }
  Index repr_dim() const noexcept { return nets_.backbone.output_size(); }
  const ImageShape& input_shape() const noexcept { return config_.input_shape; }

  /// phi(x) for a batch of images, one column per image.
  Matrix hidden_repr(const Matrix& images) const;
  Vector head_logits(const Matrix& repr) const;
  /// Positive-class probabilities in (0, 1); throws on non-finite input.
  Vector head_predict(const Matrix& repr) const;
  /// The head followed by a sigmoid: representation -> positive-class probability.
  nn::Sequential probability_head() const;
  /// Full model f(x) = head(backbone(x)).
  Vector predict(const Matrix& images) const;

  std::string checksum() const;
  void save(const std::filesystem::path& dir) const;
  static TrainedClassifier load(const std::filesystem::path& dir);

 private:
  ClassifierConfig config_;
  ClassifierNetworks nets_;
  std::vector<EpochLog> log_;
};

/// Called after every epoch; lets callers log progress.
using EpochCallback = std::function<void(const EpochLog&)>;

TrainedClassifier train_classifier(const ClassifierConfig& config,
                                   const datagen::LabeledImageSet& train,
                                   const datagen::LabeledImageSet& val,
                                   const EpochCallback& on_epoch = {});

/// Predicted class: 1 iff p >= 0.5.
inline int predicted_class(double p) noexcept { return p >= 0.5 ? 1 : 0; }

double accuracy(const Vector& probs, std::span<const int> labels);

/// phi(x) for a whole dataset, computed in fixed-size chunks.
Matrix hidden_repr_all(const TrainedClassifier& clf, const datagen::LabeledImageSet& set);

/// phi(x) computed one image at a time, so every column is bit-identical to
/// hidden_repr() on that image alone. Evaluation and serving use this form.
Matrix hidden_repr_each(const TrainedClassifier& clf, const datagen::LabeledImageSet& set);

/// Upper bound on the Lipschitz constant of x -> phi(x): the product of the
/// spectral norms of the backbone's linear maps (rectifiers are 1-Lipschitz),
/// each estimated by power iteration.
double backbone_lipschitz_bound(const TrainedClassifier& clf, int iterations = 60);

struct FidelityReport {
  double acc_phi = 0.0;
  double acc_phi_prime = 0.0;
  double agreement = 0.0;
  long n_samples = 0;
};

void to_json(nlohmann::json& j, const FidelityReport& r);

/// Accuracy of the head on phi(x) and on the DVAE reconstruction phi'(x), and
/// the fraction of samples where both predictions coincide. Evaluated per sample.
FidelityReport evaluate_fidelity(const TrainedClassifier& clf, const dvae::TrainedDVAE& dvae,
                                 const datagen::LabeledImageSet& dataset);

}  // namespace latent_lens::classifier
