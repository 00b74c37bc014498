#pragma once

#include "latent_lens/nn/sequential.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace latent_lens::dvae {

/// Probabilities are clamped into [kProbClamp, 1 - kProbClamp] before any log.
inline constexpr double kProbClamp = 1e-6;

struct DVAEConfig {
  int n_bits = 16;
  /// Output widths of the four encoder layers; the last one equals n_bits.
  /// The decoder mirrors them in reverse.
  std::vector<int> encoder_widths{128, 64, 32, 16};
  double tau_start = 1.0;
  double tau_end = 0.3;
  int anneal_epochs = 30;
  double kl_weight = 1.0;
  /// Relaxed samples drawn per datum for the reconstruction expectation.
  int noise_samples = 1;
  int epochs = 60;
  int batch_size = 128;
  double learning_rate = 1e-3;
  std::uint64_t seed = 0;

  void validate() const;
  /// Temperature in effect during a 1-based epoch.
  double temperature(int epoch) const;
};

void to_json(nlohmann::json& j, const DVAEConfig& c);
void from_json(const nlohmann::json& j, DVAEConfig& c);

/// Hard latent code of one representation.
struct LatentCode {
  std::vector<int> bits;  // bits[i] = 1[posterior_probs[i] >= 0.5]
  Vector logits;
  Vector posterior_probs;  // sigmoid(logits)
};

/// Binary-concrete relaxation sigmoid((logit + log u - log(1 - u)) / tau).
/// Throws ValidationError unless 0 < u < 1 and tau > 0.
double binary_concrete_sample(double logit, double tau, double u);
Vector binary_concrete_sample(const Vector& logits, double tau, const Vector& u);

/// KL(Bernoulli(q) || Bernoulli(p)) summed over independent bits; q and p are
/// clamped into [1e-6, 1 - 1e-6].
double bernoulli_kl(const Vector& q_probs, double p_prob);

struct DvaeNetworks {
  nn::Sequential encoder;  // phi -> logits
  nn::Sequential decoder;  // relaxed or hard bits -> phi'
};

DvaeNetworks build_dvae_networks(const DVAEConfig& config, Index repr_dim, Rng& init_rng);

struct DvaeLoss {
  double recon = 0.0;
  double kl = 0.0;
  double elbo_neg = 0.0;
};

/// Negative ELBO on a batch of representations with explicit uniform noise.
/// `noise_u` is n_bits x (B * S) for S relaxed samples per datum, laid out
/// sample-major (columns [s*B, (s+1)*B) belong to sample s).
/// recon: squared reconstruction error summed over the d coordinates, averaged
/// over data and samples; kl: Bernoulli KL to the Bernoulli(0.5) prior summed
/// over bits, averaged over data; elbo_neg = recon + beta * kl.
/// When gradient pointers are given, parameter gradients are accumulated;
/// `dlogits` receives d(elbo_neg)/d(encoder logits).
DvaeLoss dvae_loss(const DvaeNetworks& nets, const Matrix& phi, double tau, double beta,
                   const Matrix& noise_u, nn::Gradients* encoder_grads = nullptr,
                   nn::Gradients* decoder_grads = nullptr, Matrix* dlogits = nullptr);

/// Draws `samples` uniform noise columns per datum from `rng` (open interval).
Matrix draw_uniform_noise(Index n_bits, Index batch, int samples, Rng& rng);

struct DvaeEpochLog {
  int epoch = 0;
  double tau = 0.0;
  double recon = 0.0;
  double kl = 0.0;
};

void to_json(nlohmann::json& j, const DvaeEpochLog& e);
void from_json(const nlohmann::json& j, DvaeEpochLog& e);

/// A frozen DVAE. Inference uses thresholded posterior means, never samples.
class TrainedDVAE {
 public:
  TrainedDVAE(DVAEConfig config, DvaeNetworks nets, std::string classifier_checksum,
              std::vector<DvaeEpochLog> log);

  const DVAEConfig& config() const noexcept { return config_; }
  const DvaeNetworks& networks() const noexcept { return nets_; }
  const std::string& classifier_checksum() const noexcept { return classifier_checksum_; }
  const std::vector<DvaeEpochLog>& training_log() const noexcept { return log_; }
  Index n_bits() const noexcept { return nets_.encoder.output_size(); }
  Index repr_dim() const noexcept { return nets_.encoder.input_size(); }

  Matrix logits(const Matrix& phi) const;
  LatentCode encode_hard(const Vector& phi) const;
  /// Hard bits (as 0.0 / 1.0) for a batch, n_bits x B.
  Matrix encode_bits(const Matrix& phi) const;
  /// Decoder output for hard or relaxed codes in [0,1], one column per code.
  Matrix decode(const Matrix& codes) const;
  Vector decode(std::span<const int> bits) const;
  /// phi'(x) = decode(encode_hard(phi(x))).
  Matrix reconstruct(const Matrix& phi) const;

  std::string checksum() const;
  void save(const std::filesystem::path& dir) const;
  /// When `expected_classifier_checksum` is set, loading fails unless the
  /// artifact was trained against that classifier.
  static TrainedDVAE load(const std::filesystem::path& dir,
                          const std::optional<std::string>& expected_classifier_checksum = {});

 private:
  DVAEConfig config_;
  DvaeNetworks nets_;
  std::string classifier_checksum_;
  std::vector<DvaeEpochLog> log_;
};

using DvaeEpochCallback = std::function<void(const DvaeEpochLog&)>;

/// Trains on precomputed representations (d x N) of a frozen classifier.
TrainedDVAE train_dvae(const DVAEConfig& config, const Matrix& reprs,
                       std::string classifier_checksum, const DvaeEpochCallback& on_epoch = {});

Matrix bits_to_matrix(std::span<const int> bits);

}  // namespace latent_lens::dvae
