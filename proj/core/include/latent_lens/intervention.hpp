#pragma once

#include "latent_lens/classifier.hpp"
#include "latent_lens/dvae.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace latent_lens::intervention {

enum class Strategy { full_flip, single_bit, greedy_minimal, custom };

std::string to_string(Strategy s);
Strategy strategy_from_string(std::string_view name);

struct InterventionMask {
  std::vector<int> flip_indices;  // sorted, unique
  Strategy strategy = Strategy::custom;

  /// Sorts the indices and rejects duplicates or values outside [0, n_bits).
  static InterventionMask make(std::vector<int> indices, Index n_bits,
                               Strategy strategy = Strategy::custom);
  static InterventionMask full(Index n_bits);
  static InterventionMask single(int index, Index n_bits);
  static InterventionMask none() { return {}; }

  bool empty() const noexcept { return flip_indices.empty(); }
  bool contains(int index) const;
  /// Throws ValidationError unless sorted, unique and within [0, n_bits).
  void validate(Index n_bits) const;
};

void to_json(nlohmann::json& j, const InterventionMask& m);

/// Toggles bit i iff i is in the mask.
std::vector<int> flip(std::span<const int> bits, const InterventionMask& mask);

struct CounterfactualRecord {
  long sample_id = -1;
  std::vector<int> original_bits;
  std::vector<int> flipped_bits;
  InterventionMask mask;
  Vector psi;
  double p_original = 0.0;
  double p_counterfactual = 0.0;
  bool prediction_changed = false;
};

void to_json(nlohmann::json& j, const CounterfactualRecord& r);
void from_json(const nlohmann::json& j, CounterfactualRecord& r);

void write_jsonl(const std::filesystem::path& path, std::span<const CounterfactualRecord> records);
std::vector<CounterfactualRecord> read_jsonl(const std::filesystem::path& path);

/// Head probability of a single representation.
double head_probability(const classifier::TrainedClassifier& clf, const Vector& repr);

/// psi = decode(flip(bits, mask)); p_original from decode(bits).
CounterfactualRecord counterfactual(const dvae::TrainedDVAE& dvae,
                                    const classifier::TrainedClassifier& clf,
                                    std::span<const int> bits, const InterventionMask& mask);

/// Adds one bit at a time, each time the bit whose flip moves the head
/// probability furthest toward the opposite class (lowest index on ties),
/// until the prediction changes. Returns nothing if `max_budget` bits do not
/// suffice.
std::optional<InterventionMask> greedy_minimal_flip(const dvae::TrainedDVAE& dvae,
                                                    const classifier::TrainedClassifier& clf,
                                                    std::span<const int> bits, int max_budget);

/// Hard codes of every column of `reprs` (d x N), computed column by column.
std::vector<std::vector<int>> encode_all(const dvae::TrainedDVAE& dvae, const Matrix& reprs);

/// Fraction of samples whose predicted class changes under the strategy.
/// Greedy searches use `greedy_budget` (defaults to n_bits).
double flip_rate(const dvae::TrainedDVAE& dvae, const classifier::TrainedClassifier& clf,
                 const Matrix& reprs, Strategy strategy, std::optional<int> greedy_budget = {});
double flip_rate(const dvae::TrainedDVAE& dvae, const classifier::TrainedClassifier& clf,
                 const datagen::LabeledImageSet& dataset, Strategy strategy,
                 std::optional<int> greedy_budget = {});

/// Mean |p(flip bit i) - p_original| over the samples, for each bit.
Vector per_bit_effect(const dvae::TrainedDVAE& dvae, const classifier::TrainedClassifier& clf,
                      const Matrix& reprs);
Vector per_bit_effect(const dvae::TrainedDVAE& dvae, const classifier::TrainedClassifier& clf,
                      const datagen::LabeledImageSet& dataset);

void check_compatible(const dvae::TrainedDVAE& dvae, const classifier::TrainedClassifier& clf);

}  // namespace latent_lens::intervention
