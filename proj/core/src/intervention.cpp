#include "latent_lens/intervention.hpp"

#include "latent_lens/error.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

namespace latent_lens::intervention {

using nlohmann::json;

std::string to_string(Strategy s) {
  switch (s) {
    case Strategy::full_flip: return "full_flip";
    case Strategy::single_bit: return "single_bit";
    case Strategy::greedy_minimal: return "greedy_minimal";
    case Strategy::custom: return "custom";
  }
  return "custom";
}

Strategy strategy_from_string(std::string_view name) {
  if (name == "full_flip") return Strategy::full_flip;
  if (name == "single_bit") return Strategy::single_bit;
  if (name == "greedy_minimal") return Strategy::greedy_minimal;
  if (name == "custom") return Strategy::custom;
  throw ValidationError("strategy", "unknown strategy '" + std::string(name) + "'");
}

InterventionMask InterventionMask::make(std::vector<int> indices, Index n_bits,
                                        Strategy strategy) {
  std::sort(indices.begin(), indices.end());
  InterventionMask m{std::move(indices), strategy};
  m.validate(n_bits);
  return m;
}

InterventionMask InterventionMask::full(Index n_bits) {
  InterventionMask m{{}, Strategy::full_flip};
  for (int i = 0; i < static_cast<int>(n_bits); ++i) m.flip_indices.push_back(i);
  return m;
}

InterventionMask InterventionMask::single(int index, Index n_bits) {
  return make({index}, n_bits, Strategy::single_bit);
}

bool InterventionMask::contains(int index) const {
  return std::binary_search(flip_indices.begin(), flip_indices.end(), index);
}

void InterventionMask::validate(Index n_bits) const {
  for (std::size_t k = 0; k < flip_indices.size(); ++k) {
    const int i = flip_indices[k];
    if (i < 0 || i >= n_bits) {
      throw ValidationError("flip_indices", "index " + std::to_string(i) + " outside [0, " +
                                                std::to_string(n_bits) + ")");
    }
    if (k > 0 && flip_indices[k - 1] >= i) {
      throw ValidationError("flip_indices", "indices must be sorted and unique");
    }
  }
}

void to_json(json& j, const InterventionMask& m) {
  j = json{{"flip_indices", m.flip_indices}, {"strategy", to_string(m.strategy)}};
}

std::vector<int> flip(std::span<const int> bits, const InterventionMask& mask) {
  mask.validate(static_cast<Index>(bits.size()));
  std::vector<int> out(bits.begin(), bits.end());
  for (int i : mask.flip_indices) out[static_cast<std::size_t>(i)] ^= 1;
  return out;
}

void to_json(json& j, const CounterfactualRecord& r) {
  j = json{{"sample_id", r.sample_id},
           {"original_bits", r.original_bits},
           {"flipped_bits", r.flipped_bits},
           {"flip_indices", r.mask.flip_indices},
           {"strategy", to_string(r.mask.strategy)},
           {"psi", std::vector<double>(r.psi.data(), r.psi.data() + r.psi.size())},
           {"p_original", r.p_original},
           {"p_counterfactual", r.p_counterfactual},
           {"prediction_changed", r.prediction_changed}};
}

void from_json(const json& j, CounterfactualRecord& r) {
  r.sample_id = j.at("sample_id").get<long>();
  r.original_bits = j.at("original_bits").get<std::vector<int>>();
  r.flipped_bits = j.at("flipped_bits").get<std::vector<int>>();
  r.mask.flip_indices = j.at("flip_indices").get<std::vector<int>>();
  r.mask.strategy = strategy_from_string(j.at("strategy").get<std::string>());
  const auto psi = j.at("psi").get<std::vector<double>>();
  r.psi = Eigen::Map<const Vector>(psi.data(), static_cast<Index>(psi.size()));
  r.p_original = j.at("p_original").get<double>();
  r.p_counterfactual = j.at("p_counterfactual").get<double>();
  r.prediction_changed = j.at("prediction_changed").get<bool>();
}

void write_jsonl(const std::filesystem::path& path, std::span<const CounterfactualRecord> records) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ArtifactError("cannot write " + path.string());
  for (const auto& r : records) out << json(r).dump() << '\n';
  if (!out) throw ArtifactError("failed writing " + path.string());
}

std::vector<CounterfactualRecord> read_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ArtifactError("cannot read " + path.string());
  std::vector<CounterfactualRecord> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    try {
      out.push_back(json::parse(line).get<CounterfactualRecord>());
    } catch (const json::exception& e) {
      throw ArtifactError(path.string() + ": malformed record: " + e.what());
    }
  }
  return out;
}

void check_compatible(const dvae::TrainedDVAE& dvae, const classifier::TrainedClassifier& clf) {
  if (dvae.repr_dim() != clf.repr_dim()) {
    throw ShapeError("DVAE expects representations of width " + std::to_string(dvae.repr_dim()) +
                     " but the classifier emits " + std::to_string(clf.repr_dim()));
  }
}

double head_probability(const classifier::TrainedClassifier& clf, const Vector& repr) {
  return clf.head_predict(repr)(0);
}

CounterfactualRecord counterfactual(const dvae::TrainedDVAE& dvae,
                                    const classifier::TrainedClassifier& clf,
                                    std::span<const int> bits, const InterventionMask& mask) {
  check_compatible(dvae, clf);
  if (static_cast<Index>(bits.size()) != dvae.n_bits()) {
    throw ShapeError("counterfactual: expected " + std::to_string(dvae.n_bits()) + " bits");
  }
  CounterfactualRecord r;
  r.original_bits.assign(bits.begin(), bits.end());
  r.flipped_bits = flip(bits, mask);
  r.mask = mask;
  r.p_original = head_probability(clf, dvae.decode(bits));
  r.psi = dvae.decode(std::span<const int>(r.flipped_bits));
  r.p_counterfactual = head_probability(clf, r.psi);
  r.prediction_changed =
      classifier::predicted_class(r.p_original) != classifier::predicted_class(r.p_counterfactual);
  return r;
}

std::optional<InterventionMask> greedy_minimal_flip(const dvae::TrainedDVAE& dvae,
                                                    const classifier::TrainedClassifier& clf,
                                                    std::span<const int> bits, int max_budget) {
  check_compatible(dvae, clf);
  const Index n = dvae.n_bits();
  if (static_cast<Index>(bits.size()) != n) {
    throw ShapeError("greedy_minimal_flip: expected " + std::to_string(n) + " bits");
  }
  if (max_budget < 1 || max_budget > n) {
    throw ValidationError("max_budget", "must lie in [1, " + std::to_string(n) + "]");
  }
  const int original_class = classifier::predicted_class(head_probability(clf, dvae.decode(bits)));
  // Moving toward the opposite class means lowering p when the original class is 1.
  const double direction = original_class == 1 ? -1.0 : 1.0;
  std::vector<int> current(bits.begin(), bits.end());
  std::vector<int> chosen;
  for (int step = 0; step < max_budget; ++step) {
    int best = -1;
    double best_score = 0.0;
    double best_p = 0.0;
    for (int i = 0; i < static_cast<int>(n); ++i) {
      if (std::find(chosen.begin(), chosen.end(), i) != chosen.end()) continue;
      current[static_cast<std::size_t>(i)] ^= 1;
      const double p = head_probability(clf, dvae.decode(std::span<const int>(current)));
      current[static_cast<std::size_t>(i)] ^= 1;
      const double score = direction * p;
      if (best < 0 || score > best_score) {
        best = i;
        best_score = score;
        best_p = p;
      }
    }
    if (best < 0) break;
    chosen.push_back(best);
    current[static_cast<std::size_t>(best)] ^= 1;
    if (classifier::predicted_class(best_p) != original_class) {
      auto mask = InterventionMask::make(chosen, n, Strategy::greedy_minimal);
      if (counterfactual(dvae, clf, bits, mask).prediction_changed) return mask;
    }
  }
  return std::nullopt;
}

std::vector<std::vector<int>> encode_all(const dvae::TrainedDVAE& dvae, const Matrix& reprs) {
  std::vector<std::vector<int>> out;
  out.reserve(static_cast<std::size_t>(reprs.cols()));
  for (Index i = 0; i < reprs.cols(); ++i) out.push_back(dvae.encode_hard(reprs.col(i)).bits);
  return out;
}

double flip_rate(const dvae::TrainedDVAE& dvae, const classifier::TrainedClassifier& clf,
                 const Matrix& reprs, Strategy strategy, std::optional<int> greedy_budget) {
  check_compatible(dvae, clf);
  if (reprs.cols() == 0) throw ValidationError("dataset", "flip rate of an empty dataset");
  if (strategy != Strategy::full_flip && strategy != Strategy::greedy_minimal) {
    throw ValidationError("strategy", "flip rate needs full_flip or greedy_minimal");
  }
  const int budget = greedy_budget.value_or(static_cast<int>(dvae.n_bits()));
  const auto full = InterventionMask::full(dvae.n_bits());
  long changed = 0;
  for (const auto& bits : encode_all(dvae, reprs)) {
    if (strategy == Strategy::full_flip) {
      changed += counterfactual(dvae, clf, bits, full).prediction_changed ? 1 : 0;
    } else {
      changed += greedy_minimal_flip(dvae, clf, bits, budget).has_value() ? 1 : 0;
    }
  }
  return static_cast<double>(changed) / static_cast<double>(reprs.cols());
}

double flip_rate(const dvae::TrainedDVAE& dvae, const classifier::TrainedClassifier& clf,
                 const datagen::LabeledImageSet& dataset, Strategy strategy,
                 std::optional<int> greedy_budget) {
  if (dataset.size() == 0) throw ValidationError("dataset", "flip rate of an empty dataset");
  return flip_rate(dvae, clf, classifier::hidden_repr_each(clf, dataset), strategy, greedy_budget);
}

Vector per_bit_effect(const dvae::TrainedDVAE& dvae, const classifier::TrainedClassifier& clf,
                      const Matrix& reprs) {
  check_compatible(dvae, clf);
  const Index n = dvae.n_bits();
  Vector effect = Vector::Zero(n);
  if (reprs.cols() == 0) return effect;
  for (auto bits : encode_all(dvae, reprs)) {
    const double p0 = head_probability(clf, dvae.decode(std::span<const int>(bits)));
    for (Index i = 0; i < n; ++i) {
      bits[static_cast<std::size_t>(i)] ^= 1;
      effect(i) += std::abs(head_probability(clf, dvae.decode(std::span<const int>(bits))) - p0);
      bits[static_cast<std::size_t>(i)] ^= 1;
    }
  }
  return effect / static_cast<double>(reprs.cols());
}

Vector per_bit_effect(const dvae::TrainedDVAE& dvae, const classifier::TrainedClassifier& clf,
                      const datagen::LabeledImageSet& dataset) {
  return per_bit_effect(dvae, clf, classifier::hidden_repr_each(clf, dataset));
}

}  // namespace latent_lens::intervention
