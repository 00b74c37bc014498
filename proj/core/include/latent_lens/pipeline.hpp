#pragma once

#include "latent_lens/classifier.hpp"
#include "latent_lens/datagen.hpp"
#include "latent_lens/dvae.hpp"
#include "latent_lens/explainer.hpp"
#include "latent_lens/intervention.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace latent_lens::pipeline {

inline constexpr int kMetricsSchemaVersion = 1;

/// Probe used for the reported information vectors and their alignment.
struct DiagnosticProbe {
  int centers = 16;
  int samples_per_coord = 32;
};

struct BiasSplitRequest {
  double rho_a = 0.9;
};

struct RunConfig {
  std::filesystem::path output_dir;
  /// Every stage seed is derived from this one; seeds inside the nested
  /// configurations are ignored.
  std::uint64_t seed = 0;
  /// Recipe for the training set; its seed is ignored.
  datagen::DatasetSpec dataset{{3, 32, 32}, 4000, 0.9, 0.5, 0.02, 0};
  long val_samples = 1000;
  /// When set, `latent-lens run` trains one pipeline per split.
  std::optional<BiasSplitRequest> bias_split;
  /// Which split this pipeline trains on (0 = a, 1 = b); -1 for a plain run.
  int split_arm = -1;
  classifier::ClassifierConfig classifier;
  dvae::DVAEConfig dvae;
  explainer::GeneratorConfig generator;
  std::vector<intervention::Strategy> strategies{intervention::Strategy::full_flip,
                                                 intervention::Strategy::greedy_minimal};
  /// Also train the unregularized generator (lambda = 0) for the ablation.
  bool ablation = false;
  DiagnosticProbe diagnostic;
  int panel_count = 8;
  /// Replication seeds used by compare_regularization and bias-split runs.
  std::vector<std::uint64_t> seeds{0, 1, 2};

  void validate() const;
};

void to_json(nlohmann::json& j, const RunConfig& c);
void from_json(const nlohmann::json& j, RunConfig& c);
RunConfig load_run_config(const std::filesystem::path& path);

/// SHA-256 of the canonical configuration, excluding the output directory.
std::string config_hash(const RunConfig& config);

struct StageRecord {
  std::string name;
  std::string checksum;
  bool executed = false;  // false when reused from a previous run
};

struct RunArtifacts {
  std::filesystem::path root;
  std::filesystem::path manifest;
  std::filesystem::path train_data;
  std::filesystem::path val_data;
  std::filesystem::path classifier;
  std::filesystem::path dvae;
  std::filesystem::path generator;
  std::optional<std::filesystem::path> generator_lambda0;
  std::filesystem::path metrics;
  std::filesystem::path counterfactuals;
  std::vector<std::filesystem::path> panels;
  std::string config_hash;
  std::vector<StageRecord> stages;

  bool executed(const std::string& stage) const;
};

/// Fixed artifact layout under a run directory.
RunArtifacts artifact_layout(const std::filesystem::path& root);

using Progress = std::function<void(const std::string&)>;

/// Runs data generation, classifier, DVAE, generator(s) and evaluation in
/// order, persisting after every stage. Stages whose artifacts are on disk
/// with the checksum recorded in the manifest are reused. Throws StageError
/// naming the failing stage, including when an artifact on disk no longer
/// matches its recorded checksum.
RunArtifacts run_pipeline(const RunConfig& config, const Progress& progress = {});

struct BiasSplitRun {
  RunArtifacts split_a;
  RunArtifacts split_b;
  nlohmann::json report;
};

/// Trains one pipeline per split under output_dir/split_a and split_b, then
/// writes output_dir/bias_report.json.
BiasSplitRun run_bias_split(const RunConfig& config, const Progress& progress = {});

/// Per-split bias statistics of two completed runs and the sign-contrast
/// verdict; writes bias_report.json and bias_panels.png into `out_dir` when given.
nlohmann::json emit_bias_report(const std::filesystem::path& run_a,
                                const std::filesystem::path& run_b,
                                const std::optional<std::filesystem::path>& out_dir = {});

/// Paired lambda = 0 / lambda > 0 runs for every seed in config.seeds under
/// output_dir/seed_<s>; returns and writes output_dir/ablation.json.
nlohmann::json compare_regularization(const RunConfig& config, const Progress& progress = {});

/// Two-column text rendering of an ablation table.
std::string format_ablation_table(const nlohmann::json& table);

}  // namespace latent_lens::pipeline
