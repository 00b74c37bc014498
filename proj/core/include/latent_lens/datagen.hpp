#pragma once

#include "latent_lens/tensor.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

namespace latent_lens::datagen {

/// Recipe for a synthetic image set with a binary label (arc shape) and a
/// binary confound (background tint) whose agreement rate with the label is
/// controlled exactly.
struct DatasetSpec {
  ImageShape image_shape{3, 32, 32};
  long n_samples = 1000;
  double confound_correlation = 0.5;  // P(confound == label)
  double label_balance = 0.5;         // fraction of positive labels
  double noise_std = 0.02;            // additive per-pixel noise before clipping
  std::uint64_t seed = 0;

  /// Throws ValidationError naming the offending field.
  void validate() const;
};

void to_json(nlohmann::json& j, const DatasetSpec& s);
void from_json(const nlohmann::json& j, DatasetSpec& s);

struct LabeledImageSet {
  Eigen::MatrixXf images;  // (C*H*W) x N, each column a CHW image in [0,1]
  std::vector<int> labels;
  std::vector<int> confounds;
  DatasetSpec spec;

  Index size() const noexcept { return images.cols(); }
  const ImageShape& shape() const noexcept { return spec.image_shape; }
  /// Gathers the given samples as a double-precision batch.
  Matrix batch(std::span<const Index> indices) const;
  Matrix batch(Index first, Index count) const;
  /// Throws if the arrays disagree in length or hold non-binary values.
  void validate() const;
};

struct BiasSplitPair {
  LabeledImageSet split_a;
  LabeledImageSet split_b;
};

LabeledImageSet generate_dataset(const DatasetSpec& spec);

/// Two datasets from the same recipe with confound correlations rho_a and
/// 1 - rho_a, generated from distinct derived seeds.
BiasSplitPair make_bias_splits(const DatasetSpec& spec, double rho_a);

/// Per-image B = mean(red channel) - mean(blue channel).
std::vector<double> measure_confound_statistic(const Matrix& images, const ImageShape& shape);
double confound_statistic(std::span<const double> image, const ImageShape& shape);

/// Directory layout: images.npy (float32 [N, C, H, W]) + meta.json
/// {"labels": [...], "confounds": [...], "spec": {...}}.
void save_dataset(const std::filesystem::path& dir, const LabeledImageSet& set);
LabeledImageSet load_dataset(const std::filesystem::path& dir);

}  // namespace latent_lens::datagen
