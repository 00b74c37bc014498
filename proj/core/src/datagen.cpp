#include "latent_lens/datagen.hpp"

#include "latent_lens/error.hpp"
#include "latent_lens/io/model_io.hpp"
#include "latent_lens/io/npy.hpp"
#include "latent_lens/random.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace latent_lens::datagen {
namespace {

using nlohmann::json;

constexpr double kTint = 0.3;
constexpr int kRed = 0;
constexpr int kBlue = 2;
constexpr double kJitter = 2.0;
constexpr double kBaseThickness = 3.0;

struct ArcParams {
  double center_x;
  double center_y;
  double half_width;
  double sag;
  double thickness;
  bool smile;
};

// Coverage in [0,1] of pixel (px, py) by the arc stroke.
double arc_coverage(const ArcParams& a, int px, int py) {
  const double x = px + 0.5;
  const double u = (x - a.center_x) / a.half_width;
  if (std::abs(u) > 1.0) return 0.0;
  const double bow = a.sag * (0.5 - u * u);
  const double y_arc = a.smile ? a.center_y + bow : a.center_y - bow;
  const double dist = std::abs(py + 0.5 - y_arc);
  return std::clamp(a.thickness / 2.0 + 0.5 - dist, 0.0, 1.0);
}

void render(const ArcParams& arc, int confound, double noise_std, const ImageShape& shape,
            Rng& rng, float* out) {
  std::normal_distribution<double> noise(0.0, noise_std > 0.0 ? noise_std : 1.0);
  const Index plane = shape.plane();
  for (int c = 0; c < shape.channels; ++c) {
    double background = 0.0;
    if ((c == kRed && confound == 1) || (c == kBlue && confound == 0)) background += kTint;
    for (int y = 0; y < shape.height; ++y) {
      for (int x = 0; x < shape.width; ++x) {
        const double a = arc_coverage(arc, x, y);
        double v = background * (1.0 - a) + a;
        if (noise_std > 0.0) v += noise(rng);
        out[c * plane + Index{y} * shape.width + x] = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
    }
  }
}

}  // namespace

void DatasetSpec::validate() const {
  if (image_shape.channels != 3) throw ValidationError("image_shape.channels", "must be 3");
  if (image_shape.height < 16) throw ValidationError("image_shape.height", "must be >= 16");
  if (image_shape.width < 16) throw ValidationError("image_shape.width", "must be >= 16");
  if (n_samples <= 0) throw ValidationError("n_samples", "must be positive");
  if (!(confound_correlation >= 0.0 && confound_correlation <= 1.0)) {
    throw ValidationError("confound_correlation", "must lie in [0, 1]");
  }
  if (!(label_balance > 0.0 && label_balance < 1.0)) {
    throw ValidationError("label_balance", "must lie in (0, 1)");
  }
  if (!(noise_std >= 0.0) || !std::isfinite(noise_std)) {
    throw ValidationError("noise_std", "must be finite and >= 0");
  }
}

void to_json(json& j, const DatasetSpec& s) {
  j = json{{"image_shape", {s.image_shape.channels, s.image_shape.height, s.image_shape.width}},
           {"n_samples", s.n_samples},
           {"confound_correlation", s.confound_correlation},
           {"label_balance", s.label_balance},
           {"noise_std", s.noise_std},
           {"seed", s.seed}};
}

void from_json(const json& j, DatasetSpec& s) {
  DatasetSpec d;
  if (j.contains("image_shape")) {
    const auto& shp = j.at("image_shape");
    d.image_shape = {shp.at(0).get<int>(), shp.at(1).get<int>(), shp.at(2).get<int>()};
  }
  d.n_samples = j.value("n_samples", d.n_samples);
  d.confound_correlation = j.value("confound_correlation", d.confound_correlation);
  d.label_balance = j.value("label_balance", d.label_balance);
  d.noise_std = j.value("noise_std", d.noise_std);
  d.seed = j.value("seed", d.seed);
  s = d;
}

Matrix LabeledImageSet::batch(std::span<const Index> indices) const {
  Matrix out(images.rows(), static_cast<Index>(indices.size()));
  for (std::size_t k = 0; k < indices.size(); ++k) {
    out.col(static_cast<Index>(k)) = images.col(indices[k]).cast<double>();
  }
  return out;
}

Matrix LabeledImageSet::batch(Index first, Index count) const {
  return images.middleCols(first, count).cast<double>();
}

void LabeledImageSet::validate() const {
  const auto n = static_cast<std::size_t>(images.cols());
  if (labels.size() != n || confounds.size() != n) {
    throw ShapeError("dataset arrays disagree in length");
  }
  if (images.rows() != spec.image_shape.size()) throw ShapeError("dataset image size mismatch");
  auto binary = [](int v) { return v == 0 || v == 1; };
  if (!std::all_of(labels.begin(), labels.end(), binary) ||
      !std::all_of(confounds.begin(), confounds.end(), binary)) {
    throw ValidationError("labels", "labels and confounds must be 0 or 1");
  }
}

LabeledImageSet generate_dataset(const DatasetSpec& spec) {
  spec.validate();
  const auto& shape = spec.image_shape;
  const Index n = spec.n_samples;
  Rng rng = make_rng(spec.seed, "datagen");

  LabeledImageSet set;
  set.spec = spec;
  set.images.resize(shape.size(), n);
  set.labels.assign(static_cast<std::size_t>(n), 0);
  set.confounds.assign(static_cast<std::size_t>(n), 0);

  const auto n_pos = static_cast<Index>(std::llround(static_cast<double>(n) * spec.label_balance));
  std::fill_n(set.labels.begin(), n_pos, 1);
  std::shuffle(set.labels.begin(), set.labels.end(), rng);

  std::bernoulli_distribution agree(spec.confound_correlation);
  std::uniform_real_distribution<double> jitter(-kJitter, kJitter);
  for (Index i = 0; i < n; ++i) {
    const auto k = static_cast<std::size_t>(i);
    const int label = set.labels[k];
    set.confounds[k] = agree(rng) ? label : 1 - label;
    ArcParams arc{};
    arc.center_x = shape.width / 2.0 + jitter(rng);
    arc.center_y = 0.72 * shape.height + jitter(rng);
    arc.half_width = 0.3 * shape.width;
    arc.sag = 0.15 * shape.height;
    arc.thickness = kBaseThickness + jitter(rng);
    arc.smile = label == 1;
    render(arc, set.confounds[k], spec.noise_std, shape, rng, set.images.col(i).data());
  }
  return set;
}

BiasSplitPair make_bias_splits(const DatasetSpec& spec, double rho_a) {
  if (!(rho_a >= 0.0 && rho_a <= 1.0)) throw ValidationError("rho_a", "must lie in [0, 1]");
  DatasetSpec a = spec;
  a.confound_correlation = rho_a;
  a.seed = derive_seed(spec.seed, "split_a");
  DatasetSpec b = spec;
  b.confound_correlation = 1.0 - rho_a;
  b.seed = derive_seed(spec.seed, "split_b");
  return {generate_dataset(a), generate_dataset(b)};
}

double confound_statistic(std::span<const double> image, const ImageShape& shape) {
  if (shape.channels != 3) throw ShapeError("confound statistic needs 3 channels");
  if (static_cast<Index>(image.size()) != shape.size()) {
    throw ShapeError("confound statistic: image size mismatch");
  }
  const auto plane = static_cast<std::size_t>(shape.plane());
  const double red = std::accumulate(image.begin(), image.begin() + plane, 0.0);
  const double blue = std::accumulate(image.begin() + 2 * plane, image.begin() + 3 * plane, 0.0);
  return (red - blue) / static_cast<double>(plane);
}

std::vector<double> measure_confound_statistic(const Matrix& images, const ImageShape& shape) {
  if (shape.channels != 3) throw ShapeError("confound statistic needs 3 channels");
  if (images.rows() != shape.size()) throw ShapeError("confound statistic: image size mismatch");
  std::vector<double> out(static_cast<std::size_t>(images.cols()));
  for (Index i = 0; i < images.cols(); ++i) {
    out[static_cast<std::size_t>(i)] = confound_statistic(
        {images.col(i).data(), static_cast<std::size_t>(images.rows())}, shape);
  }
  return out;
}

void save_dataset(const std::filesystem::path& dir, const LabeledImageSet& set) {
  set.validate();
  std::filesystem::create_directories(dir);
  const auto& s = set.spec.image_shape;
  io::write_npy(dir / "images.npy", {static_cast<long>(set.size()), s.channels, s.height, s.width},
                set.images.data());
  io::write_json(dir / "meta.json",
                 json{{"labels", set.labels}, {"confounds", set.confounds}, {"spec", set.spec}});
}

LabeledImageSet load_dataset(const std::filesystem::path& dir) {
  const json meta = io::read_json(dir / "meta.json");
  LabeledImageSet set;
  set.spec = meta.at("spec").get<DatasetSpec>();
  set.labels = meta.at("labels").get<std::vector<int>>();
  set.confounds = meta.at("confounds").get<std::vector<int>>();
  const auto arr = io::read_npy(dir / "images.npy");
  const auto& s = set.spec.image_shape;
  if (arr.shape != std::vector<long>{static_cast<long>(set.labels.size()), s.channels, s.height,
                                     s.width}) {
    throw ArtifactError(dir.string() + ": images.npy shape disagrees with meta.json");
  }
  set.images = Eigen::Map<const Eigen::MatrixXf>(arr.data.data(), s.size(),
                                                  static_cast<Index>(set.labels.size()));
  set.validate();
  return set;
}

}  // namespace latent_lens::datagen
