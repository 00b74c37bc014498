#pragma once

#include "latent_lens/nn/sequential.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

namespace latent_lens::infotheory {

/// Function outputs are floored at this value before dividing.
inline constexpr double kOutputFloor = 1e-6;
/// Lower clamp on the information dot product inside the inverse penalty.
inline constexpr double kDotGuard = 1e-8;

/// Unit-variance Gaussian perturbation of one coordinate around a center.
struct GaussianProbe {
  int samples_per_coord = 8;
  std::uint64_t seed = 0;

  void validate() const;
};

void to_json(nlohmann::json& j, const GaussianProbe& p);
void from_json(const nlohmann::json& j, GaussianProbe& p);

/// Offsets z - center drawn for coordinate `coord`: `count` standard normals
/// from a stream that depends only on (probe.seed, coord).
std::vector<double> probe_offsets(const GaussianProbe& probe, Index coord, Index count);

struct InfoVector {
  Vector values;
  std::string function_tag;  // "generator" or "head"
  nlohmann::json probe_meta = nlohmann::json::object();
};

void to_json(nlohmann::json& j, const InfoVector& v);

/// Value h(z) and partial derivative dh/dz_i of a scalar non-negative function.
using ScalarFunction = std::function<std::pair<double, double>(const Vector& z, Index coord)>;

/// Monte-Carlo estimate of E_{z ~ N(center_i, 1)}[(dh/dz_i)^2 / max(h, 1e-6)] with
/// every other coordinate held at the center.
double coordinate_info(const ScalarFunction& h, const Vector& center, Index coord,
                       const GaussianProbe& probe);

/// A non-negative vector-valued function whose per-coordinate information is
/// sum_j (dh_j/dz_i)^2 / max(h_j, 1e-6).
class InformationSource {
 public:
  virtual ~InformationSource() = default;
  virtual Index input_size() const = 0;
  /// The information integrand at each column of `points` for coordinate `coord`.
  virtual Vector integrand(const Matrix& points, Index coord) const = 0;
};

/// Wraps a network whose outputs are non-negative (a sigmoid output layer).
/// Derivatives come from forward-mode tangents.
class NetworkSource final : public InformationSource {
 public:
  explicit NetworkSource(const nn::Sequential& net) : net_(&net) {}
  Index input_size() const override { return net_->input_size(); }
  Vector integrand(const Matrix& points, Index coord) const override;

 private:
  const nn::Sequential* net_;
};

double coordinate_info(const InformationSource& h, const Vector& center, Index coord,
                       const GaussianProbe& probe);

/// Per-coordinate information averaged over the centers (one per column).
/// Draws for coordinate i and center p are the p-th block of probe_offsets(i),
/// so a single center reproduces coordinate_info exactly.
InfoVector layer_info(const InformationSource& h, const Matrix& centers, const GaussianProbe& probe,
                      std::string function_tag);

/// Cosine of the two information vectors; throws on a zero vector.
double info_alignment(const InfoVector& info_g, const InfoVector& info_f);
double info_alignment(const Vector& info_g, const Vector& info_f);

/// 1 / max(I_g . I_f, 1e-8).
double inverse_similarity_penalty(const Vector& info_g, const Vector& info_f,
                                  double dot_guard = kDotGuard);
/// Derivative of the penalty with respect to each I_g entry (I_f held fixed);
/// zero where the guard is active.
Vector inverse_similarity_penalty_grad(const Vector& info_g, const Vector& info_f,
                                       double dot_guard = kDotGuard);

/// Frozen random choices for one stochastic evaluation of the training penalty.
/// Coordinate k contributes weight[k] * I_f[coords[k]] * Î_g[coords[k]] to the dot
/// product, where Î_g averages the integrand over every center and offset.
struct PenaltyDraws {
  std::vector<Index> coords;
  std::vector<double> weights;
  Matrix offsets;  // coords.size() x (centers * samples), center-major within a row
};

/// Exact draws: every coordinate once with weight 1.
PenaltyDraws full_penalty_draws(Index dim, Index centers, int samples, Rng& rng);
/// Importance-sampled draws: `count` coordinates drawn with replacement with
/// probability proportional to I_f, weighted so the dot product stays unbiased.
PenaltyDraws sampled_penalty_draws(const Vector& info_f, int count, Index centers, int samples,
                                   Rng& rng);

struct PenaltyValue {
  double dot = 0.0;
  double penalty = 0.0;  // 1 / max(dot, guard)
};

/// Evaluates the inverse penalty of `net` under frozen draws. When `grads` is
/// given, adds `scale * d(penalty)/d(parameters)` into it.
PenaltyValue penalty_with_gradient(const nn::Sequential& net, const Matrix& centers,
                                   const Vector& info_f, const PenaltyDraws& draws,
                                   double scale = 1.0, nn::Gradients* grads = nullptr,
                                   double dot_guard = kDotGuard);

}  // namespace latent_lens::infotheory
