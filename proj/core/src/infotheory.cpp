#include "latent_lens/infotheory.hpp"

#include "latent_lens/error.hpp"

#include <algorithm>
#include <cmath>

namespace latent_lens::infotheory {

using nlohmann::json;

void GaussianProbe::validate() const {
  if (samples_per_coord < 2) throw ValidationError("samples_per_coord", "must be >= 2");
}

void to_json(json& j, const GaussianProbe& p) {
  j = json{{"samples_per_coord", p.samples_per_coord}, {"seed", p.seed}, {"variance", 1.0}};
}

void from_json(const json& j, GaussianProbe& p) {
  GaussianProbe d;
  d.samples_per_coord = j.value("samples_per_coord", d.samples_per_coord);
  d.seed = j.value("seed", d.seed);
  p = d;
}

void to_json(json& j, const InfoVector& v) {
  j = json{{"values", std::vector<double>(v.values.data(), v.values.data() + v.values.size())},
           {"function_tag", v.function_tag},
           {"probe", v.probe_meta}};
}

std::vector<double> probe_offsets(const GaussianProbe& probe, Index coord, Index count) {
  Rng rng(derive_seed(probe.seed, static_cast<std::uint64_t>(coord)));
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> out(static_cast<std::size_t>(count));
  for (auto& v : out) v = normal(rng);
  return out;
}

double coordinate_info(const ScalarFunction& h, const Vector& center, Index coord,
                       const GaussianProbe& probe) {
  probe.validate();
  if (coord < 0 || coord >= center.size()) throw ShapeError("coordinate_info: index out of range");
  const auto offsets = probe_offsets(probe, coord, probe.samples_per_coord);
  Vector z = center;
  double sum = 0.0;
  for (double e : offsets) {
    z(coord) = center(coord) + e;
    const auto [value, partial] = h(z, coord);
    if (!std::isfinite(partial) || !std::isfinite(value)) {
      throw NumericError("coordinate_info: non-finite derivative at coordinate " +
                         std::to_string(coord));
    }
    sum += partial * partial / std::max(value, kOutputFloor);
  }
  return sum / static_cast<double>(offsets.size());
}

Vector NetworkSource::integrand(const Matrix& points, Index coord) const {
  Matrix tangent = Matrix::Zero(points.rows(), points.cols());
  tangent.row(coord).setOnes();
  nn::Sequential::DualTape tape;
  net_->forward_dual(points, tangent, tape);
  const Matrix& y = tape.values.back();
  const Matrix& t = tape.tangents.back();
  Vector out(points.cols());
  for (Index c = 0; c < points.cols(); ++c) {
    double s = 0.0;
    for (Index j = 0; j < y.rows(); ++j) s += t(j, c) * t(j, c) / std::max(y(j, c), kOutputFloor);
    out(c) = s;
  }
  if (!out.allFinite()) {
    throw NumericError("information integrand is non-finite at coordinate " + std::to_string(coord));
  }
  return out;
}

namespace {

Matrix probe_points(const Matrix& centers, Index coord, const std::vector<double>& offsets,
                    Index samples) {
  Matrix points(centers.rows(), centers.cols() * samples);
  for (Index p = 0; p < centers.cols(); ++p) {
    for (Index s = 0; s < samples; ++s) {
      const Index c = p * samples + s;
      points.col(c) = centers.col(p);
      points(coord, c) += offsets[static_cast<std::size_t>(c)];
    }
  }
  return points;
}

// Bounds the width of a single forward pass over probe points.
constexpr Index kMaxProbeColumns = 2048;

double mean_integrand(const InformationSource& h, const Matrix& centers, Index coord,
                      const GaussianProbe& probe) {
  const Index samples = probe.samples_per_coord;
  const auto offsets = probe_offsets(probe, coord, centers.cols() * samples);
  const Index centers_per_chunk = std::max<Index>(1, kMaxProbeColumns / samples);
  double sum = 0.0;
  for (Index first = 0; first < centers.cols(); first += centers_per_chunk) {
    const Index count = std::min(centers_per_chunk, centers.cols() - first);
    const std::vector<double> chunk(offsets.begin() + first * samples,
                                    offsets.begin() + (first + count) * samples);
    sum += h.integrand(probe_points(centers.middleCols(first, count), coord, chunk, samples), coord)
               .sum();
  }
  return sum / static_cast<double>(centers.cols() * samples);
}

}  // namespace

double coordinate_info(const InformationSource& h, const Vector& center, Index coord,
                       const GaussianProbe& probe) {
  probe.validate();
  if (center.size() != h.input_size()) throw ShapeError("coordinate_info: width mismatch");
  if (coord < 0 || coord >= center.size()) throw ShapeError("coordinate_info: index out of range");
  return mean_integrand(h, center, coord, probe);
}

InfoVector layer_info(const InformationSource& h, const Matrix& centers, const GaussianProbe& probe,
                      std::string function_tag) {
  probe.validate();
  if (centers.rows() != h.input_size()) throw ShapeError("layer_info: width mismatch");
  if (centers.cols() == 0) throw ValidationError("centers", "need at least one center");
  InfoVector out;
  out.values.resize(centers.rows());
  for (Index i = 0; i < centers.rows(); ++i) out.values(i) = mean_integrand(h, centers, i, probe);
  out.function_tag = std::move(function_tag);
  out.probe_meta = probe;
  out.probe_meta["centers"] = centers.cols();
  return out;
}

double info_alignment(const Vector& info_g, const Vector& info_f) {
  if (info_g.size() != info_f.size()) throw ShapeError("info_alignment: length mismatch");
  const double ng = info_g.norm();
  const double nf = info_f.norm();
  if (ng == 0.0 || nf == 0.0) {
    throw ValidationError("info", "alignment is undefined for a zero information vector");
  }
  return std::clamp(info_g.dot(info_f) / (ng * nf), -1.0, 1.0);
}

double info_alignment(const InfoVector& info_g, const InfoVector& info_f) {
  return info_alignment(info_g.values, info_f.values);
}

double inverse_similarity_penalty(const Vector& info_g, const Vector& info_f, double dot_guard) {
  if (info_g.size() != info_f.size()) throw ShapeError("penalty: length mismatch");
  return 1.0 / std::max(info_g.dot(info_f), dot_guard);
}

Vector inverse_similarity_penalty_grad(const Vector& info_g, const Vector& info_f,
                                       double dot_guard) {
  if (info_g.size() != info_f.size()) throw ShapeError("penalty: length mismatch");
  const double dot = info_g.dot(info_f);
  if (dot <= dot_guard) return Vector::Zero(info_g.size());
  return -info_f / (dot * dot);
}

PenaltyDraws full_penalty_draws(Index dim, Index centers, int samples, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  PenaltyDraws d;
  d.offsets.resize(dim, centers * samples);
  for (Index i = 0; i < dim; ++i) {
    d.coords.push_back(i);
    d.weights.push_back(1.0);
    for (Index c = 0; c < d.offsets.cols(); ++c) d.offsets(i, c) = normal(rng);
  }
  return d;
}

PenaltyDraws sampled_penalty_draws(const Vector& info_f, int count, Index centers, int samples,
                                   Rng& rng) {
  if (count <= 0) throw ValidationError("coords_per_step", "must be positive");
  if ((info_f.array() < 0.0).any() || !info_f.allFinite() || info_f.sum() <= 0.0) {
    throw ValidationError("info_f", "sampling weights must be non-negative with a positive sum");
  }
  std::discrete_distribution<Index> pick(info_f.data(), info_f.data() + info_f.size());
  std::normal_distribution<double> normal(0.0, 1.0);
  const double total = info_f.sum();
  PenaltyDraws d;
  d.offsets.resize(count, centers * samples);
  for (int k = 0; k < count; ++k) {
    const Index i = pick(rng);
    d.coords.push_back(i);
    // Unbiased for sum_i I_f[i] * Î_g[i]: 1 / (count * pi_i) with pi_i = I_f[i] / total.
    d.weights.push_back(total / (static_cast<double>(count) * info_f(i)));
    for (Index c = 0; c < d.offsets.cols(); ++c) d.offsets(k, c) = normal(rng);
  }
  return d;
}

PenaltyValue penalty_with_gradient(const nn::Sequential& net, const Matrix& centers,
                                   const Vector& info_f, const PenaltyDraws& draws, double scale,
                                   nn::Gradients* grads, double dot_guard) {
  const Index dim = net.input_size();
  const Index n_centers = centers.cols();
  const auto n_coords = static_cast<Index>(draws.coords.size());
  if (centers.rows() != dim || info_f.size() != dim) throw ShapeError("penalty: width mismatch");
  if (n_centers == 0 || n_coords == 0 || draws.offsets.rows() != n_coords ||
      draws.offsets.cols() % n_centers != 0 || draws.weights.size() != draws.coords.size()) {
    throw ShapeError("penalty: draws do not match the centers");
  }
  const Index samples = draws.offsets.cols() / n_centers;
  const Index per_coord = n_centers * samples;

  Matrix points(dim, n_coords * per_coord);
  Matrix tangent = Matrix::Zero(dim, points.cols());
  for (Index k = 0; k < n_coords; ++k) {
    const Index i = draws.coords[static_cast<std::size_t>(k)];
    for (Index p = 0; p < n_centers; ++p) {
      for (Index s = 0; s < samples; ++s) {
        const Index c = k * per_coord + p * samples + s;
        points.col(c) = centers.col(p);
        points(i, c) += draws.offsets(k, p * samples + s);
        tangent(i, c) = 1.0;
      }
    }
  }
  nn::Sequential::DualTape tape;
  net.forward_dual(points, tangent, tape);
  const Matrix& y = tape.values.back();
  const Matrix& t = tape.tangents.back();
  const Matrix floored = y.cwiseMax(kOutputFloor);
  const Vector integrand = (t.array().square() / floored.array()).colwise().sum().transpose();

  PenaltyValue out;
  Vector coeff(n_coords);
  for (Index k = 0; k < n_coords; ++k) {
    const Index i = draws.coords[static_cast<std::size_t>(k)];
    coeff(k) = draws.weights[static_cast<std::size_t>(k)] * info_f(i);
    out.dot += coeff(k) * integrand.segment(k * per_coord, per_coord).mean();
  }
  if (!std::isfinite(out.dot)) throw NumericError("information penalty is non-finite");
  out.penalty = 1.0 / std::max(out.dot, dot_guard);
  if (grads == nullptr || out.dot <= dot_guard) return out;

  // d penalty / d integrand(column) = -coeff_k / (dot^2 * per_coord).
  const double outer = -scale / (out.dot * out.dot * static_cast<double>(per_coord));
  Matrix dy(y.rows(), y.cols());
  Matrix dty(y.rows(), y.cols());
  for (Index c = 0; c < y.cols(); ++c) {
    const double w = outer * coeff(c / per_coord);
    for (Index j = 0; j < y.rows(); ++j) {
      const double tj = t(j, c);
      dty(j, c) = w * 2.0 * tj / floored(j, c);
      dy(j, c) = y(j, c) > kOutputFloor ? -w * tj * tj / (y(j, c) * y(j, c)) : 0.0;
    }
  }
  net.backward_dual(tape, dy, dty, *grads);
  return out;
}

}  // namespace latent_lens::infotheory
