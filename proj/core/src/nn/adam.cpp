#include "latent_lens/nn/adam.hpp"

#include "latent_lens/error.hpp"

#include <cmath>

namespace latent_lens::nn {

Adam::Adam(std::vector<Matrix*> params, AdamConfig config)
    : params_(std::move(params)), config_(config) {
  for (const auto* p : params_) {
    m_.push_back(Matrix::Zero(p->rows(), p->cols()));
    v_.push_back(Matrix::Zero(p->rows(), p->cols()));
  }
}

double global_norm(const std::vector<Matrix>& grads) {
  double sq = 0.0;
  for (const auto& g : grads) sq += g.squaredNorm();
  return std::sqrt(sq);
}

void Adam::step(const std::vector<Matrix>& grads) {
  if (grads.size() != params_.size()) throw ShapeError("adam: gradient list size mismatch");
  double scale = 1.0;
  if (config_.clip_norm > 0.0) {
    const double norm = global_norm(grads);
    if (norm > config_.clip_norm) scale = config_.clip_norm / norm;
  }
  ++t_;
  const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
  const double step = config_.learning_rate * std::sqrt(c2) / c1;
  for (std::size_t k = 0; k < params_.size(); ++k) {
    const auto g = (grads[k].array() * scale).eval();
    m_[k].array() = config_.beta1 * m_[k].array() + (1.0 - config_.beta1) * g;
    v_[k].array() = config_.beta2 * v_[k].array() + (1.0 - config_.beta2) * g.square();
    params_[k]->array() -=
        step * m_[k].array() / (v_[k].array().sqrt() + config_.epsilon * std::sqrt(c2));
  }
}

}  // namespace latent_lens::nn
