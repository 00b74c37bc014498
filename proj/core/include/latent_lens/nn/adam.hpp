#pragma once

#include "latent_lens/tensor.hpp"

#include <vector>

namespace latent_lens::nn {

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  /// Global gradient-norm clip; <= 0 disables clipping.
  double clip_norm = 0.0;
};

class Adam {
 public:
  Adam(std::vector<Matrix*> params, AdamConfig config);

  /// Applies one update; `grads` must match the parameter list shape-for-shape.
  void step(const std::vector<Matrix>& grads);
  void set_learning_rate(double lr) noexcept { config_.learning_rate = lr; }
  long steps() const noexcept { return t_; }

 private:
  std::vector<Matrix*> params_;
  std::vector<Matrix> m_;
  std::vector<Matrix> v_;
  AdamConfig config_;
  long t_ = 0;
};

/// Euclidean norm over a whole gradient list.
double global_norm(const std::vector<Matrix>& grads);

}  // namespace latent_lens::nn
