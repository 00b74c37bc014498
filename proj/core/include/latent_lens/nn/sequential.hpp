#pragma once

#include "latent_lens/nn/layers.hpp"

#include <memory>
#include <vector>

namespace latent_lens::nn {

using Gradients = std::vector<Matrix>;

/// An ordered stack of layers with value semantics (copies deep-clone layers).
class Sequential {
 public:
  /// Activations recorded by a training-mode forward pass.
  struct Tape {
    std::vector<Matrix> values;  // values[0] is the input
    std::vector<Matrix> aux;
  };

  /// Values and tangents recorded by forward_dual().
  struct DualTape {
    std::vector<Matrix> values;
    std::vector<Matrix> tangents;
    std::vector<Matrix> aux;
  };

  Sequential() = default;
  Sequential(const Sequential& other);
  Sequential& operator=(const Sequential& other);
  Sequential(Sequential&&) noexcept = default;
  Sequential& operator=(Sequential&&) noexcept = default;
  ~Sequential() = default;

  template <class L, class... Args>
  L& add(Args&&... args) {
    auto layer = std::make_unique<L>(std::forward<Args>(args)...);
    L& ref = *layer;
    push_back(std::move(layer));
    return ref;
  }
  void push_back(std::unique_ptr<Layer> layer);
  void initialize(Rng& rng);

  std::size_t size() const noexcept { return layers_.size(); }
  bool empty() const noexcept { return layers_.empty(); }
  const Layer& layer(std::size_t i) const { return *layers_.at(i); }
  Index input_size() const;
  Index output_size() const;

  std::vector<Matrix*> parameters();
  std::vector<const Matrix*> parameters() const;
  std::size_t parameter_count() const;
  Gradients zero_gradients() const;

  /// Inference-mode forward pass.
  Matrix forward(const Matrix& x) const;
  /// Forward pass over layers [first, last).
  Matrix forward_range(const Matrix& x, std::size_t first, std::size_t last) const;
  Matrix forward(const Matrix& x, Tape& tape, const ForwardContext& ctx) const;
  /// Reverse pass; accumulates into `grads` (same order as parameters()).
  Matrix backward(const Tape& tape, const Matrix& dy, Gradients& grads,
                  bool want_input_grad = false) const;

  /// Inference-mode forward pass carrying the tangent `tx` alongside `x`.
  void forward_dual(const Matrix& x, const Matrix& tx, DualTape& tape) const;
  /// Reverse pass through values and tangents; returns (dx, dtx) via out-params.
  void backward_dual(const DualTape& tape, const Matrix& dy, const Matrix& dty, Gradients& grads,
                     Matrix* dx = nullptr, Matrix* dtx = nullptr) const;

  nlohmann::json describe() const;
  static Sequential from_description(const nlohmann::json& layers);

 private:
  std::span<Matrix> layer_grads(Gradients& grads, std::size_t layer) const;

  std::vector<std::unique_ptr<Layer>> layers_;
  std::vector<std::size_t> param_offsets_;  // first parameter index of each layer
};

}  // namespace latent_lens::nn
