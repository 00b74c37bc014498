#pragma once

#include "latent_lens/random.hpp"
#include "latent_lens/tensor.hpp"

#include <nlohmann/json.hpp>

#include <memory>
#include <span>
#include <string>
#include <vector>

namespace latent_lens::nn {

enum class Mode { inference, training };

struct ForwardContext {
  Mode mode = Mode::inference;
  Rng* rng = nullptr;  // required by stochastic layers in training mode
};

/// A differentiable map between feature-major batches (one column per sample).
///
/// Layers hold parameters only; activations live in the caller's tape so a
/// trained network can be shared across threads for inference. Besides the
/// usual reverse pass, every layer supports forward-mode tangents and a reverse
/// pass through the (value, tangent) pair. The latter yields gradients of
/// functionals of the Jacobian, e.g. sums of squared input sensitivities.
class Layer {
 public:
  virtual ~Layer() = default;

  virtual std::unique_ptr<Layer> clone() const = 0;
  virtual std::string kind() const = 0;
  virtual nlohmann::json describe() const = 0;
  virtual Index input_size() const = 0;
  virtual Index output_size() const = 0;
  virtual void initialize(Rng& /*rng*/) {}

  std::vector<Matrix>& parameters() noexcept { return params_; }
  const std::vector<Matrix>& parameters() const noexcept { return params_; }

  /// `aux` receives per-call state needed later by backward (dropout masks).
  virtual Matrix forward(const Matrix& x, Matrix& aux, const ForwardContext& ctx) const = 0;

  /// Accumulates parameter gradients into `grads`; returns dL/dx when requested.
  virtual Matrix backward(const Matrix& x, const Matrix& y, const Matrix& aux, const Matrix& dy,
                          std::span<Matrix> grads, bool want_input_grad) const = 0;

  /// Jacobian-vector product J(x) tx.
  virtual Matrix tangent(const Matrix& x, const Matrix& y, const Matrix& aux,
                         const Matrix& tx) const = 0;

  /// Reverse pass through (y, ty) = (f(x), J(x) tx) given adjoints (dy, dty).
  virtual void backward_dual(const Matrix& x, const Matrix& y, const Matrix& aux, const Matrix& tx,
                             const Matrix& dy, const Matrix& dty, std::span<Matrix> grads,
                             Matrix& dx, Matrix& dtx) const = 0;

 protected:
  std::vector<Matrix> params_;
};

class Linear final : public Layer {
 public:
  Linear(Index in, Index out);

  std::unique_ptr<Layer> clone() const override { return std::make_unique<Linear>(*this); }
  std::string kind() const override { return "linear"; }
  nlohmann::json describe() const override;
  Index input_size() const override { return in_; }
  Index output_size() const override { return out_; }
  void initialize(Rng& rng) override;

  const Matrix& weight() const { return params_[0]; }
  const Matrix& bias() const { return params_[1]; }

  Matrix forward(const Matrix& x, Matrix& aux, const ForwardContext& ctx) const override;
  Matrix backward(const Matrix& x, const Matrix& y, const Matrix& aux, const Matrix& dy,
                  std::span<Matrix> grads, bool want_input_grad) const override;
  Matrix tangent(const Matrix& x, const Matrix& y, const Matrix& aux,
                 const Matrix& tx) const override;
  void backward_dual(const Matrix& x, const Matrix& y, const Matrix& aux, const Matrix& tx,
                     const Matrix& dy, const Matrix& dty, std::span<Matrix> grads, Matrix& dx,
                     Matrix& dtx) const override;

 private:
  Index in_;
  Index out_;
};

/// Geometry of a 2-D convolution with square kernels and symmetric zero padding.
struct ConvGeometry {
  int in_channels = 0;
  int in_height = 0;
  int in_width = 0;
  int out_channels = 0;
  int kernel = 3;
  int stride = 1;
  int padding = 0;

  int out_height() const noexcept { return (in_height + 2 * padding - kernel) / stride + 1; }
  int out_width() const noexcept { return (in_width + 2 * padding - kernel) / stride + 1; }
  Index patch_size() const noexcept { return Index{in_channels} * kernel * kernel; }
  Index in_size() const noexcept { return Index{in_channels} * in_height * in_width; }
  Index out_plane() const noexcept { return Index{out_height()} * out_width(); }
  Index out_size() const noexcept { return Index{out_channels} * out_plane(); }
  void validate() const;
};

/// Unfolds every receptive field of every sample into a column:
/// result is (C*k*k) x (B * out_h * out_w).
Matrix im2col(const Matrix& x, const ConvGeometry& g);

/// Adjoint of im2col; accumulates columns back into (C*H*W) x B images.
Matrix col2im(const Matrix& cols, const ConvGeometry& g, Index batch);

/// (C*P) x B  ->  C x (B*P), where P is the spatial plane size.
Matrix to_channel_rows(const Matrix& x, Index channels, Index plane);
/// Inverse of to_channel_rows.
Matrix from_channel_rows(const Matrix& m, Index channels, Index plane);

class Conv2d final : public Layer {
 public:
  explicit Conv2d(const ConvGeometry& geometry);

  std::unique_ptr<Layer> clone() const override { return std::make_unique<Conv2d>(*this); }
  std::string kind() const override { return "conv2d"; }
  nlohmann::json describe() const override;
  Index input_size() const override { return g_.in_size(); }
  Index output_size() const override { return g_.out_size(); }
  void initialize(Rng& rng) override;
  const ConvGeometry& geometry() const noexcept { return g_; }

  Matrix forward(const Matrix& x, Matrix& aux, const ForwardContext& ctx) const override;
  Matrix backward(const Matrix& x, const Matrix& y, const Matrix& aux, const Matrix& dy,
                  std::span<Matrix> grads, bool want_input_grad) const override;
  Matrix tangent(const Matrix& x, const Matrix& y, const Matrix& aux,
                 const Matrix& tx) const override;
  void backward_dual(const Matrix& x, const Matrix& y, const Matrix& aux, const Matrix& tx,
                     const Matrix& dy, const Matrix& dty, std::span<Matrix> grads, Matrix& dx,
                     Matrix& dtx) const override;

  /// Bias-free convolution (the linear part).
  Matrix apply(const Matrix& x) const;
  /// Adjoint of apply().
  Matrix apply_adjoint(const Matrix& dy) const;

 private:
  ConvGeometry g_;
};

/// Transposed convolution, defined as the exact adjoint of the Conv2d whose
/// geometry maps the output image back onto the input image.
class ConvTranspose2d final : public Layer {
 public:
  /// `mirror` is the forward convolution this layer transposes: its input
  /// is our output image and its output grid is our input grid.
  explicit ConvTranspose2d(const ConvGeometry& mirror);

  std::unique_ptr<Layer> clone() const override {
    return std::make_unique<ConvTranspose2d>(*this);
  }
  std::string kind() const override { return "conv_transpose2d"; }
  nlohmann::json describe() const override;
  Index input_size() const override { return g_.out_size(); }
  Index output_size() const override { return g_.in_size(); }
  void initialize(Rng& rng) override;
  const ConvGeometry& mirror() const noexcept { return g_; }

  Matrix forward(const Matrix& x, Matrix& aux, const ForwardContext& ctx) const override;
  Matrix backward(const Matrix& x, const Matrix& y, const Matrix& aux, const Matrix& dy,
                  std::span<Matrix> grads, bool want_input_grad) const override;
  Matrix tangent(const Matrix& x, const Matrix& y, const Matrix& aux,
                 const Matrix& tx) const override;
  void backward_dual(const Matrix& x, const Matrix& y, const Matrix& aux, const Matrix& tx,
                     const Matrix& dy, const Matrix& dty, std::span<Matrix> grads, Matrix& dx,
                     Matrix& dtx) const override;

  Matrix apply(const Matrix& x) const;
  Matrix apply_adjoint(const Matrix& dy) const;

 private:
  ConvGeometry g_;
};

class ReLU final : public Layer {
 public:
  explicit ReLU(Index size) : size_(size) {}

  std::unique_ptr<Layer> clone() const override { return std::make_unique<ReLU>(*this); }
  std::string kind() const override { return "relu"; }
  nlohmann::json describe() const override;
  Index input_size() const override { return size_; }
  Index output_size() const override { return size_; }

  Matrix forward(const Matrix& x, Matrix& aux, const ForwardContext& ctx) const override;
  Matrix backward(const Matrix& x, const Matrix& y, const Matrix& aux, const Matrix& dy,
                  std::span<Matrix> grads, bool want_input_grad) const override;
  Matrix tangent(const Matrix& x, const Matrix& y, const Matrix& aux,
                 const Matrix& tx) const override;
  void backward_dual(const Matrix& x, const Matrix& y, const Matrix& aux, const Matrix& tx,
                     const Matrix& dy, const Matrix& dty, std::span<Matrix> grads, Matrix& dx,
                     Matrix& dtx) const override;

 private:
  Index size_;
};

class Sigmoid final : public Layer {
 public:
  explicit Sigmoid(Index size) : size_(size) {}

  std::unique_ptr<Layer> clone() const override { return std::make_unique<Sigmoid>(*this); }
  std::string kind() const override { return "sigmoid"; }
  nlohmann::json describe() const override;
  Index input_size() const override { return size_; }
  Index output_size() const override { return size_; }

  Matrix forward(const Matrix& x, Matrix& aux, const ForwardContext& ctx) const override;
  Matrix backward(const Matrix& x, const Matrix& y, const Matrix& aux, const Matrix& dy,
                  std::span<Matrix> grads, bool want_input_grad) const override;
  Matrix tangent(const Matrix& x, const Matrix& y, const Matrix& aux,
                 const Matrix& tx) const override;
  void backward_dual(const Matrix& x, const Matrix& y, const Matrix& aux, const Matrix& tx,
                     const Matrix& dy, const Matrix& dty, std::span<Matrix> grads, Matrix& dx,
                     Matrix& dtx) const override;

 private:
  Index size_;
};

/// Inverted dropout; the identity in inference mode.
class Dropout final : public Layer {
 public:
  Dropout(Index size, double rate);

  std::unique_ptr<Layer> clone() const override { return std::make_unique<Dropout>(*this); }
  std::string kind() const override { return "dropout"; }
  nlohmann::json describe() const override;
  Index input_size() const override { return size_; }
  Index output_size() const override { return size_; }
  double rate() const noexcept { return rate_; }

  Matrix forward(const Matrix& x, Matrix& aux, const ForwardContext& ctx) const override;
  Matrix backward(const Matrix& x, const Matrix& y, const Matrix& aux, const Matrix& dy,
                  std::span<Matrix> grads, bool want_input_grad) const override;
  Matrix tangent(const Matrix& x, const Matrix& y, const Matrix& aux,
                 const Matrix& tx) const override;
  void backward_dual(const Matrix& x, const Matrix& y, const Matrix& aux, const Matrix& tx,
                     const Matrix& dy, const Matrix& dty, std::span<Matrix> grads, Matrix& dx,
                     Matrix& dtx) const override;

 private:
  Index size_;
  double rate_;
};

/// Rebuilds a layer from its describe() output. Parameters are zero-filled.
std::unique_ptr<Layer> make_layer(const nlohmann::json& description);

double sigmoid(double x) noexcept;

}  // namespace latent_lens::nn
