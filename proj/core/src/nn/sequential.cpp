#include "latent_lens/nn/sequential.hpp"

#include "latent_lens/error.hpp"

namespace latent_lens::nn {

Sequential::Sequential(const Sequential& other) : param_offsets_(other.param_offsets_) {
  layers_.reserve(other.layers_.size());
  for (const auto& l : other.layers_) layers_.push_back(l->clone());
}

Sequential& Sequential::operator=(const Sequential& other) {
  if (this != &other) {
    Sequential copy(other);
    *this = std::move(copy);
  }
  return *this;
}

void Sequential::push_back(std::unique_ptr<Layer> layer) {
  if (!layers_.empty() && layers_.back()->output_size() != layer->input_size()) {
    throw ShapeError("layer '" + layer->kind() + "' expects " +
                     std::to_string(layer->input_size()) + " inputs but previous layer emits " +
                     std::to_string(layers_.back()->output_size()));
  }
  std::size_t offset = 0;
  if (!layers_.empty()) offset = param_offsets_.back() + layers_.back()->parameters().size();
  param_offsets_.push_back(offset);
  layers_.push_back(std::move(layer));
}

void Sequential::initialize(Rng& rng) {
  for (auto& l : layers_) l->initialize(rng);
}

Index Sequential::input_size() const {
  return layers_.empty() ? 0 : layers_.front()->input_size();
}

Index Sequential::output_size() const {
  return layers_.empty() ? 0 : layers_.back()->output_size();
}

std::vector<Matrix*> Sequential::parameters() {
  std::vector<Matrix*> out;
  for (auto& l : layers_) {
    for (auto& p : l->parameters()) out.push_back(&p);
  }
  return out;
}

std::vector<const Matrix*> Sequential::parameters() const {
  std::vector<const Matrix*> out;
  for (const auto& l : layers_) {
    for (const auto& p : l->parameters()) out.push_back(&p);
  }
  return out;
}

std::size_t Sequential::parameter_count() const {
  std::size_t n = 0;
  for (const auto* p : parameters()) n += static_cast<std::size_t>(p->size());
  return n;
}

Gradients Sequential::zero_gradients() const {
  Gradients g;
  for (const auto* p : parameters()) g.push_back(Matrix::Zero(p->rows(), p->cols()));
  return g;
}

std::span<Matrix> Sequential::layer_grads(Gradients& grads, std::size_t layer) const {
  return {grads.data() + param_offsets_[layer], layers_[layer]->parameters().size()};
}

Matrix Sequential::forward(const Matrix& x) const { return forward_range(x, 0, layers_.size()); }

Matrix Sequential::forward_range(const Matrix& x, std::size_t first, std::size_t last) const {
  const ForwardContext ctx{};
  Matrix aux;
  Matrix h = x;
  for (std::size_t i = first; i < last; ++i) h = layers_[i]->forward(h, aux, ctx);
  return h;
}

Matrix Sequential::forward(const Matrix& x, Tape& tape, const ForwardContext& ctx) const {
  tape.values.resize(layers_.size() + 1);
  tape.aux.resize(layers_.size());
  tape.values[0] = x;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    tape.values[i + 1] = layers_[i]->forward(tape.values[i], tape.aux[i], ctx);
  }
  return tape.values.back();
}

Matrix Sequential::backward(const Tape& tape, const Matrix& dy, Gradients& grads,
                            bool want_input_grad) const {
  Matrix d = dy;
  for (std::size_t k = layers_.size(); k-- > 0;) {
    const bool need_dx = k > 0 || want_input_grad;
    d = layers_[k]->backward(tape.values[k], tape.values[k + 1], tape.aux[k], d,
                             layer_grads(grads, k), need_dx);
  }
  return d;
}

void Sequential::forward_dual(const Matrix& x, const Matrix& tx, DualTape& tape) const {
  const ForwardContext ctx{};
  tape.values.resize(layers_.size() + 1);
  tape.tangents.resize(layers_.size() + 1);
  tape.aux.resize(layers_.size());
  tape.values[0] = x;
  tape.tangents[0] = tx;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    tape.values[i + 1] = layers_[i]->forward(tape.values[i], tape.aux[i], ctx);
    tape.tangents[i + 1] =
        layers_[i]->tangent(tape.values[i], tape.values[i + 1], tape.aux[i], tape.tangents[i]);
  }
}

void Sequential::backward_dual(const DualTape& tape, const Matrix& dy, const Matrix& dty,
                               Gradients& grads, Matrix* dx, Matrix* dtx) const {
  Matrix d = dy;
  Matrix dt = dty;
  for (std::size_t k = layers_.size(); k-- > 0;) {
    Matrix nd;
    Matrix ndt;
    layers_[k]->backward_dual(tape.values[k], tape.values[k + 1], tape.aux[k], tape.tangents[k],
                              d, dt, layer_grads(grads, k), nd, ndt);
    d = std::move(nd);
    dt = std::move(ndt);
  }
  if (dx != nullptr) *dx = std::move(d);
  if (dtx != nullptr) *dtx = std::move(dt);
}

nlohmann::json Sequential::describe() const {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& l : layers_) layers.push_back(l->describe());
  return layers;
}

Sequential Sequential::from_description(const nlohmann::json& layers) {
  Sequential s;
  for (const auto& d : layers) s.push_back(make_layer(d));
  return s;
}

}  // namespace latent_lens::nn
