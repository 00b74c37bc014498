#include "latent_lens/nn/layers.hpp"

#include "latent_lens/error.hpp"

#include <cmath>
#include <random>

namespace latent_lens::nn {
namespace {

using nlohmann::json;

void fill_normal(Matrix& m, double stddev, Rng& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  for (Index j = 0; j < m.cols(); ++j) {
    for (Index i = 0; i < m.rows(); ++i) m(i, j) = dist(rng);
  }
}

void check_rows(const Matrix& x, Index expected, const char* who) {
  if (x.rows() != expected) {
    throw ShapeError(std::string(who) + ": expected " + std::to_string(expected) +
                     " input rows, got " + std::to_string(x.rows()));
  }
}

json geometry_json(const ConvGeometry& g) {
  return json{{"in_channels", g.in_channels}, {"in_height", g.in_height},
              {"in_width", g.in_width},       {"out_channels", g.out_channels},
              {"kernel", g.kernel},           {"stride", g.stride},
              {"padding", g.padding}};
}

ConvGeometry geometry_from_json(const json& j) {
  ConvGeometry g;
  g.in_channels = j.at("in_channels").get<int>();
  g.in_height = j.at("in_height").get<int>();
  g.in_width = j.at("in_width").get<int>();
  g.out_channels = j.at("out_channels").get<int>();
  g.kernel = j.at("kernel").get<int>();
  g.stride = j.at("stride").get<int>();
  g.padding = j.at("padding").get<int>();
  return g;
}

}  // namespace

double sigmoid(double x) noexcept {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// ---------------------------------------------------------------- Linear

Linear::Linear(Index in, Index out) : in_(in), out_(out) {
  if (in <= 0 || out <= 0) throw ShapeError("linear layer needs positive widths");
  params_ = {Matrix::Zero(out, in), Matrix::Zero(out, 1)};
}

json Linear::describe() const { return {{"kind", kind()}, {"in", in_}, {"out", out_}}; }

void Linear::initialize(Rng& rng) {
  fill_normal(params_[0], std::sqrt(2.0 / static_cast<double>(in_)), rng);
  params_[1].setZero();
}

Matrix Linear::forward(const Matrix& x, Matrix& /*aux*/, const ForwardContext& /*ctx*/) const {
  check_rows(x, in_, "linear");
  Matrix y = params_[0] * x;
  y.colwise() += params_[1].col(0);
  return y;
}

Matrix Linear::backward(const Matrix& x, const Matrix& /*y*/, const Matrix& /*aux*/,
                        const Matrix& dy, std::span<Matrix> grads, bool want_input_grad) const {
  grads[0].noalias() += dy * x.transpose();
  grads[1].noalias() += dy.rowwise().sum();
  if (!want_input_grad) return {};
  return params_[0].transpose() * dy;
}

Matrix Linear::tangent(const Matrix& /*x*/, const Matrix& /*y*/, const Matrix& /*aux*/,
                       const Matrix& tx) const {
  return params_[0] * tx;
}

void Linear::backward_dual(const Matrix& x, const Matrix& /*y*/, const Matrix& /*aux*/,
                           const Matrix& tx, const Matrix& dy, const Matrix& dty,
                           std::span<Matrix> grads, Matrix& dx, Matrix& dtx) const {
  grads[0].noalias() += dy * x.transpose();
  grads[0].noalias() += dty * tx.transpose();
  grads[1].noalias() += dy.rowwise().sum();
  dx = params_[0].transpose() * dy;
  dtx = params_[0].transpose() * dty;
}

// ---------------------------------------------------------------- convolution helpers

void ConvGeometry::validate() const {
  if (in_channels <= 0 || out_channels <= 0 || kernel <= 0 || stride <= 0 || padding < 0) {
    throw ShapeError("convolution geometry has non-positive extents");
  }
  if (out_height() <= 0 || out_width() <= 0) {
    throw ShapeError("convolution produces an empty output grid");
  }
}

Matrix im2col(const Matrix& x, const ConvGeometry& g) {
  const Index batch = x.cols();
  const int ho = g.out_height();
  const int wo = g.out_width();
  const int k = g.kernel;
  const Index plane = Index{ho} * wo;
  const Index in_plane = Index{g.in_height} * g.in_width;
  Matrix cols(g.patch_size(), batch * plane);
  for (Index b = 0; b < batch; ++b) {
    const double* img = x.col(b).data();
    for (int oy = 0; oy < ho; ++oy) {
      const int iy0 = oy * g.stride - g.padding;
      for (int ox = 0; ox < wo; ++ox) {
        const int ix0 = ox * g.stride - g.padding;
        double* dst = cols.col(b * plane + Index{oy} * wo + ox).data();
        const bool interior =
            iy0 >= 0 && ix0 >= 0 && iy0 + k <= g.in_height && ix0 + k <= g.in_width;
        for (int c = 0; c < g.in_channels; ++c) {
          const double* chan = img + c * in_plane;
          if (interior) {
            for (int ki = 0; ki < k; ++ki) {
              const double* row = chan + (iy0 + ki) * g.in_width + ix0;
              for (int kj = 0; kj < k; ++kj) *dst++ = row[kj];
            }
            continue;
          }
          for (int ki = 0; ki < k; ++ki) {
            const int iy = iy0 + ki;
            const bool row_ok = iy >= 0 && iy < g.in_height;
            for (int kj = 0; kj < k; ++kj) {
              const int ix = ix0 + kj;
              *dst++ = (row_ok && ix >= 0 && ix < g.in_width) ? chan[iy * g.in_width + ix] : 0.0;
            }
          }
        }
      }
    }
  }
  return cols;
}

Matrix col2im(const Matrix& cols, const ConvGeometry& g, Index batch) {
  const int ho = g.out_height();
  const int wo = g.out_width();
  const int k = g.kernel;
  const Index plane = Index{ho} * wo;
  const Index in_plane = Index{g.in_height} * g.in_width;
  Matrix x = Matrix::Zero(g.in_size(), batch);
  for (Index b = 0; b < batch; ++b) {
    double* img = x.col(b).data();
    for (int oy = 0; oy < ho; ++oy) {
      const int iy0 = oy * g.stride - g.padding;
      for (int ox = 0; ox < wo; ++ox) {
        const int ix0 = ox * g.stride - g.padding;
        const double* src = cols.col(b * plane + Index{oy} * wo + ox).data();
        const bool interior =
            iy0 >= 0 && ix0 >= 0 && iy0 + k <= g.in_height && ix0 + k <= g.in_width;
        for (int c = 0; c < g.in_channels; ++c) {
          double* chan = img + c * in_plane;
          if (interior) {
            for (int ki = 0; ki < k; ++ki) {
              double* row = chan + (iy0 + ki) * g.in_width + ix0;
              for (int kj = 0; kj < k; ++kj) row[kj] += *src++;
            }
            continue;
          }
          for (int ki = 0; ki < k; ++ki) {
            const int iy = iy0 + ki;
            const bool row_ok = iy >= 0 && iy < g.in_height;
            for (int kj = 0; kj < k; ++kj, ++src) {
              const int ix = ix0 + kj;
              if (row_ok && ix >= 0 && ix < g.in_width) chan[iy * g.in_width + ix] += *src;
            }
          }
        }
      }
    }
  }
  return x;
}

Matrix to_channel_rows(const Matrix& x, Index channels, Index plane) {
  const Index batch = x.cols();
  Matrix m(channels, batch * plane);
  for (Index b = 0; b < batch; ++b) {
    m.middleCols(b * plane, plane) =
        Eigen::Map<const Matrix>(x.col(b).data(), plane, channels).transpose();
  }
  return m;
}

Matrix from_channel_rows(const Matrix& m, Index channels, Index plane) {
  const Index batch = m.cols() / plane;
  Matrix x(channels * plane, batch);
  for (Index b = 0; b < batch; ++b) {
    Eigen::Map<Matrix>(x.col(b).data(), plane, channels) =
        m.middleCols(b * plane, plane).transpose();
  }
  return x;
}

// ---------------------------------------------------------------- Conv2d

Conv2d::Conv2d(const ConvGeometry& geometry) : g_(geometry) {
  g_.validate();
  params_ = {Matrix::Zero(g_.out_channels, g_.patch_size()), Matrix::Zero(g_.out_channels, 1)};
}

json Conv2d::describe() const {
  json j = geometry_json(g_);
  j["kind"] = kind();
  return j;
}

void Conv2d::initialize(Rng& rng) {
  fill_normal(params_[0], std::sqrt(2.0 / static_cast<double>(g_.patch_size())), rng);
  params_[1].setZero();
}

Matrix Conv2d::apply(const Matrix& x) const {
  check_rows(x, g_.in_size(), "conv2d");
  const Matrix ym = params_[0] * im2col(x, g_);
  return from_channel_rows(ym, g_.out_channels, g_.out_plane());
}

Matrix Conv2d::apply_adjoint(const Matrix& dy) const {
  const Matrix dym = to_channel_rows(dy, g_.out_channels, g_.out_plane());
  return col2im(params_[0].transpose() * dym, g_, dy.cols());
}

Matrix Conv2d::forward(const Matrix& x, Matrix& /*aux*/, const ForwardContext& /*ctx*/) const {
  check_rows(x, g_.in_size(), "conv2d");
  Matrix ym = params_[0] * im2col(x, g_);
  ym.colwise() += params_[1].col(0);
  return from_channel_rows(ym, g_.out_channels, g_.out_plane());
}

Matrix Conv2d::backward(const Matrix& x, const Matrix& /*y*/, const Matrix& /*aux*/,
                        const Matrix& dy, std::span<Matrix> grads, bool want_input_grad) const {
  const Matrix dym = to_channel_rows(dy, g_.out_channels, g_.out_plane());
  grads[0].noalias() += dym * im2col(x, g_).transpose();
  grads[1].noalias() += dym.rowwise().sum();
  if (!want_input_grad) return {};
  return col2im(params_[0].transpose() * dym, g_, dy.cols());
}

Matrix Conv2d::tangent(const Matrix& /*x*/, const Matrix& /*y*/, const Matrix& /*aux*/,
                       const Matrix& tx) const {
  return apply(tx);
}

void Conv2d::backward_dual(const Matrix& x, const Matrix& /*y*/, const Matrix& /*aux*/,
                           const Matrix& tx, const Matrix& dy, const Matrix& dty,
                           std::span<Matrix> grads, Matrix& dx, Matrix& dtx) const {
  const Matrix dym = to_channel_rows(dy, g_.out_channels, g_.out_plane());
  const Matrix dtym = to_channel_rows(dty, g_.out_channels, g_.out_plane());
  grads[0].noalias() += dym * im2col(x, g_).transpose();
  grads[0].noalias() += dtym * im2col(tx, g_).transpose();
  grads[1].noalias() += dym.rowwise().sum();
  dx = col2im(params_[0].transpose() * dym, g_, dy.cols());
  dtx = col2im(params_[0].transpose() * dtym, g_, dty.cols());
}

// ---------------------------------------------------------------- ConvTranspose2d

ConvTranspose2d::ConvTranspose2d(const ConvGeometry& mirror) : g_(mirror) {
  g_.validate();
  params_ = {Matrix::Zero(g_.out_channels, g_.patch_size()), Matrix::Zero(g_.in_channels, 1)};
}

json ConvTranspose2d::describe() const {
  json j = geometry_json(g_);
  j["kind"] = kind();
  return j;
}

void ConvTranspose2d::initialize(Rng& rng) {
  const double fan_in = static_cast<double>(g_.out_channels) * g_.kernel * g_.kernel /
                        (static_cast<double>(g_.stride) * g_.stride);
  fill_normal(params_[0], std::sqrt(2.0 / fan_in), rng);
  params_[1].setZero();
}

Matrix ConvTranspose2d::apply(const Matrix& x) const {
  check_rows(x, g_.out_size(), "conv_transpose2d");
  const Matrix xm = to_channel_rows(x, g_.out_channels, g_.out_plane());
  return col2im(params_[0].transpose() * xm, g_, x.cols());
}

Matrix ConvTranspose2d::apply_adjoint(const Matrix& dy) const {
  const Matrix m = params_[0] * im2col(dy, g_);
  return from_channel_rows(m, g_.out_channels, g_.out_plane());
}

Matrix ConvTranspose2d::forward(const Matrix& x, Matrix& /*aux*/,
                                const ForwardContext& /*ctx*/) const {
  Matrix y = apply(x);
  const Index plane = Index{g_.in_height} * g_.in_width;
  for (int c = 0; c < g_.in_channels; ++c) {
    y.middleRows(c * plane, plane).array() += params_[1](c, 0);
  }
  return y;
}

Matrix ConvTranspose2d::backward(const Matrix& x, const Matrix& /*y*/, const Matrix& /*aux*/,
                                 const Matrix& dy, std::span<Matrix> grads,
                                 bool want_input_grad) const {
  const Matrix cols = im2col(dy, g_);
  const Matrix xm = to_channel_rows(x, g_.out_channels, g_.out_plane());
  grads[0].noalias() += xm * cols.transpose();
  const Index plane = Index{g_.in_height} * g_.in_width;
  for (int c = 0; c < g_.in_channels; ++c) {
    grads[1](c, 0) += dy.middleRows(c * plane, plane).sum();
  }
  if (!want_input_grad) return {};
  return from_channel_rows(params_[0] * cols, g_.out_channels, g_.out_plane());
}

Matrix ConvTranspose2d::tangent(const Matrix& /*x*/, const Matrix& /*y*/, const Matrix& /*aux*/,
                                const Matrix& tx) const {
  return apply(tx);
}

void ConvTranspose2d::backward_dual(const Matrix& x, const Matrix& /*y*/, const Matrix& /*aux*/,
                                    const Matrix& tx, const Matrix& dy, const Matrix& dty,
                                    std::span<Matrix> grads, Matrix& dx, Matrix& dtx) const {
  const Matrix cols = im2col(dy, g_);
  const Matrix tcols = im2col(dty, g_);
  grads[0].noalias() += to_channel_rows(x, g_.out_channels, g_.out_plane()) * cols.transpose();
  grads[0].noalias() += to_channel_rows(tx, g_.out_channels, g_.out_plane()) * tcols.transpose();
  const Index plane = Index{g_.in_height} * g_.in_width;
  for (int c = 0; c < g_.in_channels; ++c) {
    grads[1](c, 0) += dy.middleRows(c * plane, plane).sum();
  }
  dx = from_channel_rows(params_[0] * cols, g_.out_channels, g_.out_plane());
  dtx = from_channel_rows(params_[0] * tcols, g_.out_channels, g_.out_plane());
}

// ---------------------------------------------------------------- ReLU

json ReLU::describe() const { return {{"kind", kind()}, {"size", size_}}; }

Matrix ReLU::forward(const Matrix& x, Matrix& /*aux*/, const ForwardContext& /*ctx*/) const {
  return x.cwiseMax(0.0);
}

Matrix ReLU::backward(const Matrix& x, const Matrix& /*y*/, const Matrix& /*aux*/,
                      const Matrix& dy, std::span<Matrix> /*grads*/, bool want_input_grad) const {
  if (!want_input_grad) return {};
  return (x.array() > 0.0).select(dy.array(), 0.0).matrix();
}

Matrix ReLU::tangent(const Matrix& x, const Matrix& /*y*/, const Matrix& /*aux*/,
                     const Matrix& tx) const {
  return (x.array() > 0.0).select(tx.array(), 0.0).matrix();
}

void ReLU::backward_dual(const Matrix& x, const Matrix& /*y*/, const Matrix& /*aux*/,
                         const Matrix& /*tx*/, const Matrix& dy, const Matrix& dty,
                         std::span<Matrix> /*grads*/, Matrix& dx, Matrix& dtx) const {
  dx = (x.array() > 0.0).select(dy.array(), 0.0).matrix();
  dtx = (x.array() > 0.0).select(dty.array(), 0.0).matrix();
}

// ---------------------------------------------------------------- Sigmoid

json Sigmoid::describe() const { return {{"kind", kind()}, {"size", size_}}; }

Matrix Sigmoid::forward(const Matrix& x, Matrix& /*aux*/, const ForwardContext& /*ctx*/) const {
  // exp(-x) overflowing to +inf still yields the correct limit 0.
  return (1.0 + (-x.array()).exp()).inverse().matrix();
}

Matrix Sigmoid::backward(const Matrix& /*x*/, const Matrix& y, const Matrix& /*aux*/,
                         const Matrix& dy, std::span<Matrix> /*grads*/,
                         bool want_input_grad) const {
  if (!want_input_grad) return {};
  return (dy.array() * y.array() * (1.0 - y.array())).matrix();
}

Matrix Sigmoid::tangent(const Matrix& /*x*/, const Matrix& y, const Matrix& /*aux*/,
                        const Matrix& tx) const {
  return (tx.array() * y.array() * (1.0 - y.array())).matrix();
}

void Sigmoid::backward_dual(const Matrix& /*x*/, const Matrix& y, const Matrix& /*aux*/,
                            const Matrix& tx, const Matrix& dy, const Matrix& dty,
                            std::span<Matrix> /*grads*/, Matrix& dx, Matrix& dtx) const {
  const auto slope = (y.array() * (1.0 - y.array())).eval();
  const auto curvature = (slope * (1.0 - 2.0 * y.array())).eval();
  dx = (dy.array() * slope + dty.array() * tx.array() * curvature).matrix();
  dtx = (dty.array() * slope).matrix();
}

// ---------------------------------------------------------------- Dropout

Dropout::Dropout(Index size, double rate) : size_(size), rate_(rate) {
  if (!(rate >= 0.0 && rate < 1.0)) throw ValidationError("dropout_rate", "must lie in [0, 1)");
}

json Dropout::describe() const { return {{"kind", kind()}, {"size", size_}, {"rate", rate_}}; }

Matrix Dropout::forward(const Matrix& x, Matrix& aux, const ForwardContext& ctx) const {
  if (ctx.mode == Mode::inference || rate_ == 0.0) {
    aux.resize(0, 0);
    return x;
  }
  if (ctx.rng == nullptr) throw Error("dropout in training mode needs a random stream");
  std::bernoulli_distribution keep(1.0 - rate_);
  const double scale = 1.0 / (1.0 - rate_);
  aux.resize(x.rows(), x.cols());
  for (Index j = 0; j < x.cols(); ++j) {
    for (Index i = 0; i < x.rows(); ++i) aux(i, j) = keep(*ctx.rng) ? scale : 0.0;
  }
  return x.cwiseProduct(aux);
}

Matrix Dropout::backward(const Matrix& /*x*/, const Matrix& /*y*/, const Matrix& aux,
                         const Matrix& dy, std::span<Matrix> /*grads*/,
                         bool want_input_grad) const {
  if (!want_input_grad) return {};
  return aux.size() == 0 ? dy : Matrix(dy.cwiseProduct(aux));
}

Matrix Dropout::tangent(const Matrix& /*x*/, const Matrix& /*y*/, const Matrix& aux,
                        const Matrix& tx) const {
  return aux.size() == 0 ? tx : Matrix(tx.cwiseProduct(aux));
}

void Dropout::backward_dual(const Matrix& /*x*/, const Matrix& /*y*/, const Matrix& aux,
                            const Matrix& /*tx*/, const Matrix& dy, const Matrix& dty,
                            std::span<Matrix> /*grads*/, Matrix& dx, Matrix& dtx) const {
  if (aux.size() == 0) {
    dx = dy;
    dtx = dty;
  } else {
    dx = dy.cwiseProduct(aux);
    dtx = dty.cwiseProduct(aux);
  }
}

// ---------------------------------------------------------------- factory

std::unique_ptr<Layer> make_layer(const json& d) {
  const auto kind = d.at("kind").get<std::string>();
  if (kind == "linear") {
    return std::make_unique<Linear>(d.at("in").get<Index>(), d.at("out").get<Index>());
  }
  if (kind == "conv2d") return std::make_unique<Conv2d>(geometry_from_json(d));
  if (kind == "conv_transpose2d") return std::make_unique<ConvTranspose2d>(geometry_from_json(d));
  if (kind == "relu") return std::make_unique<ReLU>(d.at("size").get<Index>());
  if (kind == "sigmoid") return std::make_unique<Sigmoid>(d.at("size").get<Index>());
  if (kind == "dropout") {
    return std::make_unique<Dropout>(d.at("size").get<Index>(), d.at("rate").get<double>());
  }
  throw ArtifactError("unknown layer kind '" + kind + "'");
}

}  // namespace latent_lens::nn
