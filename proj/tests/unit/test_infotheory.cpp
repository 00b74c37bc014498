#include "latent_lens/error.hpp"
#include "latent_lens/infotheory.hpp"
#include "latent_lens/nn/layers.hpp"
#include "unit/support.hpp"

#include <doctest.h>

#include <numbers>
#include <random>

using namespace latent_lens;
using namespace latent_lens::infotheory;
using test_support::relative_error;

namespace {

/// E[g(z)] for z ~ N(mu, 1) by composite Simpson quadrature on mu +- 12.
double gaussian_expectation(const std::function<double(double)>& g, double mu) {
  const int n = 8000;  // even
  const double a = mu - 12.0, b = mu + 12.0, h = (b - a) / n;
  double s = 0.0;
  for (int k = 0; k <= n; ++k) {
    const double z = a + k * h;
    const double w = (k == 0 || k == n) ? 1.0 : (k % 2 ? 4.0 : 2.0);
    s += w * g(z) * std::exp(-0.5 * (z - mu) * (z - mu));
  }
  return s * h / 3.0 / std::sqrt(2.0 * std::numbers::pi);
}

ScalarFunction exp_of_coord(double rate) {
  return [rate](const Vector& z, Index i) {
    const double v = std::exp(rate * z[i]);
    return std::pair{v, rate * v};
  };
}

nn::Sequential small_sigmoid_net(Index in, Index out, std::uint64_t seed) {
  Rng rng(seed);
  nn::Sequential net;
  net.add<nn::Linear>(in, 7);
  net.add<nn::ReLU>(7);
  net.add<nn::Linear>(7, out);
  net.add<nn::Sigmoid>(out);
  net.initialize(rng);
  return net;
}

}  // namespace

TEST_SUITE("infotheory") {

TEST_CASE("Fisher information of exp(z_i) at the origin matches quadrature") {
  const double oracle = gaussian_expectation([](double z) { return std::exp(z); }, 0.0);
  CHECK(oracle == doctest::Approx(std::exp(0.5)).epsilon(1e-9));
  const Vector center = Vector::Zero(3);
  for (std::uint64_t seed : {0, 1, 2}) {
    const double est = coordinate_info(exp_of_coord(1.0), center, 1, {10000, seed});
    CHECK(relative_error(est, oracle) <= 0.05);
  }
}

TEST_CASE("Fisher information of exp(2 z_i) matches quadrature at a shifted center") {
  Vector center(2);
  center << 0.0, 0.5;
  // Integrand (2 e^{2z})^2 / e^{2z} = 4 e^{2z}.
  const double oracle = gaussian_expectation([](double z) { return 4.0 * std::exp(2.0 * z); }, 0.5);
  CHECK(oracle == doctest::Approx(4.0 * std::exp(3.0)).epsilon(1e-9));
  const double est = coordinate_info(exp_of_coord(2.0), center, 1, {100000, 7});
  CHECK(relative_error(est, oracle) <= 0.10);
}

TEST_CASE("constant functions carry exactly zero information") {
  const ScalarFunction constant = [](const Vector&, Index) { return std::pair{0.3, 0.0}; };
  CHECK(coordinate_info(constant, Vector::Zero(4), 2, {10000, 1}) == 0.0);

  nn::Sequential net = small_sigmoid_net(3, 2, 5);
  for (Matrix* p : net.parameters()) p->setZero();
  const NetworkSource src(net);
  const auto info = layer_info(src, Matrix::Random(3, 4), {16, 3}, "generator");
  CHECK((info.values.array() == 0.0).all());
}

TEST_CASE("outputs below the floor are divided by the floor") {
  const ScalarFunction tiny = [](const Vector&, Index) { return std::pair{1e-9, 2e-3}; };
  CHECK(coordinate_info(tiny, Vector::Zero(1), 0, {8, 0}) == doctest::Approx(4e-6 / kOutputFloor));
  const ScalarFunction bad = [](const Vector&, Index) { return std::pair{1.0, std::nan("")}; };
  CHECK_THROWS_AS(coordinate_info(bad, Vector::Zero(1), 0, {8, 0}), NumericError);
}

TEST_CASE("network integrand matches finite differences of the network") {
  const nn::Sequential net = small_sigmoid_net(4, 3, 9);
  const NetworkSource src(net);
  Rng rng(3);
  std::normal_distribution<double> n;
  Matrix pts(4, 5);
  for (Index i = 0; i < pts.size(); ++i) pts.data()[i] = n(rng);
  for (Index coord = 0; coord < 4; ++coord) {
    const Vector got = src.integrand(pts, coord);
    for (Index c = 0; c < pts.cols(); ++c) {
      Matrix up = pts.col(c), down = pts.col(c);
      up(coord, 0) += 1e-6;
      down(coord, 0) -= 1e-6;
      const Vector d = (net.forward(up) - net.forward(down)).col(0) / 2e-6;
      const Vector y = net.forward(pts.col(c)).col(0);
      const double expected = (d.array().square() / y.array().max(kOutputFloor)).sum();
      CHECK(relative_error(got[c], expected) < 1e-6);
    }
  }
}

TEST_CASE("layer_info with one center reproduces coordinate_info") {
  const nn::Sequential net = small_sigmoid_net(3, 2, 4);
  const NetworkSource src(net);
  const Vector center = Vector::LinSpaced(3, -0.5, 0.5);
  const GaussianProbe probe{12, 21};
  const auto info = layer_info(src, center, probe, "head");
  CHECK(info.function_tag == "head");
  for (Index i = 0; i < 3; ++i) CHECK(info.values[i] == coordinate_info(src, center, i, probe));
  CHECK(probe_offsets(probe, 1, 12) == probe_offsets(probe, 1, 12));
  CHECK(probe_offsets(probe, 1, 12) != probe_offsets(probe, 2, 12));
  CHECK_THROWS_AS(GaussianProbe({1, 0}).validate(), ValidationError);
}

TEST_CASE("alignment is a scale-invariant cosine (random vectors)") {
  Rng rng(6);
  std::uniform_real_distribution<double> u(0.0, 2.0), scale(0.01, 100.0);
  for (int trial = 0; trial < 100; ++trial) {
    const Index n = 1 + static_cast<Index>(rng() % 12);
    Vector a(n), b(n);
    for (Index i = 0; i < n; ++i) {
      a[i] = u(rng);
      b[i] = u(rng);
    }
    a[0] += 0.1;
    b[0] += 0.1;
    const double c = info_alignment(a, b);
    CHECK(c >= 0.0);
    CHECK(c <= 1.0);
    CHECK(info_alignment(scale(rng) * a, scale(rng) * b) == doctest::Approx(c).epsilon(1e-12));
    CHECK(info_alignment(a, a) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(info_alignment(b, a) == c);
  }
  CHECK_THROWS_AS(info_alignment(Vector::Zero(3), Vector::Ones(3)), ValidationError);
}

TEST_CASE("inverse penalty gradient matches central differences and respects the guard") {
  Vector g(4), f(4);
  g << 0.3, 1.2, 0.05, 2.0;
  f << 1.0, 0.1, 0.7, 0.4;
  const Vector grad = inverse_similarity_penalty_grad(g, f);
  for (Index i = 0; i < 4; ++i) {
    auto fn = [&] { return inverse_similarity_penalty(g, f); };
    const double fd = test_support::central_difference(fn, g[i], 1e-6);
    CHECK(relative_error(fd, grad[i]) <= 1e-2);
  }
  CHECK(inverse_similarity_penalty(Vector::Zero(4), f) == doctest::Approx(1.0 / kDotGuard));
  CHECK((inverse_similarity_penalty_grad(Vector::Zero(4), f).array() == 0.0).all());
}

TEST_CASE("network penalty gradient matches central differences under frozen draws") {
  nn::Sequential net = small_sigmoid_net(5, 6, 12);
  Rng rng(2);
  const Matrix centers = Matrix::Random(5, 2);
  Vector info_f(5);
  info_f << 0.4, 0.1, 0.2, 0.25, 0.05;
  for (bool sampled : {false, true}) {
    const PenaltyDraws draws = sampled ? sampled_penalty_draws(info_f, 3, 2, 4, rng)
                                       : full_penalty_draws(5, 2, 4, rng);
    auto grads = net.zero_gradients();
    const PenaltyValue pv = penalty_with_gradient(net, centers, info_f, draws, 1.0, &grads);
    CHECK(pv.penalty == doctest::Approx(1.0 / pv.dot));
    auto value = [&] { return penalty_with_gradient(net, centers, info_f, draws).penalty; };
    double worst = 0.0;
    auto ps = net.parameters();
    for (std::size_t p = 0; p < ps.size(); ++p)
      for (Index i = 0; i < ps[p]->size(); ++i) {
        const double fd = test_support::central_difference(value, ps[p]->data()[i], 1e-6);
        if (std::abs(fd) + std::abs(grads[p].data()[i]) < 1e-9) continue;
        worst = std::max(worst, relative_error(fd, grads[p].data()[i], 1e-6));
      }
    CHECK(worst <= 1e-2);
  }
}

TEST_CASE("importance-sampled dot product is unbiased") {
  Vector f(6), g(6);
  f << 0.5, 0.05, 0.2, 0.1, 0.1, 0.05;
  g << 0.2, 3.0, 0.1, 0.7, 0.0, 1.0;
  Rng rng(8);
  double mean = 0.0;
  const int trials = 40000;
  for (int t = 0; t < trials; ++t) {
    const auto d = sampled_penalty_draws(f, 3, 1, 1, rng);
    double dot = 0.0;
    for (std::size_t k = 0; k < d.coords.size(); ++k) dot += d.weights[k] * f[d.coords[k]] * g[d.coords[k]];
    mean += dot / trials;
  }
  CHECK(relative_error(mean, f.dot(g)) < 0.03);
  const auto full = full_penalty_draws(6, 2, 3, rng);
  CHECK(full.coords.size() == 6);
  CHECK(full.offsets.cols() == 6);
  CHECK(std::all_of(full.weights.begin(), full.weights.end(), [](double w) { return w == 1.0; }));
}

}
