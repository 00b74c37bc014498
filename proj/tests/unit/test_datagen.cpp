#include "latent_lens/datagen.hpp"
#include "latent_lens/error.hpp"
#include "unit/support.hpp"

#include <doctest.h>

#include <numeric>

using namespace latent_lens;
using namespace latent_lens::datagen;
using test_support::TempDir;

namespace {

DatasetSpec small_spec(long n, double rho, std::uint64_t seed) {
  DatasetSpec s;
  s.image_shape = {3, 16, 16};
  s.n_samples = n;
  s.confound_correlation = rho;
  s.seed = seed;
  return s;
}

double agreement(const LabeledImageSet& set) {
  long same = 0;
  for (std::size_t i = 0; i < set.labels.size(); ++i) same += set.labels[i] == set.confounds[i];
  return static_cast<double>(same) / static_cast<double>(set.labels.size());
}

}  // namespace

TEST_SUITE("datagen") {

TEST_CASE("label balance is exact and confound agreement tracks rho") {
  for (double rho : {0.0, 0.1, 0.5, 0.9, 1.0}) {
    const auto set = generate_dataset(small_spec(2000, rho, 4));
    set.validate();
    CHECK(std::accumulate(set.labels.begin(), set.labels.end(), 0) == 1000);
    const double sd = std::sqrt(rho * (1 - rho) / 2000.0);
    CHECK(std::abs(agreement(set) - rho) <= 4 * sd + 1e-12);
  }
}

TEST_CASE("pixels lie in [0,1] and generation is deterministic per seed") {
  const auto a = generate_dataset(small_spec(50, 0.7, 9));
  const auto b = generate_dataset(small_spec(50, 0.7, 9));
  const auto c = generate_dataset(small_spec(50, 0.7, 10));
  CHECK(a.images.minCoeff() >= 0.0f);
  CHECK(a.images.maxCoeff() <= 1.0f);
  CHECK(a.images == b.images);
  CHECK(a.labels == b.labels);
  CHECK(a.images != c.images);
}

TEST_CASE("confound statistic sign follows the tint") {
  auto spec = small_spec(200, 0.5, 2);
  spec.noise_std = 0.0;
  const auto set = generate_dataset(spec);
  const auto b = measure_confound_statistic(set.batch(0, set.size()), set.shape());
  for (Index i = 0; i < set.size(); ++i) {
    if (set.confounds[static_cast<std::size_t>(i)] == 1) CHECK(b[static_cast<std::size_t>(i)] > 0.05);
    else CHECK(b[static_cast<std::size_t>(i)] < -0.05);
  }
}

TEST_CASE("confound statistic on a hand-built image") {
  const ImageShape shape{3, 16, 16};
  std::vector<double> img(static_cast<std::size_t>(shape.size()), 0.0);
  for (Index p = 0; p < shape.plane(); ++p) {
    img[static_cast<std::size_t>(p)] = 0.8;                      // red
    img[static_cast<std::size_t>(2 * shape.plane() + p)] = 0.3;  // blue
  }
  CHECK(confound_statistic(img, shape) == doctest::Approx(0.5));
}

TEST_CASE("bias splits use complementary correlations and distinct seeds") {
  const auto pair = make_bias_splits(small_spec(1000, 0.5, 1), 0.9);
  CHECK(pair.split_a.spec.confound_correlation == 0.9);
  CHECK(pair.split_b.spec.confound_correlation == doctest::Approx(0.1));
  CHECK(agreement(pair.split_a) > 0.85);
  CHECK(agreement(pair.split_b) < 0.15);
  CHECK(pair.split_a.spec.seed != pair.split_b.spec.seed);
  CHECK_THROWS_AS(make_bias_splits(small_spec(10, 0.5, 1), 1.5), ValidationError);
}

TEST_CASE("save and load round trip") {
  TempDir dir("datagen");
  const auto set = generate_dataset(small_spec(20, 0.8, 3));
  save_dataset(dir.path() / "d", set);
  const auto back = load_dataset(dir.path() / "d");
  CHECK(back.images == set.images);
  CHECK(back.labels == set.labels);
  CHECK(back.confounds == set.confounds);
  CHECK(back.spec.confound_correlation == set.spec.confound_correlation);
}

TEST_CASE("invalid specs name the offending field") {
  auto check_field = [](DatasetSpec s, const std::string& field) {
    try {
      s.validate();
      FAIL("expected a validation error");
    } catch (const ValidationError& e) {
      CHECK(e.field() == field);
    }
  };
  auto s = small_spec(10, 0.5, 0);
  s.n_samples = 0;
  check_field(s, "n_samples");
  s = small_spec(10, 1.2, 0);
  check_field(s, "confound_correlation");
  s = small_spec(10, 0.5, 0);
  s.label_balance = 1.0;
  check_field(s, "label_balance");
  s = small_spec(10, 0.5, 0);
  s.image_shape = {1, 16, 16};
  check_field(s, "image_shape.channels");
}

}
