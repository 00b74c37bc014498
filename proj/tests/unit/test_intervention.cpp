#include "latent_lens/error.hpp"
#include "latent_lens/intervention.hpp"
#include "unit/support.hpp"

#include <doctest.h>

#include <random>

using namespace latent_lens;
using namespace latent_lens::intervention;
using test_support::TempDir;

namespace {

struct Models {
  datagen::LabeledImageSet val;
  classifier::TrainedClassifier clf;
  dvae::TrainedDVAE dvae;
};

const Models& models() {
  static const Models m = [] {
    const auto art = pipeline::artifact_layout(test_support::shared_tiny_run());
    auto clf = classifier::TrainedClassifier::load(art.classifier);
    auto dv = dvae::TrainedDVAE::load(art.dvae, clf.checksum());
    return Models{datagen::load_dataset(art.val_data), std::move(clf), std::move(dv)};
  }();
  return m;
}

std::vector<int> random_bits(Index n, Rng& rng) {
  std::bernoulli_distribution coin(0.5);
  std::vector<int> b(static_cast<std::size_t>(n));
  for (auto& v : b) v = coin(rng);
  return b;
}

InterventionMask random_mask(Index n, Rng& rng) {
  std::bernoulli_distribution coin(0.4);
  std::vector<int> idx;
  for (int i = 0; i < n; ++i)
    if (coin(rng)) idx.push_back(i);
  std::shuffle(idx.begin(), idx.end(), rng);
  return InterventionMask::make(idx, n);
}

}  // namespace

TEST_SUITE("intervention") {

TEST_CASE("mask construction sorts and rejects bad indices") {
  const auto m = InterventionMask::make({5, 1, 3}, 8);
  CHECK(m.flip_indices == std::vector<int>{1, 3, 5});
  CHECK(m.contains(3));
  CHECK_FALSE(m.contains(2));
  CHECK_THROWS_AS(InterventionMask::make({1, 1}, 8), ValidationError);
  CHECK_THROWS_AS(InterventionMask::make({8}, 8), ValidationError);
  CHECK_THROWS_AS(InterventionMask::make({-1}, 8), ValidationError);
  CHECK(InterventionMask::full(4).flip_indices == std::vector<int>{0, 1, 2, 3});
  CHECK(InterventionMask::full(4).strategy == Strategy::full_flip);
  CHECK(InterventionMask::single(2, 4).strategy == Strategy::single_bit);
  CHECK(InterventionMask::none().empty());
  InterventionMask unsorted{{3, 1}, Strategy::custom};
  CHECK_THROWS_AS(unsorted.validate(4), ValidationError);
  for (auto s : {Strategy::full_flip, Strategy::single_bit, Strategy::greedy_minimal, Strategy::custom})
    CHECK(strategy_from_string(to_string(s)) == s);
  CHECK_THROWS_AS(strategy_from_string("sideways"), ValidationError);
}

TEST_CASE("flip is an involution that touches exactly the mask (random cases)") {
  Rng rng(4);
  for (int trial = 0; trial < 200; ++trial) {
    const Index n = 1 + static_cast<Index>(rng() % 20);
    const auto bits = random_bits(n, rng);
    const auto mask = random_mask(n, rng);
    const auto once = flip(bits, mask);
    CHECK(flip(once, mask) == bits);
    for (int i = 0; i < n; ++i)
      CHECK((once[static_cast<std::size_t>(i)] != bits[static_cast<std::size_t>(i)]) == mask.contains(i));
  }
  CHECK(flip(std::vector<int>{1, 0}, InterventionMask::none()) == std::vector<int>{1, 0});
}

TEST_CASE("counterfactual records: no-op mask and full flip") {
  const auto& m = models();
  const Matrix reprs = classifier::hidden_repr_each(m.clf, m.val);
  const auto codes = encode_all(m.dvae, reprs);
  for (std::size_t i = 0; i < 5; ++i) {
    const auto none = counterfactual(m.dvae, m.clf, codes[i], InterventionMask::none());
    CHECK(none.psi == m.dvae.decode(codes[i]));
    CHECK(none.p_counterfactual == none.p_original);
    CHECK_FALSE(none.prediction_changed);
    CHECK(none.flipped_bits == codes[i]);

    const auto full = counterfactual(m.dvae, m.clf, codes[i], InterventionMask::full(m.dvae.n_bits()));
    CHECK(full.p_original == none.p_original);
    CHECK(full.prediction_changed ==
          (classifier::predicted_class(full.p_original) != classifier::predicted_class(full.p_counterfactual)));
    for (std::size_t b = 0; b < codes[i].size(); ++b) CHECK(full.flipped_bits[b] == 1 - codes[i][b]);
  }
  CHECK_THROWS_AS(counterfactual(m.dvae, m.clf, std::vector<int>{1, 0}, InterventionMask::none()),
                  ShapeError);
}

TEST_CASE("greedy masks always flip the prediction and respect the budget") {
  const auto& m = models();
  const Matrix reprs = classifier::hidden_repr_each(m.clf, m.val);
  const auto codes = encode_all(m.dvae, reprs);
  const int n = static_cast<int>(m.dvae.n_bits());
  long found = 0;
  for (const auto& bits : codes) {
    for (int budget : {1, 3, n}) {
      const auto mask = greedy_minimal_flip(m.dvae, m.clf, bits, budget);
      if (!mask) continue;
      CHECK(static_cast<int>(mask->flip_indices.size()) <= budget);
      CHECK(mask->strategy == Strategy::greedy_minimal);
      CHECK(counterfactual(m.dvae, m.clf, bits, *mask).prediction_changed);
      found += budget == n;
    }
  }
  CHECK(flip_rate(m.dvae, m.clf, reprs, Strategy::greedy_minimal) ==
        doctest::Approx(static_cast<double>(found) / static_cast<double>(codes.size())));
}

TEST_CASE("a constant decoder admits no counterfactual") {
  const auto& m = models();
  auto nets = m.dvae.networks();
  // Zero every weight of the decoder: its output no longer depends on the code.
  for (Matrix* p : nets.decoder.parameters()) p->setZero();
  const dvae::TrainedDVAE flat(m.dvae.config(), nets, m.clf.checksum(), {});
  const std::vector<int> bits(static_cast<std::size_t>(flat.n_bits()), 0);
  CHECK_FALSE(greedy_minimal_flip(flat, m.clf, bits, static_cast<int>(flat.n_bits())).has_value());
  const Matrix reprs = classifier::hidden_repr_each(m.clf, m.val);
  CHECK(flip_rate(flat, m.clf, reprs, Strategy::full_flip) == 0.0);
  CHECK((per_bit_effect(flat, m.clf, reprs).array() == 0.0).all());
}

TEST_CASE("flip rates and per-bit effects") {
  const auto& m = models();
  const Matrix reprs = classifier::hidden_repr_each(m.clf, m.val);
  const double r = flip_rate(m.dvae, m.clf, reprs, Strategy::full_flip);
  CHECK(r >= 0.0);
  CHECK(r <= 1.0);
  CHECK(flip_rate(m.dvae, m.clf, m.val, Strategy::full_flip) == r);
  CHECK_THROWS_AS(flip_rate(m.dvae, m.clf, Matrix(reprs.rows(), 0), Strategy::full_flip), ValidationError);
  const Vector e = per_bit_effect(m.dvae, m.clf, reprs);
  CHECK(e.size() == m.dvae.n_bits());
  CHECK(e.minCoeff() >= 0.0);
  CHECK(e.maxCoeff() <= 1.0);
}

TEST_CASE("records survive a JSON-lines round trip") {
  TempDir dir("jsonl");
  const auto& m = models();
  const Matrix reprs = classifier::hidden_repr_each(m.clf, m.val);
  const auto codes = encode_all(m.dvae, reprs.leftCols(3));
  std::vector<CounterfactualRecord> recs;
  for (std::size_t i = 0; i < codes.size(); ++i) {
    auto r = counterfactual(m.dvae, m.clf, codes[i], InterventionMask::make({0, 2}, m.dvae.n_bits()));
    r.sample_id = static_cast<long>(i);
    recs.push_back(r);
  }
  write_jsonl(dir.path() / "r.jsonl", recs);
  const auto back = read_jsonl(dir.path() / "r.jsonl");
  REQUIRE(back.size() == recs.size());
  for (std::size_t i = 0; i < recs.size(); ++i) {
    CHECK(back[i].sample_id == recs[i].sample_id);
    CHECK(back[i].psi == recs[i].psi);
    CHECK(back[i].p_counterfactual == recs[i].p_counterfactual);
    CHECK(back[i].mask.flip_indices == recs[i].mask.flip_indices);
    CHECK(back[i].flipped_bits == recs[i].flipped_bits);
  }
}

}
