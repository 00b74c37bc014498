#include "latent_lens/classifier.hpp"
#include "latent_lens/error.hpp"
#include "unit/support.hpp"

#include <doctest.h>

using namespace latent_lens;
using namespace latent_lens::classifier;
using test_support::relative_error;
using test_support::TempDir;

namespace {

ClassifierConfig small_config() {
  ClassifierConfig c;
  c.input_shape = {3, 16, 16};
  c.conv_layers = {{4, 3, 2}, {6, 3, 2}};
  c.fc_widths = {12, 8};
  c.epochs = 8;
  c.batch_size = 32;
  c.learning_rate = 3e-3;
  return c;
}

datagen::LabeledImageSet small_set(long n, std::uint64_t seed) {
  datagen::DatasetSpec s;
  s.image_shape = {3, 16, 16};
  s.n_samples = n;
  s.confound_correlation = 0.5;
  s.seed = seed;
  return datagen::generate_dataset(s);
}

}  // namespace

TEST_SUITE("classifier") {

TEST_CASE("loss gradient matches central differences with frozen dropout") {
  Rng init(3);
  auto cfg = small_config();
  auto nets = build_networks(cfg, init);
  const auto set = small_set(6, 1);
  const Matrix x = set.batch(0, 6);
  const Rng dropout_seed(77);

  auto loss = [&] {
    Rng r = dropout_seed;
    return classifier_loss(nets, x, set.labels, nn::Mode::training, &r);
  };
  auto bg = nets.backbone.zero_gradients();
  auto hg = nets.head.zero_gradients();
  Rng r = dropout_seed;
  classifier_loss(nets, x, set.labels, nn::Mode::training, &r, &bg, &hg);

  double worst = 0.0;
  auto sweep = [&](nn::Sequential& net, const nn::Gradients& g) {
    auto ps = net.parameters();
    for (std::size_t p = 0; p < ps.size(); ++p)
      for (Index i = 0; i < ps[p]->size(); i += std::max<Index>(1, ps[p]->size() / 15)) {
        const double fd = test_support::central_difference(loss, ps[p]->data()[i], 1e-5);
        if (std::abs(fd) + std::abs(g[p].data()[i]) < 1e-7) continue;
        worst = std::max(worst, relative_error(fd, g[p].data()[i], 1e-6));
      }
  };
  sweep(nets.backbone, bg);
  sweep(nets.head, hg);
  CHECK(worst <= 1e-3);
}

TEST_CASE("training separates the arc shape and the model round-trips") {
  TempDir dir("clf");
  const auto train = small_set(600, 2);
  const auto val = small_set(100, 3);
  int epochs_seen = 0;
  const auto clf = train_classifier(small_config(), train, val,
                                    [&](const EpochLog&) { ++epochs_seen; });
  CHECK(epochs_seen == 8);
  CHECK(clf.training_log().back().val_accuracy >= 0.9);
  CHECK(accuracy(clf.predict(val.batch(0, val.size())), val.labels) >= 0.9);

  clf.save(dir.path() / "m");
  const auto back = TrainedClassifier::load(dir.path() / "m");
  CHECK(back.checksum() == clf.checksum());
  CHECK(back.predict(val.batch(0, 5)) == clf.predict(val.batch(0, 5)));
  CHECK(back.config().fc_widths == clf.config().fc_widths);

  const Matrix each = hidden_repr_each(clf, val);
  const Matrix all = hidden_repr_all(clf, val);
  CHECK((each - all).cwiseAbs().maxCoeff() < 1e-9);
  for (Index i : {0, 17, 99}) CHECK(each.col(i) == clf.hidden_repr(val.batch(i, 1)).col(0));
  CHECK(each.minCoeff() >= 0.0);

  // The probability head agrees with head_predict.
  const Vector p = clf.head_predict(each.leftCols(4));
  const Matrix q = clf.probability_head().forward(each.leftCols(4));
  CHECK((p.transpose() - q).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("training is deterministic for a fixed seed") {
  const auto train = small_set(120, 5);
  const auto val = small_set(30, 6);
  auto cfg = small_config();
  cfg.epochs = 1;
  CHECK(train_classifier(cfg, train, val).checksum() == train_classifier(cfg, train, val).checksum());
  cfg.seed = 1;
  auto other = train_classifier(cfg, train, val).checksum();
  cfg.seed = 0;
  CHECK(other != train_classifier(cfg, train, val).checksum());
}

TEST_CASE("the Lipschitz bound dominates observed representation changes") {
  Rng init(8);
  const auto cfg = small_config();
  const TrainedClassifier clf(cfg, build_networks(cfg, init), {});
  const double bound = backbone_lipschitz_bound(clf);
  const auto set = small_set(40, 7);
  for (Index i = 0; i + 1 < set.size(); i += 2) {
    const Matrix a = set.batch(i, 1), b = set.batch(i + 1, 1);
    const double dphi = (clf.hidden_repr(a) - clf.hidden_repr(b)).norm();
    CHECK(dphi <= bound * (a - b).norm() * (1 + 1e-9));
  }
}

TEST_CASE("config validation and representation layer selection") {
  auto cfg = small_config();
  CHECK(cfg.repr_dim() == 8);
  cfg.repr_layer = 0;
  CHECK(cfg.repr_dim() == 12);
  cfg.repr_layer = 5;
  CHECK_THROWS_AS(cfg.validate(), ValidationError);
  cfg = small_config();
  cfg.dropout_rate = 1.0;
  CHECK_THROWS_AS(cfg.validate(), ValidationError);
  cfg = small_config();
  cfg.epochs = 0;
  CHECK_THROWS_AS(cfg.validate(), ValidationError);
  const auto j = nlohmann::json(small_config());
  const auto back = j.get<ClassifierConfig>();
  CHECK(nlohmann::json(back) == j);
}

}
