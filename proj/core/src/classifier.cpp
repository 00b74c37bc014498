#include "latent_lens/classifier.hpp"

#include "latent_lens/dvae.hpp"
#include "latent_lens/error.hpp"
#include "latent_lens/io/model_io.hpp"
#include "latent_lens/nn/adam.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace latent_lens::classifier {
namespace {

using nlohmann::json;

constexpr double kProbFloor = 1e-12;
constexpr Index kInferenceChunk = 256;

// Mean of log(1 + exp(-s * z)) with s = 2y - 1, evaluated stably.
double bce_with_logits(double logit, int label) {
  const double z = label == 1 ? logit : -logit;
  return z >= 0.0 ? std::log1p(std::exp(-z)) : -z + std::log1p(std::exp(z));
}

}  // namespace

void ClassifierConfig::validate() const {
  if (input_shape.channels <= 0 || input_shape.height <= 0 || input_shape.width <= 0) {
    throw ValidationError("input_shape", "extents must be positive");
  }
  for (const auto& c : conv_layers) {
    if (c.out_channels <= 0 || c.kernel <= 0 || c.stride <= 0) {
      throw ValidationError("conv_layers", "channels, kernel and stride must be positive");
    }
  }
  if (fc_widths.empty()) {
    throw ValidationError("fc_widths", "at least one fully connected layer is required");
  }
  if (std::any_of(fc_widths.begin(), fc_widths.end(), [](int w) { return w <= 0; })) {
    throw ValidationError("fc_widths", "widths must be positive");
  }
  if (repr_layer < -1 || repr_layer >= static_cast<int>(fc_widths.size())) {
    throw ValidationError("repr_layer", "must index fc_widths or be -1");
  }
  if (repr_dim() < 8) throw ValidationError("fc_widths", "representation width d must be >= 8");
  if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) {
    throw ValidationError("dropout_rate", "must lie in [0, 1)");
  }
  if (epochs <= 0) throw ValidationError("epochs", "must be positive");
  if (batch_size <= 0) throw ValidationError("batch_size", "must be positive");
  if (!(learning_rate > 0.0)) throw ValidationError("learning_rate", "must be positive");
}

int ClassifierConfig::repr_index() const {
  return repr_layer < 0 ? static_cast<int>(fc_widths.size()) - 1 : repr_layer;
}

void to_json(json& j, const ClassifierConfig& c) {
  json convs = json::array();
  for (const auto& cv : c.conv_layers) convs.push_back({cv.out_channels, cv.kernel, cv.stride});
  j = json{{"input_shape", {c.input_shape.channels, c.input_shape.height, c.input_shape.width}},
           {"conv_layers", convs},
           {"fc_widths", c.fc_widths},
           {"repr_layer", c.repr_layer},
           {"repr_post_activation", c.repr_post_activation},
           {"dropout_rate", c.dropout_rate},
           {"epochs", c.epochs},
           {"batch_size", c.batch_size},
           {"learning_rate", c.learning_rate},
           {"seed", c.seed}};
}

void from_json(const json& j, ClassifierConfig& c) {
  ClassifierConfig d;
  if (j.contains("input_shape")) {
    const auto& s = j.at("input_shape");
    d.input_shape = {s.at(0).get<int>(), s.at(1).get<int>(), s.at(2).get<int>()};
  }
  if (j.contains("conv_layers")) {
    d.conv_layers.clear();
    for (const auto& cv : j.at("conv_layers")) {
      d.conv_layers.push_back({cv.at(0).get<int>(), cv.at(1).get<int>(), cv.at(2).get<int>()});
    }
  }
  d.fc_widths = j.value("fc_widths", d.fc_widths);
  d.repr_layer = j.value("repr_layer", d.repr_layer);
  d.repr_post_activation = j.value("repr_post_activation", d.repr_post_activation);
  d.dropout_rate = j.value("dropout_rate", d.dropout_rate);
  d.epochs = j.value("epochs", d.epochs);
  d.batch_size = j.value("batch_size", d.batch_size);
  d.learning_rate = j.value("learning_rate", d.learning_rate);
  d.seed = j.value("seed", d.seed);
  c = d;
}

void to_json(json& j, const EpochLog& e) {
  j = json{{"epoch", e.epoch}, {"loss", e.loss}, {"val_accuracy", e.val_accuracy}};
}

void from_json(const json& j, EpochLog& e) {
  e.epoch = j.at("epoch").get<int>();
  e.loss = j.at("loss").get<double>();
  e.val_accuracy = j.at("val_accuracy").get<double>();
}

void to_json(json& j, const FidelityReport& r) {
  j = json{{"acc_phi", r.acc_phi},
           {"acc_phi_prime", r.acc_phi_prime},
           {"agreement", r.agreement},
           {"n_samples", r.n_samples}};
}

ClassifierNetworks build_networks(const ClassifierConfig& config, Rng& init_rng) {
  config.validate();
  ClassifierNetworks nets;
  int channels = config.input_shape.channels;
  int height = config.input_shape.height;
  int width = config.input_shape.width;
  for (const auto& cv : config.conv_layers) {
    nn::ConvGeometry g{channels, height, width, cv.out_channels, cv.kernel, cv.stride,
                       cv.kernel / 2};
    auto& conv = nets.backbone.add<nn::Conv2d>(g);
    nets.backbone.add<nn::ReLU>(conv.output_size());
    channels = g.out_channels;
    height = g.out_height();
    width = g.out_width();
  }
  Index features = Index{channels} * height * width;
  const int repr = config.repr_index();
  nn::Sequential* target = &nets.backbone;
  for (int k = 0; k < static_cast<int>(config.fc_widths.size()); ++k) {
    const Index w = config.fc_widths[static_cast<std::size_t>(k)];
    target->add<nn::Linear>(features, w);
    if (k == repr) {
      if (config.repr_post_activation) {
        nets.backbone.add<nn::ReLU>(w);
        nets.head.add<nn::Dropout>(w, config.dropout_rate);
      } else {
        nets.head.add<nn::ReLU>(w);
        nets.head.add<nn::Dropout>(w, config.dropout_rate);
      }
      target = &nets.head;
    } else {
      target->add<nn::ReLU>(w);
      target->add<nn::Dropout>(w, config.dropout_rate);
    }
    features = w;
  }
  nets.head.add<nn::Linear>(features, 1);
  nets.backbone.initialize(init_rng);
  nets.head.initialize(init_rng);
  return nets;
}

double classifier_loss(const ClassifierNetworks& nets, const Matrix& images,
                       std::span<const int> labels, nn::Mode mode, Rng* dropout_rng,
                       nn::Gradients* backbone_grads, nn::Gradients* head_grads) {
  if (static_cast<std::size_t>(images.cols()) != labels.size()) {
    throw ShapeError("classifier_loss: batch and label counts differ");
  }
  const nn::ForwardContext ctx{mode, dropout_rng};
  nn::Sequential::Tape bt;
  nn::Sequential::Tape ht;
  const Matrix repr = nets.backbone.forward(images, bt, ctx);
  const Matrix logits = nets.head.forward(repr, ht, ctx);
  const auto batch = static_cast<double>(labels.size());
  double loss = 0.0;
  Matrix dlogits(1, logits.cols());
  for (Index i = 0; i < logits.cols(); ++i) {
    const int y = labels[static_cast<std::size_t>(i)];
    loss += bce_with_logits(logits(0, i), y);
    dlogits(0, i) = (nn::sigmoid(logits(0, i)) - y) / batch;
  }
  if (backbone_grads != nullptr && head_grads != nullptr) {
    const Matrix drepr = nets.head.backward(ht, dlogits, *head_grads, true);
    nets.backbone.backward(bt, drepr, *backbone_grads);
  }
  return loss / batch;
}

TrainedClassifier::TrainedClassifier(ClassifierConfig config, ClassifierNetworks nets,
                                     std::vector<EpochLog> log)
    : config_(std::move(config)), nets_(std::move(nets)), log_(std::move(log)) {
  if (nets_.backbone.output_size() != nets_.head.input_size()) {
    throw ShapeError("classifier backbone and head disagree on the representation width");
  }
}

Matrix TrainedClassifier::hidden_repr(const Matrix& images) const {
  if (images.rows() != config_.input_shape.size()) {
    throw ShapeError("hidden_repr: expected images of " + config_.input_shape.str());
  }
  return nets_.backbone.forward(images);
}

Vector TrainedClassifier::head_logits(const Matrix& repr) const {
  if (repr.rows() != repr_dim()) {
    throw ShapeError("head: expected representation width " + std::to_string(repr_dim()));
  }
  if (!repr.allFinite()) throw ValidationError("repr", "contains non-finite values");
  return nets_.head.forward(repr).row(0).transpose();
}

Vector TrainedClassifier::head_predict(const Matrix& repr) const {
  return head_logits(repr).unaryExpr(
      [](double z) { return std::clamp(nn::sigmoid(z), kProbFloor, 1.0 - kProbFloor); });
}

nn::Sequential TrainedClassifier::probability_head() const {
  nn::Sequential net = nets_.head;
  net.add<nn::Sigmoid>(net.output_size());
  return net;
}

Vector TrainedClassifier::predict(const Matrix& images) const {
  return head_predict(hidden_repr(images));
}

std::string TrainedClassifier::checksum() const {
  return io::parameter_checksum({{"backbone", &nets_.backbone}, {"head", &nets_.head}});
}

void TrainedClassifier::save(const std::filesystem::path& dir) const {
  io::save_model(dir, "classifier", config_,
                 {{"backbone", &nets_.backbone}, {"head", &nets_.head}},
                 json{{"training_log", log_}});
}

TrainedClassifier TrainedClassifier::load(const std::filesystem::path& dir) {
  auto art = io::load_model(dir, "classifier");
  auto config = art.config.get<ClassifierConfig>();
  ClassifierNetworks nets{art.network("backbone"), art.network("head")};
  auto log = art.extra.value("training_log", json::array()).get<std::vector<EpochLog>>();
  TrainedClassifier clf(std::move(config), std::move(nets), std::move(log));
  if (clf.nets_.backbone.input_size() != clf.config_.input_shape.size()) {
    throw ArtifactError(dir.string() + ": backbone input disagrees with configured image shape");
  }
  return clf;
}

double accuracy(const Vector& probs, std::span<const int> labels) {
  if (static_cast<std::size_t>(probs.size()) != labels.size()) {
    throw ShapeError("accuracy: prediction and label counts differ");
  }
  if (labels.empty()) return 0.0;
  long hits = 0;
  for (Index i = 0; i < probs.size(); ++i) {
    hits += predicted_class(probs(i)) == labels[static_cast<std::size_t>(i)];
  }
  return static_cast<double>(hits) / static_cast<double>(labels.size());
}

Matrix hidden_repr_all(const TrainedClassifier& clf, const datagen::LabeledImageSet& set) {
  Matrix out(clf.repr_dim(), set.size());
  for (Index start = 0; start < set.size(); start += kInferenceChunk) {
    const Index count = std::min(kInferenceChunk, set.size() - start);
    out.middleCols(start, count) = clf.hidden_repr(set.batch(start, count));
  }
  return out;
}

Matrix hidden_repr_each(const TrainedClassifier& clf, const datagen::LabeledImageSet& set) {
  Matrix out(clf.repr_dim(), set.size());
  for (Index i = 0; i < set.size(); ++i) out.col(i) = clf.hidden_repr(set.batch(i, 1));
  return out;
}

namespace {

Vector predict_all(const TrainedClassifier& clf, const datagen::LabeledImageSet& set) {
  return clf.head_predict(hidden_repr_all(clf, set));
}

}  // namespace

TrainedClassifier train_classifier(const ClassifierConfig& config,
                                   const datagen::LabeledImageSet& train,
                                   const datagen::LabeledImageSet& val,
                                   const EpochCallback& on_epoch) {
  config.validate();
  if (train.size() == 0 || val.size() == 0) {
    throw ValidationError("dataset", "training and validation sets must be nonempty");
  }
  if (train.shape() != config.input_shape || val.shape() != config.input_shape) {
    throw ShapeError("train_classifier: dataset image shape differs from configuration");
  }
  Rng init_rng = make_rng(config.seed, "classifier/init");
  Rng shuffle_rng = make_rng(config.seed, "classifier/shuffle");
  Rng dropout_rng = make_rng(config.seed, "classifier/dropout");

  ClassifierNetworks nets = build_networks(config, init_rng);
  std::vector<Matrix*> params = nets.backbone.parameters();
  for (auto* p : nets.head.parameters()) params.push_back(p);
  nn::Adam adam(params, {config.learning_rate});

  std::vector<Index> order(static_cast<std::size_t>(train.size()));
  std::iota(order.begin(), order.end(), Index{0});
  std::vector<EpochLog> log;
  std::vector<int> labels;
  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double loss_sum = 0.0;
    for (std::size_t start = 0; start < order.size();
         start += static_cast<std::size_t>(config.batch_size)) {
      const std::size_t count =
          std::min(order.size() - start, static_cast<std::size_t>(config.batch_size));
      const std::span<const Index> idx(order.data() + start, count);
      labels.clear();
      for (Index i : idx) labels.push_back(train.labels[static_cast<std::size_t>(i)]);
      auto gb = nets.backbone.zero_gradients();
      auto gh = nets.head.zero_gradients();
      const double loss = classifier_loss(nets, train.batch(idx), labels, nn::Mode::training,
                                          &dropout_rng, &gb, &gh);
      if (!std::isfinite(loss)) throw TrainingError("classifier", epoch, "non-finite loss");
      loss_sum += loss * static_cast<double>(count);
      gb.insert(gb.end(), std::make_move_iterator(gh.begin()), std::make_move_iterator(gh.end()));
      adam.step(gb);
    }
    EpochLog entry{epoch, loss_sum / static_cast<double>(order.size()), 0.0};
    TrainedClassifier snapshot(config, nets, {});
    entry.val_accuracy = accuracy(predict_all(snapshot, val), val.labels);
    log.push_back(entry);
    if (on_epoch) on_epoch(entry);
  }
  return TrainedClassifier(config, std::move(nets), std::move(log));
}

namespace {

// Power iteration for the largest singular value of a linear operator.
template <class Forward, class Adjoint>
double spectral_norm(Index in_size, Forward forward, Adjoint adjoint, int iterations) {
  Rng rng(0x5eed);
  std::normal_distribution<double> dist;
  Matrix v(in_size, 1);
  for (Index i = 0; i < in_size; ++i) v(i, 0) = dist(rng);
  v /= v.norm();
  double sigma = 0.0;
  for (int it = 0; it < iterations; ++it) {
    const Matrix u = forward(v);
    sigma = u.norm();
    if (sigma == 0.0) return 0.0;
    v = adjoint(u);
    v /= v.norm();
  }
  return sigma;
}

}  // namespace

double backbone_lipschitz_bound(const TrainedClassifier& clf, int iterations) {
  double bound = 1.0;
  const auto& bb = clf.networks().backbone;
  for (std::size_t k = 0; k < bb.size(); ++k) {
    const nn::Layer& layer = bb.layer(k);
    if (const auto* conv = dynamic_cast<const nn::Conv2d*>(&layer)) {
      bound *= spectral_norm(
          conv->input_size(), [&](const Matrix& x) { return conv->apply(x); },
          [&](const Matrix& y) { return conv->apply_adjoint(y); }, iterations);
    } else if (const auto* lin = dynamic_cast<const nn::Linear*>(&layer)) {
      bound *= spectral_norm(
          lin->input_size(), [&](const Matrix& x) { return Matrix(lin->weight() * x); },
          [&](const Matrix& y) { return Matrix(lin->weight().transpose() * y); }, iterations);
    }
  }
  return bound;
}

FidelityReport evaluate_fidelity(const TrainedClassifier& clf, const dvae::TrainedDVAE& model,
                                 const datagen::LabeledImageSet& dataset) {
  if (model.repr_dim() != clf.repr_dim()) {
    throw ShapeError("evaluate_fidelity: DVAE width " + std::to_string(model.repr_dim()) +
                     " differs from classifier representation width " +
                     std::to_string(clf.repr_dim()));
  }
  if (dataset.size() == 0) throw ValidationError("dataset", "must be nonempty");
  const Matrix phi = hidden_repr_each(clf, dataset);
  Vector p(phi.cols());
  Vector p_prime(phi.cols());
  for (Index i = 0; i < phi.cols(); ++i) {
    p(i) = clf.head_predict(phi.col(i))(0);
    p_prime(i) = clf.head_predict(model.reconstruct(phi.col(i)))(0);
  }
  FidelityReport r;
  r.n_samples = static_cast<long>(dataset.size());
  r.acc_phi = accuracy(p, dataset.labels);
  r.acc_phi_prime = accuracy(p_prime, dataset.labels);
  long agree = 0;
  for (Index i = 0; i < p.size(); ++i) agree += predicted_class(p(i)) == predicted_class(p_prime(i));
  r.agreement = static_cast<double>(agree) / static_cast<double>(p.size());
  return r;
}

}  // namespace latent_lens::classifier
