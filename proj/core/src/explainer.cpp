#include "latent_lens/explainer.hpp"

#include "latent_lens/error.hpp"
#include "latent_lens/io/model_io.hpp"
#include "latent_lens/io/png.hpp"
#include "latent_lens/nn/adam.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace latent_lens::explainer {

using nlohmann::json;

namespace {

constexpr double kRenderFloor = 1e-6;
constexpr Index kRenderChunk = 256;

// The head is frozen, so rescaling its information vector only rescales the
// penalty weight; dividing by the total keeps the dot product independent of
// how saturated the head is at the current centers.
Vector unit_sum(const Vector& v) {
  const double total = v.sum();
  return total > 0.0 ? Vector(v / total) : v;
}

}  // namespace

void GeneratorConfig::validate() const {
  if (output_shape.channels <= 0 || output_shape.height <= 0 || output_shape.width <= 0) {
    throw ValidationError("output_shape", "extents must be positive");
  }
  if (base_channels <= 0) throw ValidationError("base_channels", "must be positive");
  if (deconv_layers.empty()) throw ValidationError("deconv_layers", "need at least one layer");
  int h = output_shape.height;
  int w = output_shape.width;
  for (const auto& d : deconv_layers) {
    if (d.out_channels <= 0 || d.kernel <= 0 || d.stride <= 0) {
      throw ValidationError("deconv_layers", "channels, kernel and stride must be positive");
    }
    if (h % d.stride != 0 || w % d.stride != 0) {
      throw ValidationError("deconv_layers", "strides must divide the output extent");
    }
    h /= d.stride;
    w /= d.stride;
  }
  if (deconv_layers.back().out_channels != output_shape.channels) {
    throw ValidationError("deconv_layers", "last layer must emit the output channel count");
  }
  if (!(lambda >= 0.0)) throw ValidationError("lambda", "must be >= 0");
  if (!(clip_norm >= 0.0)) throw ValidationError("clip_norm", "must be >= 0");
  if (epochs <= 0) throw ValidationError("epochs", "must be positive");
  if (batch_size <= 0) throw ValidationError("batch_size", "must be positive");
  if (!(learning_rate > 0.0)) throw ValidationError("learning_rate", "must be positive");
  probe.validate();
  if (coords_per_step <= 0) throw ValidationError("coords_per_step", "must be positive");
  if (centers_per_step <= 0) throw ValidationError("centers_per_step", "must be positive");
  if (log_centers <= 0) throw ValidationError("log_centers", "must be positive");
  if (log_samples < 2) throw ValidationError("log_samples", "must be >= 2");
}

void to_json(json& j, const GeneratorConfig& c) {
  json deconvs = json::array();
  for (const auto& d : c.deconv_layers) deconvs.push_back({d.out_channels, d.kernel, d.stride});
  j = json{{"output_shape", {c.output_shape.channels, c.output_shape.height, c.output_shape.width}},
           {"base_channels", c.base_channels},
           {"deconv_layers", deconvs},
           {"lambda", c.lambda},
           {"calibrate_lambda", c.calibrate_lambda},
           {"clip_norm", c.clip_norm},
           {"epochs", c.epochs},
           {"batch_size", c.batch_size},
           {"learning_rate", c.learning_rate},
           {"seed", c.seed},
           {"probe", c.probe},
           {"coords_per_step", c.coords_per_step},
           {"centers_per_step", c.centers_per_step},
           {"log_centers", c.log_centers},
           {"log_samples", c.log_samples}};
}

void from_json(const json& j, GeneratorConfig& c) {
  GeneratorConfig d;
  if (j.contains("output_shape")) {
    const auto& s = j.at("output_shape");
    d.output_shape = {s.at(0).get<int>(), s.at(1).get<int>(), s.at(2).get<int>()};
  }
  d.base_channels = j.value("base_channels", d.base_channels);
  if (j.contains("deconv_layers")) {
    d.deconv_layers.clear();
    for (const auto& v : j.at("deconv_layers")) {
      d.deconv_layers.push_back({v.at(0).get<int>(), v.at(1).get<int>(), v.at(2).get<int>()});
    }
  }
  d.lambda = j.value("lambda", d.lambda);
  d.calibrate_lambda = j.value("calibrate_lambda", d.calibrate_lambda);
  d.clip_norm = j.value("clip_norm", d.clip_norm);
  d.epochs = j.value("epochs", d.epochs);
  d.batch_size = j.value("batch_size", d.batch_size);
  d.learning_rate = j.value("learning_rate", d.learning_rate);
  d.seed = j.value("seed", d.seed);
  if (j.contains("probe")) d.probe = j.at("probe").get<infotheory::GaussianProbe>();
  d.coords_per_step = j.value("coords_per_step", d.coords_per_step);
  d.centers_per_step = j.value("centers_per_step", d.centers_per_step);
  d.log_centers = j.value("log_centers", d.log_centers);
  d.log_samples = j.value("log_samples", d.log_samples);
  c = d;
}

void to_json(json& j, const GeneratorEpochLog& e) {
  j = json{{"epoch", e.epoch},
           {"effective_lambda", e.effective_lambda},
           {"recon", e.recon},
           {"train_penalty", e.train_penalty},
           {"penalty", e.penalty},
           {"info_alignment", e.info_alignment}};
}

void from_json(const json& j, GeneratorEpochLog& e) {
  e.epoch = j.at("epoch").get<int>();
  e.effective_lambda = j.at("effective_lambda").get<double>();
  e.recon = j.at("recon").get<double>();
  e.train_penalty = j.at("train_penalty").get<double>();
  e.penalty = j.at("penalty").get<double>();
  e.info_alignment = j.at("info_alignment").get<double>();
}

nn::Sequential build_generator(const GeneratorConfig& config, Index repr_dim, Rng& init_rng) {
  config.validate();
  int h = config.output_shape.height;
  int w = config.output_shape.width;
  for (const auto& d : config.deconv_layers) {
    h /= d.stride;
    w /= d.stride;
  }
  nn::Sequential net;
  int channels = config.base_channels;
  net.add<nn::Linear>(repr_dim, Index{channels} * h * w);
  net.add<nn::ReLU>(Index{channels} * h * w);
  for (std::size_t k = 0; k < config.deconv_layers.size(); ++k) {
    const auto& d = config.deconv_layers[k];
    // The mirror convolution maps our (larger) output grid back onto our input grid.
    const nn::ConvGeometry mirror{d.out_channels, h * d.stride, w * d.stride, channels,
                                  d.kernel,       d.stride,     d.kernel / 2};
    if (mirror.out_height() != h || mirror.out_width() != w) {
      throw ValidationError("deconv_layers", "kernel " + std::to_string(d.kernel) +
                                                 " with stride " + std::to_string(d.stride) +
                                                 " does not upsample exactly");
    }
    auto& layer = net.add<nn::ConvTranspose2d>(mirror);
    if (k + 1 < config.deconv_layers.size()) {
      net.add<nn::ReLU>(layer.output_size());
    } else {
      net.add<nn::Sigmoid>(layer.output_size());
    }
    channels = d.out_channels;
    h *= d.stride;
    w *= d.stride;
  }
  net.initialize(init_rng);
  return net;
}

double reconstruction_bce(const Matrix& renders, const Matrix& images) {
  if (renders.rows() != images.rows() || renders.cols() != images.cols()) {
    throw ShapeError("reconstruction_bce: shape mismatch");
  }
  const auto y = renders.array().max(kRenderFloor).min(1.0 - kRenderFloor);
  const auto x = images.array();
  return -(x * y.log() + (1.0 - x) * (1.0 - y).log()).mean();
}

TrainedGenerator::TrainedGenerator(GeneratorConfig config, nn::Sequential net,
                                   std::string classifier_checksum, std::string dvae_checksum,
                                   std::vector<GeneratorEpochLog> log)
    : config_(std::move(config)),
      net_(std::move(net)),
      classifier_checksum_(std::move(classifier_checksum)),
      dvae_checksum_(std::move(dvae_checksum)),
      log_(std::move(log)) {
  if (net_.output_size() != config_.output_shape.size()) {
    throw ShapeError("generator output does not match " + config_.output_shape.str());
  }
}

Vector TrainedGenerator::explain(const Vector& repr) const {
  if (repr.size() != repr_dim()) {
    throw ShapeError("explain: expected a representation of width " + std::to_string(repr_dim()));
  }
  return net_.forward(repr).col(0);
}

Matrix TrainedGenerator::render(const Matrix& reprs) const {
  if (reprs.rows() != repr_dim()) throw ShapeError("render: width mismatch");
  Matrix out(net_.output_size(), reprs.cols());
  for (Index first = 0; first < reprs.cols(); first += kRenderChunk) {
    const Index count = std::min(kRenderChunk, reprs.cols() - first);
    out.middleCols(first, count) = net_.forward(reprs.middleCols(first, count));
  }
  return out;
}

std::string TrainedGenerator::checksum() const {
  return io::parameter_checksum({{"generator", &net_}});
}

void TrainedGenerator::save(const std::filesystem::path& dir) const {
  io::save_model(dir, "generator", config_, {{"generator", &net_}},
                 json{{"classifier_checksum", classifier_checksum_},
                      {"dvae_checksum", dvae_checksum_},
                      {"repr_dim", repr_dim()},
                      {"training_log", log_}});
}

TrainedGenerator TrainedGenerator::load(const std::filesystem::path& dir,
                                        const std::optional<std::string>& expected_dvae_checksum) {
  auto art = io::load_model(dir, "generator");
  const auto dvae_sum = art.extra.at("dvae_checksum").get<std::string>();
  if (expected_dvae_checksum && *expected_dvae_checksum != dvae_sum) {
    throw ArtifactError(dir.string() + ": generator was trained against a different DVAE");
  }
  return TrainedGenerator(
      art.config.get<GeneratorConfig>(), art.network("generator"),
      art.extra.at("classifier_checksum").get<std::string>(), dvae_sum,
      art.extra.value("training_log", json::array()).get<std::vector<GeneratorEpochLog>>());
}

void to_json(json& j, const AlignmentReport& r) {
  j = json{{"info_g", r.info_g}, {"info_f", r.info_f}, {"alignment", r.alignment}};
}

AlignmentReport measure_alignment(const nn::Sequential& generator,
                                  const classifier::TrainedClassifier& clf, const Matrix& centers,
                                  const infotheory::GaussianProbe& probe) {
  const nn::Sequential head = clf.probability_head();
  AlignmentReport r;
  r.info_g = infotheory::layer_info(infotheory::NetworkSource(generator), centers, probe,
                                    "generator");
  r.info_f = infotheory::layer_info(infotheory::NetworkSource(head), centers, probe, "head");
  r.alignment = infotheory::info_alignment(r.info_g, r.info_f);
  return r;
}

TrainedGenerator train_generator(const GeneratorConfig& config,
                                 const classifier::TrainedClassifier& clf,
                                 const dvae::TrainedDVAE& dvae,
                                 const datagen::LabeledImageSet& dataset,
                                 const GeneratorEpochCallback& on_epoch) {
  config.validate();
  intervention::check_compatible(dvae, clf);
  if (dataset.size() == 0) throw ValidationError("dataset", "must be nonempty");
  if (dataset.shape() != config.output_shape) {
    throw ShapeError("train_generator: dataset images are " + dataset.shape().str() +
                     " but the generator emits " + config.output_shape.str());
  }
  const std::string clf_sum = clf.checksum();
  const std::string dvae_sum = dvae.checksum();

  const Matrix inputs = dvae.reconstruct(classifier::hidden_repr_all(clf, dataset));
  Rng init_rng = make_rng(config.seed, "generator/init");
  Rng shuffle_rng = make_rng(config.seed, "generator/shuffle");
  Rng penalty_rng = make_rng(config.seed, "generator/penalty");
  nn::Sequential net = build_generator(config, inputs.rows(), init_rng);
  nn::AdamConfig adam_cfg;
  adam_cfg.learning_rate = config.learning_rate;
  adam_cfg.clip_norm = config.clip_norm;
  nn::Adam adam(net.parameters(), adam_cfg);

  const nn::Sequential head = clf.probability_head();
  const infotheory::NetworkSource head_source(head);

  // Fixed diagnostic centers spread evenly over the dataset.
  const Index n_log = std::min<Index>(config.log_centers, dataset.size());
  Matrix log_centers(inputs.rows(), n_log);
  for (Index k = 0; k < n_log; ++k) log_centers.col(k) = inputs.col(k * dataset.size() / n_log);
  const infotheory::GaussianProbe log_probe{config.log_samples,
                                            derive_seed(config.seed, "generator/log_probe")};

  const auto diagnose = [&](GeneratorEpochLog& entry) {
    const auto diag = measure_alignment(net, clf, log_centers, log_probe);
    entry.penalty =
        infotheory::inverse_similarity_penalty(diag.info_g.values, unit_sum(diag.info_f.values));
    entry.info_alignment = diag.alignment;
  };

  // Epoch 0 records the untrained generator; its loss and penalty calibrate lambda.
  GeneratorEpochLog initial;
  diagnose(initial);
  for (Index first = 0; first < dataset.size(); first += kRenderChunk) {
    const Index count = std::min(kRenderChunk, dataset.size() - first);
    initial.recon += reconstruction_bce(net.forward(inputs.middleCols(first, count)),
                                        dataset.batch(first, count)) *
                     static_cast<double>(count);
  }
  initial.recon /= static_cast<double>(dataset.size());
  double lambda = config.lambda;
  if (config.calibrate_lambda && lambda > 0.0) {
    if (!(initial.penalty < 1.0 / infotheory::kDotGuard)) {
      throw TrainingError("generator", 0, "information dot product vanishes; cannot calibrate");
    }
    // The penalty term starts at lambda * initial.recon.
    lambda *= initial.recon / initial.penalty;
  }
  initial.effective_lambda = lambda;

  std::vector<Index> order(static_cast<std::size_t>(dataset.size()));
  std::iota(order.begin(), order.end(), Index{0});
  std::vector<GeneratorEpochLog> log{initial};
  if (on_epoch) on_epoch(initial);
  std::uint64_t step = 0;
  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    GeneratorEpochLog entry;
    entry.epoch = epoch;
    entry.effective_lambda = lambda;
    long penalty_steps = 0;
    for (std::size_t start = 0; start < order.size();
         start += static_cast<std::size_t>(config.batch_size)) {
      const std::size_t count =
          std::min(order.size() - start, static_cast<std::size_t>(config.batch_size));
      const std::span<const Index> idx(order.data() + start, count);
      const Matrix images = dataset.batch(idx);
      Matrix batch_inputs(inputs.rows(), static_cast<Index>(count));
      for (std::size_t k = 0; k < count; ++k) {
        batch_inputs.col(static_cast<Index>(k)) = inputs.col(idx[k]);
      }

      auto grads = net.zero_gradients();
      nn::Sequential::Tape tape;
      const Matrix renders = net.forward(batch_inputs, tape, {nn::Mode::training, nullptr});
      const double recon = reconstruction_bce(renders, images);
      if (!std::isfinite(recon)) {
        throw TrainingError("generator", epoch, "non-finite reconstruction loss");
      }
      const Matrix clamped = renders.cwiseMax(kRenderFloor).cwiseMin(1.0 - kRenderFloor);
      const double norm = static_cast<double>(renders.size());
      const Matrix dy =
          ((renders - images).array() / (clamped.array() * (1.0 - clamped.array())) / norm)
              .matrix();
      net.backward(tape, dy, grads);
      entry.recon += recon * static_cast<double>(count);

      if (lambda > 0.0) {
        const Index n_centers = std::min<Index>(config.centers_per_step, batch_inputs.cols());
        const Matrix centers = batch_inputs.leftCols(n_centers);
        const infotheory::GaussianProbe step_probe{config.probe.samples_per_coord,
                                                   derive_seed(config.probe.seed, step)};
        const Vector info_f =
            unit_sum(infotheory::layer_info(head_source, centers, step_probe, "head").values);
        if (info_f.sum() > 0.0) {
          const auto draws = infotheory::sampled_penalty_draws(
              info_f, config.coords_per_step, n_centers, config.probe.samples_per_coord,
              penalty_rng);
          const auto pv = infotheory::penalty_with_gradient(net, centers, info_f, draws,
                                                            lambda, &grads);
          entry.train_penalty += pv.penalty;
          ++penalty_steps;
        }
      }
      for (const auto& g : grads) {
        if (!g.allFinite()) throw TrainingError("generator", epoch, "non-finite gradient");
      }
      adam.step(grads);
      ++step;
    }
    entry.recon /= static_cast<double>(order.size());
    if (penalty_steps > 0) entry.train_penalty /= static_cast<double>(penalty_steps);
    diagnose(entry);
    log.push_back(entry);
    if (on_epoch) on_epoch(entry);
  }

  if (clf.checksum() != clf_sum || dvae.checksum() != dvae_sum) {
    throw ArtifactError("upstream model parameters changed during generator training");
  }
  return TrainedGenerator(config, std::move(net), clf_sum, dvae_sum, std::move(log));
}

void to_json(json& j, const ExplanationPanel& p) {
  j = json{{"sample_id", p.sample_id},
           {"label", p.label},
           {"confound", p.confound},
           {"p_original", p.p_original},
           {"p_counterfactual", p.p_counterfactual},
           {"prediction_changed", p.prediction_changed},
           {"mask", p.mask},
           {"bits", p.bits},
           {"bias_statistics",
            {{"original", p.b_original},
             {"factual", p.b_factual},
             {"counterfactual", p.b_counterfactual}}}};
}

ExplanationPanel concept_panel(const TrainedGenerator& gen, const dvae::TrainedDVAE& dvae,
                               const classifier::TrainedClassifier& clf, const Vector& image,
                               const intervention::InterventionMask& mask) {
  intervention::check_compatible(dvae, clf);
  if (gen.repr_dim() != dvae.repr_dim()) throw ShapeError("generator and DVAE widths differ");
  const ImageShape& shape = gen.output_shape();
  if (image.size() != shape.size()) throw ShapeError("concept_panel: image is not " + shape.str());
  ExplanationPanel p;
  p.original = image;
  p.bits = dvae.encode_hard(clf.hidden_repr(image).col(0)).bits;
  const auto rec = intervention::counterfactual(dvae, clf, p.bits, mask);
  p.mask = rec.mask;
  p.p_original = rec.p_original;
  p.p_counterfactual = rec.p_counterfactual;
  p.prediction_changed = rec.prediction_changed;
  p.factual_render = gen.explain(dvae.decode(std::span<const int>(p.bits)));
  p.counterfactual_render = gen.explain(rec.psi);
  const auto span_of = [](const Vector& v) { return std::span<const double>(v.data(), v.size()); };
  p.b_original = datagen::confound_statistic(span_of(p.original), shape);
  p.b_factual = datagen::confound_statistic(span_of(p.factual_render), shape);
  p.b_counterfactual = datagen::confound_statistic(span_of(p.counterfactual_render), shape);
  return p;
}

ExplanationPanel concept_panel(const TrainedGenerator& gen, const dvae::TrainedDVAE& dvae,
                               const classifier::TrainedClassifier& clf, const Vector& image,
                               intervention::Strategy strategy, std::optional<int> greedy_budget) {
  using intervention::InterventionMask;
  using intervention::Strategy;
  const Index n = dvae.n_bits();
  switch (strategy) {
    case Strategy::full_flip:
      return concept_panel(gen, dvae, clf, image, InterventionMask::full(n));
    case Strategy::greedy_minimal: {
      const auto bits = dvae.encode_hard(clf.hidden_repr(image).col(0)).bits;
      auto mask = intervention::greedy_minimal_flip(dvae, clf, bits,
                                                    greedy_budget.value_or(static_cast<int>(n)));
      return concept_panel(gen, dvae, clf, image,
                           mask.value_or(InterventionMask{{}, Strategy::greedy_minimal}));
    }
    case Strategy::single_bit: {
      // The bit whose flip moves the head probability the most.
      auto bits = dvae.encode_hard(clf.hidden_repr(image).col(0)).bits;
      const double p0 = intervention::head_probability(clf, dvae.decode(std::span<const int>(bits)));
      int best = 0;
      double best_delta = -1.0;
      for (int i = 0; i < static_cast<int>(n); ++i) {
        bits[static_cast<std::size_t>(i)] ^= 1;
        const double delta = std::abs(
            intervention::head_probability(clf, dvae.decode(std::span<const int>(bits))) - p0);
        bits[static_cast<std::size_t>(i)] ^= 1;
        if (delta > best_delta) {
          best = i;
          best_delta = delta;
        }
      }
      return concept_panel(gen, dvae, clf, image, InterventionMask::single(best, n));
    }
    case Strategy::custom:
      break;
  }
  throw ValidationError("strategy", "a custom strategy needs an explicit mask");
}

void write_panel_grid(const std::filesystem::path& png_path,
                      std::span<const ExplanationPanel> panels, const ImageShape& shape,
                      int scale) {
  if (panels.empty()) throw ValidationError("panels", "nothing to render");
  const auto span_of = [](const Vector& v) { return std::span<const double>(v.data(), v.size()); };
  std::vector<io::RgbImage> rows;
  rows.reserve(panels.size());
  for (const auto& p : panels) {
    rows.push_back(io::hstack({io::to_rgb(span_of(p.original), shape, scale),
                               io::to_rgb(span_of(p.factual_render), shape, scale),
                               io::to_rgb(span_of(p.counterfactual_render), shape, scale)}));
  }
  io::write_png(png_path, io::vstack(rows));
}

}  // namespace latent_lens::explainer
