#include "latent_lens/dvae.hpp"

#include "latent_lens/error.hpp"
#include "latent_lens/io/model_io.hpp"
#include "latent_lens/nn/adam.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace latent_lens::dvae {
namespace {

using nlohmann::json;

constexpr double kPriorProb = 0.5;

double clamp_prob(double p) { return std::clamp(p, kProbClamp, 1.0 - kProbClamp); }

}  // namespace

void DVAEConfig::validate() const {
  if (n_bits < 2) throw ValidationError("n_bits", "must be >= 2");
  if (encoder_widths.size() != 4) {
    throw ValidationError("encoder_widths", "the encoder has exactly four linear layers");
  }
  if (std::any_of(encoder_widths.begin(), encoder_widths.end(), [](int w) { return w <= 0; })) {
    throw ValidationError("encoder_widths", "widths must be positive");
  }
  if (encoder_widths.back() != n_bits) {
    throw ValidationError("encoder_widths", "the last width must equal n_bits");
  }
  if (!(tau_end > 0.0)) throw ValidationError("tau_end", "must be positive");
  if (!(tau_start >= tau_end)) throw ValidationError("tau_start", "must be >= tau_end");
  if (anneal_epochs <= 0) throw ValidationError("anneal_epochs", "must be positive");
  if (!(kl_weight >= 0.0)) throw ValidationError("kl_weight", "must be >= 0");
  if (noise_samples <= 0) throw ValidationError("noise_samples", "must be positive");
  if (epochs <= 0) throw ValidationError("epochs", "must be positive");
  if (batch_size <= 0) throw ValidationError("batch_size", "must be positive");
  if (!(learning_rate > 0.0)) throw ValidationError("learning_rate", "must be positive");
}

double DVAEConfig::temperature(int epoch) const {
  const double frac =
      anneal_epochs <= 1
          ? 1.0
          : std::min(1.0, static_cast<double>(epoch - 1) / static_cast<double>(anneal_epochs - 1));
  return tau_start + (tau_end - tau_start) * frac;
}

void to_json(json& j, const DVAEConfig& c) {
  j = json{{"n_bits", c.n_bits},
           {"encoder_widths", c.encoder_widths},
           {"tau_start", c.tau_start},
           {"tau_end", c.tau_end},
           {"anneal_epochs", c.anneal_epochs},
           {"kl_weight", c.kl_weight},
           {"noise_samples", c.noise_samples},
           {"epochs", c.epochs},
           {"batch_size", c.batch_size},
           {"learning_rate", c.learning_rate},
           {"seed", c.seed}};
}

void from_json(const json& j, DVAEConfig& c) {
  DVAEConfig d;
  d.n_bits = j.value("n_bits", d.n_bits);
  if (j.contains("encoder_widths")) {
    d.encoder_widths = j.at("encoder_widths").get<std::vector<int>>();
  } else if (j.contains("n_bits")) {
    d.encoder_widths.back() = d.n_bits;
  }
  d.tau_start = j.value("tau_start", d.tau_start);
  d.tau_end = j.value("tau_end", d.tau_end);
  d.anneal_epochs = j.value("anneal_epochs", d.anneal_epochs);
  d.kl_weight = j.value("kl_weight", d.kl_weight);
  d.noise_samples = j.value("noise_samples", d.noise_samples);
  d.epochs = j.value("epochs", d.epochs);
  d.batch_size = j.value("batch_size", d.batch_size);
  d.learning_rate = j.value("learning_rate", d.learning_rate);
  d.seed = j.value("seed", d.seed);
  c = d;
}

void to_json(json& j, const DvaeEpochLog& e) {
  j = json{{"epoch", e.epoch}, {"tau", e.tau}, {"recon", e.recon}, {"kl", e.kl}};
}

void from_json(const json& j, DvaeEpochLog& e) {
  e.epoch = j.at("epoch").get<int>();
  e.tau = j.at("tau").get<double>();
  e.recon = j.at("recon").get<double>();
  e.kl = j.at("kl").get<double>();
}

double binary_concrete_sample(double logit, double tau, double u) {
  if (!(u > 0.0 && u < 1.0)) throw ValidationError("u", "uniform noise must lie in (0, 1)");
  if (!(tau > 0.0)) throw ValidationError("tau", "temperature must be positive");
  return nn::sigmoid((logit + std::log(u) - std::log1p(-u)) / tau);
}

Vector binary_concrete_sample(const Vector& logits, double tau, const Vector& u) {
  if (logits.size() != u.size()) throw ShapeError("binary_concrete_sample: size mismatch");
  Vector out(logits.size());
  for (Index i = 0; i < logits.size(); ++i) out(i) = binary_concrete_sample(logits(i), tau, u(i));
  return out;
}

double bernoulli_kl(const Vector& q_probs, double p_prob) {
  const double p = clamp_prob(p_prob);
  double kl = 0.0;
  for (Index i = 0; i < q_probs.size(); ++i) {
    const double q = clamp_prob(q_probs(i));
    kl += q * std::log(q / p) + (1.0 - q) * std::log((1.0 - q) / (1.0 - p));
  }
  return std::max(kl, 0.0);
}

DvaeNetworks build_dvae_networks(const DVAEConfig& config, Index repr_dim, Rng& init_rng) {
  config.validate();
  DvaeNetworks nets;
  Index in = repr_dim;
  for (std::size_t k = 0; k < config.encoder_widths.size(); ++k) {
    const Index w = config.encoder_widths[k];
    nets.encoder.add<nn::Linear>(in, w);
    if (k + 1 < config.encoder_widths.size()) nets.encoder.add<nn::ReLU>(w);
    in = w;
  }
  // Decoder: transposed widths n -> w3 -> w2 -> w1 -> d.
  std::vector<Index> widths(config.encoder_widths.rbegin(), config.encoder_widths.rend());
  widths.push_back(repr_dim);
  for (std::size_t k = 0; k + 1 < widths.size(); ++k) {
    nets.decoder.add<nn::Linear>(widths[k], widths[k + 1]);
    if (k + 2 < widths.size()) nets.decoder.add<nn::ReLU>(widths[k + 1]);
  }
  nets.encoder.initialize(init_rng);
  nets.decoder.initialize(init_rng);
  return nets;
}

Matrix draw_uniform_noise(Index n_bits, Index batch, int samples, Rng& rng) {
  std::uniform_real_distribution<double> dist(0.0, 1.0);
  Matrix u(n_bits, batch * samples);
  for (Index j = 0; j < u.cols(); ++j) {
    for (Index i = 0; i < n_bits; ++i) {
      double v = dist(rng);
      while (v <= 0.0 || v >= 1.0) v = dist(rng);
      u(i, j) = v;
    }
  }
  return u;
}

DvaeLoss dvae_loss(const DvaeNetworks& nets, const Matrix& phi, double tau, double beta,
                   const Matrix& noise_u, nn::Gradients* encoder_grads,
                   nn::Gradients* decoder_grads, Matrix* dlogits) {
  const Index batch = phi.cols();
  const Index n = nets.encoder.output_size();
  if (phi.rows() != nets.encoder.input_size()) throw ShapeError("dvae_loss: width mismatch");
  if (noise_u.rows() != n || batch == 0 || noise_u.cols() % batch != 0) {
    throw ShapeError("dvae_loss: noise must be n_bits x (batch * samples)");
  }
  if (!(tau > 0.0)) throw ValidationError("tau", "temperature must be positive");
  const Index samples = noise_u.cols() / batch;
  const bool want_grads = encoder_grads != nullptr && decoder_grads != nullptr;
  const nn::ForwardContext ctx{nn::Mode::training, nullptr};

  nn::Sequential::Tape enc_tape;
  const Matrix logits = nets.encoder.forward(phi, enc_tape, ctx);

  // Relaxed samples for all noise columns at once.
  Matrix z(n, batch * samples);
  for (Index s = 0; s < samples; ++s) {
    for (Index b = 0; b < batch; ++b) {
      for (Index i = 0; i < n; ++i) {
        const double u = noise_u(i, s * batch + b);
        if (!(u > 0.0 && u < 1.0)) throw ValidationError("u", "noise must lie in (0, 1)");
        z(i, s * batch + b) = nn::sigmoid((logits(i, b) + std::log(u) - std::log1p(-u)) / tau);
      }
    }
  }
  nn::Sequential::Tape dec_tape;
  const Matrix recon_phi = nets.decoder.forward(z, dec_tape, ctx);
  const Matrix target = phi.replicate(1, samples);
  const Matrix diff = recon_phi - target;
  const double norm = static_cast<double>(batch * samples);

  DvaeLoss loss;
  loss.recon = diff.squaredNorm() / norm;
  Matrix dl = Matrix::Zero(n, batch);
  for (Index b = 0; b < batch; ++b) {
    Vector q(n);
    for (Index i = 0; i < n; ++i) q(i) = nn::sigmoid(logits(i, b));
    loss.kl += bernoulli_kl(q, kPriorProb);
    for (Index i = 0; i < n; ++i) {
      const double qi = q(i);
      if (qi > kProbClamp && qi < 1.0 - kProbClamp) {
        // d/dlogit of q log(q/p) + (1-q) log((1-q)/(1-p)) = q(1-q)(logit(q) - logit(p)).
        dl(i, b) = beta * qi * (1.0 - qi) * logits(i, b) / static_cast<double>(batch);
      }
    }
  }
  loss.kl /= static_cast<double>(batch);
  loss.elbo_neg = loss.recon + beta * loss.kl;
  if (!std::isfinite(loss.elbo_neg)) return loss;

  if (want_grads || dlogits != nullptr) {
    nn::Gradients scratch;
    nn::Gradients* dec_g = decoder_grads;
    if (dec_g == nullptr) {
      scratch = nets.decoder.zero_gradients();
      dec_g = &scratch;
    }
    const Matrix dz = nets.decoder.backward(dec_tape, 2.0 * diff / norm, *dec_g, true);
    for (Index s = 0; s < samples; ++s) {
      for (Index b = 0; b < batch; ++b) {
        for (Index i = 0; i < n; ++i) {
          const double zi = z(i, s * batch + b);
          dl(i, b) += dz(i, s * batch + b) * zi * (1.0 - zi) / tau;
        }
      }
    }
    if (want_grads) nets.encoder.backward(enc_tape, dl, *encoder_grads);
    if (dlogits != nullptr) *dlogits = dl;
  }
  return loss;
}

TrainedDVAE::TrainedDVAE(DVAEConfig config, DvaeNetworks nets, std::string classifier_checksum,
                         std::vector<DvaeEpochLog> log)
    : config_(std::move(config)),
      nets_(std::move(nets)),
      classifier_checksum_(std::move(classifier_checksum)),
      log_(std::move(log)) {
  if (nets_.decoder.input_size() != nets_.encoder.output_size() ||
      nets_.decoder.output_size() != nets_.encoder.input_size()) {
    throw ShapeError("DVAE encoder and decoder widths disagree");
  }
}

Matrix TrainedDVAE::logits(const Matrix& phi) const {
  if (phi.rows() != repr_dim()) {
    throw ShapeError("dvae: expected representation width " + std::to_string(repr_dim()) +
                     ", got " + std::to_string(phi.rows()));
  }
  return nets_.encoder.forward(phi);
}

LatentCode TrainedDVAE::encode_hard(const Vector& phi) const {
  LatentCode code;
  code.logits = logits(phi).col(0);
  code.posterior_probs = code.logits.unaryExpr([](double l) { return nn::sigmoid(l); });
  code.bits.resize(static_cast<std::size_t>(code.logits.size()));
  for (Index i = 0; i < code.logits.size(); ++i) {
    code.bits[static_cast<std::size_t>(i)] = code.posterior_probs(i) >= 0.5 ? 1 : 0;
  }
  return code;
}

Matrix TrainedDVAE::encode_bits(const Matrix& phi) const {
  return logits(phi).unaryExpr([](double l) { return nn::sigmoid(l) >= 0.5 ? 1.0 : 0.0; });
}

Matrix TrainedDVAE::decode(const Matrix& codes) const {
  if (codes.rows() != n_bits()) {
    throw ShapeError("dvae: expected " + std::to_string(n_bits()) + " bits, got " +
                     std::to_string(codes.rows()));
  }
  return nets_.decoder.forward(codes);
}

Vector TrainedDVAE::decode(std::span<const int> bits) const {
  return decode(bits_to_matrix(bits)).col(0);
}

Matrix TrainedDVAE::reconstruct(const Matrix& phi) const { return decode(encode_bits(phi)); }

std::string TrainedDVAE::checksum() const {
  return io::parameter_checksum({{"encoder", &nets_.encoder}, {"decoder", &nets_.decoder}});
}

void TrainedDVAE::save(const std::filesystem::path& dir) const {
  json config = config_;
  config["repr_dim"] = repr_dim();
  io::save_model(dir, "dvae", config, {{"encoder", &nets_.encoder}, {"decoder", &nets_.decoder}},
                 json{{"classifier_checksum", classifier_checksum_},
                      {"n_bits", n_bits()},
                      {"repr_dim", repr_dim()},
                      {"training_log", log_}});
}

TrainedDVAE TrainedDVAE::load(const std::filesystem::path& dir,
                              const std::optional<std::string>& expected_classifier_checksum) {
  auto art = io::load_model(dir, "dvae");
  const auto clf_sum = art.extra.at("classifier_checksum").get<std::string>();
  if (expected_classifier_checksum && *expected_classifier_checksum != clf_sum) {
    throw ArtifactError(dir.string() + ": DVAE was trained against a different classifier");
  }
  auto log = art.extra.value("training_log", json::array()).get<std::vector<DvaeEpochLog>>();
  TrainedDVAE model(art.config.get<DVAEConfig>(),
                    DvaeNetworks{art.network("encoder"), art.network("decoder")}, clf_sum,
                    std::move(log));
  if (model.n_bits() != art.extra.at("n_bits").get<Index>() ||
      model.repr_dim() != art.extra.at("repr_dim").get<Index>()) {
    throw ArtifactError(dir.string() + ": manifest widths disagree with the networks");
  }
  return model;
}

Matrix bits_to_matrix(std::span<const int> bits) {
  Matrix m(static_cast<Index>(bits.size()), 1);
  for (std::size_t i = 0; i < bits.size(); ++i) m(static_cast<Index>(i), 0) = bits[i];
  return m;
}

TrainedDVAE train_dvae(const DVAEConfig& config, const Matrix& reprs,
                       std::string classifier_checksum, const DvaeEpochCallback& on_epoch) {
  config.validate();
  if (reprs.cols() == 0) throw ValidationError("reprs", "must be nonempty");
  if (!reprs.allFinite()) throw ValidationError("reprs", "contains non-finite values");
  Rng init_rng = make_rng(config.seed, "dvae/init");
  Rng shuffle_rng = make_rng(config.seed, "dvae/shuffle");
  Rng noise_rng = make_rng(config.seed, "dvae/noise");
  DvaeNetworks nets = build_dvae_networks(config, reprs.rows(), init_rng);
  std::vector<Matrix*> params = nets.encoder.parameters();
  for (auto* p : nets.decoder.parameters()) params.push_back(p);
  nn::Adam adam(params, {config.learning_rate});

  std::vector<Index> order(static_cast<std::size_t>(reprs.cols()));
  std::iota(order.begin(), order.end(), Index{0});
  std::vector<DvaeEpochLog> log;
  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    const double tau = config.temperature(epoch);
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    DvaeEpochLog entry{epoch, tau, 0.0, 0.0};
    for (std::size_t start = 0; start < order.size();
         start += static_cast<std::size_t>(config.batch_size)) {
      const std::size_t count =
          std::min(order.size() - start, static_cast<std::size_t>(config.batch_size));
      Matrix batch(reprs.rows(), static_cast<Index>(count));
      for (std::size_t k = 0; k < count; ++k) {
        batch.col(static_cast<Index>(k)) = reprs.col(order[start + k]);
      }
      const Matrix u = draw_uniform_noise(config.n_bits, batch.cols(), config.noise_samples,
                                          noise_rng);
      auto ge = nets.encoder.zero_gradients();
      auto gd = nets.decoder.zero_gradients();
      const DvaeLoss loss = dvae_loss(nets, batch, tau, config.kl_weight, u, &ge, &gd);
      if (!std::isfinite(loss.elbo_neg)) throw TrainingError("dvae", epoch, "non-finite loss");
      entry.recon += loss.recon * static_cast<double>(count);
      entry.kl += loss.kl * static_cast<double>(count);
      ge.insert(ge.end(), std::make_move_iterator(gd.begin()), std::make_move_iterator(gd.end()));
      adam.step(ge);
    }
    entry.recon /= static_cast<double>(order.size());
    entry.kl /= static_cast<double>(order.size());
    log.push_back(entry);
    if (on_epoch) on_epoch(entry);
  }
  return TrainedDVAE(config, std::move(nets), std::move(classifier_checksum), std::move(log));
}

}  // namespace latent_lens::dvae
