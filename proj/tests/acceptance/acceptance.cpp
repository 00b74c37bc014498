// End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
// exits nonzero if any selected criterion fails.

#include "latent_lens/classifier.hpp"
#include "latent_lens/datagen.hpp"
#include "latent_lens/dvae.hpp"
#include "latent_lens/explainer.hpp"
#include "latent_lens/infotheory.hpp"
#include "latent_lens/io/model_io.hpp"
#include "latent_lens/pipeline.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iostream>
#include <random>
#include <set>
#include <sstream>

using namespace latent_lens;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

double relative_error(double a, double b, double floor = 1e-8) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

double central_difference(const std::function<double()>& f, double& ref, double h) {
  const double saved = ref;
  ref = saved + h;
  const double up = f();
  ref = saved - h;
  const double down = f();
  ref = saved;
  return (up - down) / (2.0 * h);
}

/// Worst relative error between analytic and central-difference gradients
/// over a random subset of each parameter tensor.
double worst_gradient_error(const std::vector<Matrix*>& params, const nn::Gradients& grads,
                            const std::function<double()>& loss, double h, int per_tensor, Rng& rng) {
  double worst = 0.0;
  for (std::size_t p = 0; p < params.size(); ++p) {
    std::uniform_int_distribution<Index> pick(0, params[p]->size() - 1);
    for (int k = 0; k < per_tensor; ++k) {
      const Index i = pick(rng);
      const double analytic = grads[p].data()[i];
      const double fd = central_difference(loss, params[p]->data()[i], h);
      if (std::abs(fd) + std::abs(analytic) < 1e-8) continue;
      worst = std::max(worst, relative_error(fd, analytic, 1e-6));
    }
  }
  return worst;
}

struct Outcome {
  int id;
  std::string name;
  bool pass;
  std::string detail;
};

std::string fmt(double v, int precision = 4) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(precision);
  os << v;
  return os.str();
}

Outcome fisher_oracle() {
  const auto t0 = Clock::now();
  const infotheory::ScalarFunction h = [](const Vector& z, Index i) {
    const double v = std::exp(z[i]);
    return std::pair{v, v};
  };
  const double expected = std::exp(0.5);
  bool ok = true;
  std::string detail;
  for (std::uint64_t seed : {0, 1, 2}) {
    const double est = infotheory::coordinate_info(h, Vector::Zero(4), 2, {10000, seed});
    ok = ok && relative_error(est, expected) <= 0.05;
    detail += "seed " + std::to_string(seed) + " " + fmt(est) + "; ";
  }
  const infotheory::ScalarFunction constant = [](const Vector&, Index) { return std::pair{0.7, 0.0}; };
  const double zero = infotheory::coordinate_info(constant, Vector::Zero(4), 2, {10000, 0});
  const double elapsed = seconds_since(t0);
  ok = ok && zero == 0.0 && elapsed < 10.0;
  return {1, "analytic Fisher oracle",
          ok, detail + "target " + fmt(expected) + " within 5%, constant " + fmt(zero) + ", " + fmt(elapsed, 2) + " s"};
}

Outcome kl_oracle() {
  Vector q(1);
  q << 0.9;
  const double got = dvae::bernoulli_kl(q, 0.5);
  const double analytic = 0.9 * std::log(0.9 / 0.5) + 0.1 * std::log(0.1 / 0.5);
  bool same_zero = true;
  for (double p : {0.5, 0.2, 0.9}) same_zero = same_zero && dvae::bernoulli_kl(Vector::Constant(8, p), p) == 0.0;
  const bool ok = std::abs(got - analytic) <= 1e-6 && std::abs(got - 0.3681) <= 1e-4 && same_zero;
  return {2, "Bernoulli KL oracle", ok,
          "KL(0.9||0.5) " + fmt(got, 8) + " vs " + fmt(analytic, 8) + ", KL(q||q)=0 " + (same_zero ? "yes" : "no")};
}

Outcome gradient_checks() {
  const auto t0 = Clock::now();
  const pipeline::RunConfig defaults;
  Rng rng(2024);

  // Classifier loss with frozen dropout.
  auto nets = classifier::build_networks(defaults.classifier, rng);
  datagen::DatasetSpec spec = defaults.dataset;
  spec.n_samples = 4;
  const auto set = datagen::generate_dataset(spec);
  const Matrix x = set.batch(0, 4);
  const Rng dropout(91);
  auto clf_loss = [&] {
    Rng r = dropout;
    return classifier::classifier_loss(nets, x, set.labels, nn::Mode::training, &r);
  };
  auto bg = nets.backbone.zero_gradients();
  auto hg = nets.head.zero_gradients();
  {
    Rng r = dropout;
    classifier::classifier_loss(nets, x, set.labels, nn::Mode::training, &r, &bg, &hg);
  }
  const double clf_err = std::max(worst_gradient_error(nets.backbone.parameters(), bg, clf_loss, 1e-5, 12, rng),
                                  worst_gradient_error(nets.head.parameters(), hg, clf_loss, 1e-5, 12, rng));

  // DVAE relaxed path with frozen logistic noise.
  const Index repr_dim = defaults.classifier.fc_widths.back();
  auto dv = dvae::build_dvae_networks(defaults.dvae, repr_dim, rng);
  Matrix phi(repr_dim, 6);
  std::gamma_distribution<double> pos(2.0, 0.5);
  for (Index i = 0; i < phi.size(); ++i) phi.data()[i] = pos(rng);
  const Matrix noise = dvae::draw_uniform_noise(defaults.dvae.n_bits, 6, 1, rng);
  auto dvae_loss = [&] { return dvae::dvae_loss(dv, phi, 0.8, 1.0, noise).elbo_neg; };
  auto eg = dv.encoder.zero_gradients();
  auto dg = dv.decoder.zero_gradients();
  dvae::dvae_loss(dv, phi, 0.8, 1.0, noise, &eg, &dg);
  const double dvae_err = std::max(worst_gradient_error(dv.encoder.parameters(), eg, dvae_loss, 1e-6, 12, rng),
                                   worst_gradient_error(dv.decoder.parameters(), dg, dvae_loss, 1e-6, 12, rng));

  // Inverse similarity penalty: closed form in I_g, then through the generator.
  Vector g(repr_dim), f(repr_dim);
  std::uniform_real_distribution<double> u(0.01, 1.0);
  for (Index i = 0; i < repr_dim; ++i) {
    g[i] = u(rng);
    f[i] = u(rng);
  }
  const Vector closed = infotheory::inverse_similarity_penalty_grad(g, f);
  double pen_err = 0.0;
  for (Index i = 0; i < repr_dim; ++i) {
    auto fn = [&] { return infotheory::inverse_similarity_penalty(g, f); };
    pen_err = std::max(pen_err, relative_error(central_difference(fn, g[i], 1e-6), closed[i], 1e-6));
  }
  auto gen = explainer::build_generator(defaults.generator, repr_dim, rng);
  Matrix centers(repr_dim, 1);
  for (Index i = 0; i < repr_dim; ++i) centers(i, 0) = pos(rng);
  const auto draws = infotheory::sampled_penalty_draws(f / f.sum(), 4, 1, 4, rng);
  auto gg = gen.zero_gradients();
  infotheory::penalty_with_gradient(gen, centers, f / f.sum(), draws, 1.0, &gg);
  auto pen_loss = [&] { return infotheory::penalty_with_gradient(gen, centers, f / f.sum(), draws).penalty; };
  pen_err = std::max(pen_err, worst_gradient_error(gen.parameters(), gg, pen_loss, 1e-6, 6, rng));

  const double elapsed = seconds_since(t0);
  const bool ok = clf_err <= 1e-3 && dvae_err <= 1e-3 && pen_err <= 1e-2 && elapsed < 120.0;
  return {3, "gradient checks", ok,
          "classifier " + fmt(clf_err, 6) + " (<=1e-3), dvae " + fmt(dvae_err, 6) + " (<=1e-3), penalty " +
              fmt(pen_err, 6) + " (<=1e-2), " + fmt(elapsed, 1) + " s"};
}

struct SeedRun {
  std::uint64_t seed;
  pipeline::RunArtifacts art;
  json metrics;
  double seconds;
};

std::vector<SeedRun> default_runs(const fs::path& root, bool verbose) {
  std::vector<SeedRun> runs;
  for (std::uint64_t s : {0, 1, 2}) {
    pipeline::RunConfig c;
    c.seed = s;
    c.ablation = true;
    c.output_dir = root / ("seed_" + std::to_string(s));
    const auto t0 = Clock::now();
    auto art = pipeline::run_pipeline(c, [&](const std::string& m) {
      if (verbose) std::cerr << "[seed " << s << "] " << m << "\n";
    });
    const double secs = seconds_since(t0);
    runs.push_back({s, art, io::read_json(art.metrics), secs});
    std::cerr << "default run seed " << s << " finished in " << fmt(secs, 1) << " s\n";
  }
  return runs;
}

Outcome fidelity(const std::vector<SeedRun>& runs) {
  bool ok = true;
  std::string detail;
  for (const auto& r : runs) {
    const json& f = r.metrics.at("fidelity");
    const double acc = f.at("acc_phi"), acc_p = f.at("acc_phi_prime"), agree = f.at("agreement");
    const bool seed_ok = acc >= 0.9 && agree >= 0.9 && std::abs(acc - acc_p) <= 0.05 && r.seconds <= 1800.0;
    ok = ok && seed_ok;
    detail += "seed " + std::to_string(r.seed) + " acc " + fmt(acc, 3) + " acc' " + fmt(acc_p, 3) + " agree " +
              fmt(agree, 3) + " " + fmt(r.seconds, 0) + "s; ";
  }
  return {4, "fidelity of the discrete bottleneck", ok, detail};
}

Outcome flip_rate(const std::vector<SeedRun>& runs) {
  int good = 0;
  std::string detail;
  for (const auto& r : runs) {
    const double rate = r.metrics.at("flip_rates").at("full_flip");
    good += rate >= 0.8;
    detail += "seed " + std::to_string(r.seed) + " " + fmt(rate, 3) + "; ";
  }
  return {5, "full-flip rate", good >= 2, detail + std::to_string(good) + "/3 seeds >= 0.80"};
}

Outcome regularization(const fs::path& root) {
  pipeline::RunConfig c;
  c.output_dir = root;
  c.seeds = {0, 1, 2};
  // Every seed was already run with the ablation arm; this reuses those stages.
  const json table = pipeline::compare_regularization(c);
  int good = 0;
  std::string detail;
  for (const auto& row : table.at("rows")) {
    const double off = row.at("lambda_zero"), on = row.at("lambda_positive"), delta = row.at("delta");
    good += delta >= 0.15;
    detail += "seed " + std::to_string(row.at("seed").get<int>()) + " " + fmt(off, 3) + " -> " + fmt(on, 3) + "; ";
  }
  std::cerr << pipeline::format_ablation_table(table);
  return {6, "regularization ablation", good >= 2, detail + std::to_string(good) + "/3 seeds with delta >= 0.15"};
}

Outcome bias_detection(const fs::path& root, bool verbose) {
  int good = 0;
  std::string detail;
  for (std::uint64_t s : {0, 1, 2}) {
    pipeline::RunConfig c;
    c.seed = s;
    c.bias_split = pipeline::BiasSplitRequest{0.9};
    c.output_dir = root / ("seed_" + std::to_string(s));
    const auto t0 = Clock::now();
    const auto pair = pipeline::run_bias_split(c, [&](const std::string& m) {
      if (verbose) std::cerr << "[bias seed " << s << "] " << m << "\n";
    });
    std::cerr << "bias split seed " << s << " finished in " << fmt(seconds_since(t0), 1) << " s\n";
    const json& v = pair.report.at("verdict");
    good += v.at("pass").get<bool>();
    detail += "seed " + std::to_string(s) + " B " + fmt(v.at("mean_b_factual_positive_a"), 3) + "/" +
              fmt(v.at("mean_b_factual_positive_b"), 3) + " flips " + fmt(v.at("sign_flip_fraction_a"), 2) + "/" +
              fmt(v.at("sign_flip_fraction_b"), 2) + "; ";
  }
  return {7, "bias detection across split pipelines", good >= 2,
          detail + std::to_string(good) + "/3 seeds with opposite sign, margin >= 0.05, flips >= 0.60"};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

Outcome determinism(const fs::path& reference_run, const fs::path& root, bool verbose) {
  pipeline::RunConfig c;
  c.seed = 0;
  c.ablation = true;
  c.output_dir = root;
  const auto art = pipeline::run_pipeline(c, [&](const std::string& m) {
    if (verbose) std::cerr << "[rerun] " << m << "\n";
  });
  const std::string a = slurp(reference_run / "metrics.json");
  const std::string b = slurp(art.metrics);
  return {8, "determinism of metrics.json", !a.empty() && a == b,
          std::to_string(a.size()) + " bytes, " + (a == b ? "identical" : "different") + " in a fresh directory"};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"latent-lens acceptance checks"};
  fs::path workdir = "acceptance_runs";
  std::vector<int> only;
  bool keep = false;
  bool verbose = false;
  app.add_option("--workdir", workdir, "Directory for pipeline runs");
  app.add_option("--criteria", only, "Subset of criteria to run (1-8)")->check(CLI::Range(1, 8));
  app.add_flag("--keep", keep, "Reuse existing runs in the workdir");
  app.add_flag("--verbose", verbose, "Print pipeline progress");
  CLI11_PARSE(app, argc, argv);

  const std::set<int> selected = only.empty() ? std::set<int>{1, 2, 3, 4, 5, 6, 7, 8}
                                              : std::set<int>(only.begin(), only.end());
  auto want = [&](int id) { return selected.count(id) > 0; };
  if (!keep) fs::remove_all(workdir);
  fs::create_directories(workdir);

  std::vector<Outcome> results;
  auto report = [&](Outcome o) {
    std::printf("[%s] %d %s: %s\n", o.pass ? "PASS" : "FAIL", o.id, o.name.c_str(), o.detail.c_str());
    std::fflush(stdout);
    results.push_back(std::move(o));
  };
  auto guarded = [&](int id, const std::string& name, const std::function<Outcome()>& fn) {
    try {
      report(fn());
    } catch (const std::exception& e) {
      report({id, name, false, std::string("error: ") + e.what()});
    }
  };

  if (want(1)) guarded(1, "analytic Fisher oracle", fisher_oracle);
  if (want(2)) guarded(2, "Bernoulli KL oracle", kl_oracle);
  if (want(3)) guarded(3, "gradient checks", gradient_checks);

  const fs::path default_root = workdir / "default";
  if (want(4) || want(5) || want(6) || want(8)) {
    std::vector<SeedRun> runs;
    try {
      runs = default_runs(default_root, verbose);
    } catch (const std::exception& e) {
      for (int id : {4, 5, 6, 8})
        if (want(id)) report({id, "default runs", false, std::string("error: ") + e.what()});
    }
    if (!runs.empty()) {
      if (want(4)) guarded(4, "fidelity of the discrete bottleneck", [&] { return fidelity(runs); });
      if (want(5)) guarded(5, "full-flip rate", [&] { return flip_rate(runs); });
      if (want(6)) guarded(6, "regularization ablation", [&] { return regularization(default_root); });
    }
  }
  if (want(7)) guarded(7, "bias detection across split pipelines", [&] {
    return bias_detection(workdir / "bias", verbose);
  });
  if (want(8) && fs::exists(default_root / "seed_0" / "metrics.json"))
    guarded(8, "determinism of metrics.json", [&] {
      return determinism(default_root / "seed_0", workdir / "rerun", verbose);
    });

  json summary = json::array();
  for (const auto& o : results)
    summary.push_back(json{{"criterion", o.id}, {"name", o.name}, {"pass", o.pass}, {"detail", o.detail}});
  io::write_json(workdir / "acceptance.json", summary);

  const long failed = std::count_if(results.begin(), results.end(), [](const Outcome& o) { return !o.pass; });
  std::printf("%ld/%zu criteria passed\n", static_cast<long>(results.size()) - failed, results.size());
  return failed == 0 ? 0 : 1;
}
