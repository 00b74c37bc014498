#include "latent_lens/pipeline.hpp"

#include "latent_lens/error.hpp"
#include "latent_lens/infotheory.hpp"
#include "latent_lens/io/checksum.hpp"
#include "latent_lens/io/model_io.hpp"
#include "latent_lens/random.hpp"

#include <algorithm>
#include <cmath>
#include <ctime>
#include <fstream>
#include <set>
#include <sstream>
#include <iomanip>

namespace latent_lens::pipeline {

namespace fs = std::filesystem;
using json = nlohmann::json;
using intervention::Strategy;

void RunConfig::validate() const {
  dataset.validate();
  classifier.validate();
  dvae.validate();
  generator.validate();
  if (val_samples <= 0) throw ValidationError("val_samples", "must be positive");
  if (classifier.input_shape != dataset.image_shape)
    throw ValidationError("classifier.input_shape", "does not match the dataset image shape");
  if (generator.output_shape != dataset.image_shape)
    throw ValidationError("generator.output_shape", "does not match the dataset image shape");
  if (bias_split && !(bias_split->rho_a >= 0.0 && bias_split->rho_a <= 1.0))
    throw ValidationError("bias_split.rho_a", "must lie in [0, 1]");
  if (split_arm < -1 || split_arm > 1) throw ValidationError("split_arm", "must be -1, 0 or 1");
  if (split_arm >= 0 && !bias_split)
    throw ValidationError("split_arm", "requires a bias_split request");
  if (strategies.empty()) throw ValidationError("strategies", "must not be empty");
  std::set<Strategy> seen;
  for (Strategy s : strategies) {
    if (s == Strategy::custom) throw ValidationError("strategies", "custom masks are not a strategy");
    if (!seen.insert(s).second) throw ValidationError("strategies", "duplicate " + to_string(s));
  }
  if (diagnostic.centers <= 0) throw ValidationError("diagnostic.centers", "must be positive");
  if (diagnostic.samples_per_coord < 2)
    throw ValidationError("diagnostic.samples_per_coord", "must be at least 2");
  if (panel_count < 0) throw ValidationError("panel_count", "must be non-negative");
  if (seeds.empty()) throw ValidationError("seeds", "must not be empty");
}

void to_json(json& j, const RunConfig& c) {
  json strategies = json::array();
  for (Strategy s : c.strategies) strategies.push_back(to_string(s));
  j = json{{"output_dir", c.output_dir.string()},
           {"seed", c.seed},
           {"dataset", c.dataset},
           {"val_samples", c.val_samples},
           {"bias_split", c.bias_split ? json{{"rho_a", c.bias_split->rho_a}} : json(nullptr)},
           {"split_arm", c.split_arm},
           {"classifier", c.classifier},
           {"dvae", c.dvae},
           {"generator", c.generator},
           {"strategies", strategies},
           {"ablation", c.ablation},
           {"diagnostic",
            {{"centers", c.diagnostic.centers},
             {"samples_per_coord", c.diagnostic.samples_per_coord}}},
           {"panel_count", c.panel_count},
           {"seeds", c.seeds}};
}

void from_json(const json& j, RunConfig& c) {
  RunConfig d;
  d.output_dir = j.value("output_dir", std::string{});
  d.seed = j.value("seed", d.seed);
  if (j.contains("dataset")) d.dataset = j.at("dataset").get<datagen::DatasetSpec>();
  d.val_samples = j.value("val_samples", d.val_samples);
  if (j.contains("bias_split") && !j.at("bias_split").is_null()) {
    BiasSplitRequest b;
    b.rho_a = j.at("bias_split").value("rho_a", b.rho_a);
    d.bias_split = b;
  }
  d.split_arm = j.value("split_arm", d.split_arm);
  if (j.contains("classifier")) d.classifier = j.at("classifier").get<classifier::ClassifierConfig>();
  if (j.contains("dvae")) d.dvae = j.at("dvae").get<dvae::DVAEConfig>();
  if (j.contains("generator")) d.generator = j.at("generator").get<explainer::GeneratorConfig>();
  if (j.contains("strategies")) {
    d.strategies.clear();
    for (const auto& s : j.at("strategies"))
      d.strategies.push_back(intervention::strategy_from_string(s.get<std::string>()));
  }
  d.ablation = j.value("ablation", d.ablation);
  if (j.contains("diagnostic")) {
    const json& g = j.at("diagnostic");
    d.diagnostic.centers = g.value("centers", d.diagnostic.centers);
    d.diagnostic.samples_per_coord = g.value("samples_per_coord", d.diagnostic.samples_per_coord);
  }
  d.panel_count = j.value("panel_count", d.panel_count);
  if (j.contains("seeds")) d.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
  c = std::move(d);
}

RunConfig load_run_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("config", "cannot open " + path.string());
  RunConfig c;
  try {
    c = json::parse(in).get<RunConfig>();
  } catch (const json::exception& e) {
    throw ValidationError("config", path.string() + ": " + e.what());
  }
  c.validate();
  return c;
}

std::string config_hash(const RunConfig& config) {
  json j = config;
  j.erase("output_dir");
  return io::sha256_hex(j.dump());
}

bool RunArtifacts::executed(const std::string& stage) const {
  return std::any_of(stages.begin(), stages.end(),
                     [&](const StageRecord& s) { return s.name == stage && s.executed; });
}

RunArtifacts artifact_layout(const fs::path& root) {
  RunArtifacts a;
  a.root = root;
  a.manifest = root / "manifest.json";
  a.train_data = root / "data" / "train";
  a.val_data = root / "data" / "val";
  a.classifier = root / "classifier";
  a.dvae = root / "dvae";
  a.generator = root / "generator";
  a.metrics = root / "metrics.json";
  a.counterfactuals = root / "counterfactuals.jsonl";
  return a;
}

namespace {

inline constexpr int kManifestVersion = 1;
inline constexpr const char* kManifestFormat = "latent-lens-run";

std::string utc_now() {
  const std::time_t t = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

std::vector<fs::path> files_under(const fs::path& p) {
  std::vector<fs::path> out;
  if (fs::is_directory(p)) {
    for (const auto& e : fs::recursive_directory_iterator(p))
      if (e.is_regular_file()) out.push_back(e.path());
  } else {
    out.push_back(p);
  }
  std::sort(out.begin(), out.end());
  return out;
}

/// Hash over the relative names and contents of every file under `paths`.
std::string tree_checksum(const fs::path& root, const std::vector<fs::path>& paths) {
  io::Sha256 h;
  for (const auto& p : paths)
    for (const auto& f : files_under(p)) {
      h.update(fs::relative(f, root).generic_string());
      h.update(std::string_view("\0", 1));
      h.update(io::sha256_file(f));
      h.update("\n");
    }
  return h.hex_digest();
}

struct StageConfigs {
  datagen::DatasetSpec train;
  datagen::DatasetSpec val;
  classifier::ClassifierConfig classifier;
  dvae::DVAEConfig dvae;
  explainer::GeneratorConfig generator;
  explainer::GeneratorConfig generator_lambda0;
  infotheory::GaussianProbe diagnostic_probe;
};

double train_rho(const RunConfig& c) {
  if (c.split_arm < 0) return c.dataset.confound_correlation;
  return c.split_arm == 0 ? c.bias_split->rho_a : 1.0 - c.bias_split->rho_a;
}

StageConfigs derive_configs(const RunConfig& c) {
  StageConfigs s;
  s.train = c.dataset;
  s.train.seed = derive_seed(c.seed, "data/train");
  s.train.confound_correlation = train_rho(c);
  s.val = c.dataset;
  s.val.n_samples = c.val_samples;
  s.val.confound_correlation = train_rho(c);
  s.val.seed = derive_seed(c.seed, c.split_arm < 0 ? std::string("data/val")
                                                   : "data/val/" + std::to_string(c.split_arm));
  s.classifier = c.classifier;
  s.classifier.seed = derive_seed(c.seed, "classifier");
  s.dvae = c.dvae;
  s.dvae.seed = derive_seed(c.seed, "dvae");
  s.generator = c.generator;
  s.generator.seed = derive_seed(c.seed, "generator");
  s.generator.probe.seed = derive_seed(c.seed, "generator/probe");
  s.generator_lambda0 = s.generator;
  s.generator_lambda0.lambda = 0.0;
  s.diagnostic_probe = {c.diagnostic.samples_per_coord, derive_seed(c.seed, "diagnostic")};
  return s;
}

class Manifest {
 public:
  Manifest(fs::path path, const RunConfig& config, std::string hash)
      : path_(std::move(path)), hash_(std::move(hash)) {
    if (fs::exists(path_)) {
      doc_ = io::read_json(path_);
      if (doc_.value("format", "") != kManifestFormat)
        throw StageError("config", path_.string() + " is not a run manifest");
      if (doc_.value("config_hash", "") != hash_)
        throw StageError("config",
                         "output directory holds a run with a different configuration; "
                         "use a fresh directory");
    } else {
      json cfg = config;
      cfg.erase("output_dir");
      doc_ = json{{"format", kManifestFormat},
                  {"schema_version", kManifestVersion},
                  {"config_hash", hash_},
                  {"config", cfg},
                  {"stages", json::object()}};
    }
  }

  const json* stage(const std::string& name) const {
    const json& stages = doc_.at("stages");
    auto it = stages.find(name);
    return it == stages.end() ? nullptr : &*it;
  }

  void record(const std::string& name, const std::string& checksum,
              const std::vector<std::string>& paths, const json& inputs) {
    doc_["stages"][name] = json{{"checksum", checksum},
                                {"paths", paths},
                                {"inputs", inputs},
                                {"completed_at", utc_now()}};
    const fs::path tmp = path_.string() + ".tmp";
    io::write_json(tmp, doc_);
    fs::rename(tmp, path_);
  }

 private:
  fs::path path_;
  std::string hash_;
  json doc_;
};

/// Runs or reuses one stage. A stage is reused when the manifest records it
/// with the same upstream checksums and its files still hash to the recorded
/// value; files that exist but hash differently are refused as stale.
class StageRunner {
 public:
  StageRunner(Manifest& manifest, RunArtifacts& art, const Progress& progress)
      : manifest_(manifest), art_(art), progress_(progress) {}

  std::string run(const std::string& name, const std::vector<fs::path>& paths, const json& inputs,
                  const std::function<void()>& body) {
    std::vector<std::string> rel;
    for (const auto& p : paths) rel.push_back(fs::relative(p, art_.root).generic_string());
    try {
      if (const json* rec = manifest_.stage(name);
          rec && rec->value("inputs", json()) == inputs &&
          std::all_of(paths.begin(), paths.end(), [](const fs::path& p) { return fs::exists(p); })) {
        const std::string on_disk = tree_checksum(art_.root, paths);
        if (on_disk != rec->at("checksum").get<std::string>())
          throw StageError(name, "artifacts on disk do not match the recorded checksum (stale "
                                 "resume refused); delete them to rerun the stage");
        note("reusing " + name);
        art_.stages.push_back({name, on_disk, false});
        return on_disk;
      }
      for (const auto& p : paths) fs::remove_all(p);
      note("running " + name);
      body();
      const std::string sum = tree_checksum(art_.root, paths);
      manifest_.record(name, sum, rel, inputs);
      art_.stages.push_back({name, sum, true});
      return sum;
    } catch (const StageError&) {
      throw;
    } catch (const std::exception& e) {
      throw StageError(name, e.what());
    }
  }

  void note(const std::string& msg) const {
    if (progress_) progress_(msg);
  }

 private:
  Manifest& manifest_;
  RunArtifacts& art_;
  const Progress& progress_;
};

double mean_of(const std::vector<double>& v) {
  if (v.empty()) return 0.0;
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

double median_of(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

int sign_of(double x) { return (x > 0.0) - (x < 0.0); }

json vector_json(const Vector& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

json dvae_statistics(const dvae::TrainedDVAE& dvae, const Matrix& reprs) {
  const Index n = reprs.cols();
  const Index bits = dvae.n_bits();
  const Vector mean = reprs.rowwise().mean();
  double err = 0.0, var = 0.0, decisive = 0.0;
  long stable = 0;
  Vector on_rate = Vector::Zero(bits);
  for (Index i = 0; i < n; ++i) {
    const dvae::LatentCode code = dvae.encode_hard(reprs.col(i));
    const Vector recon = dvae.decode(code.bits);
    err += (reprs.col(i) - recon).squaredNorm();
    var += (reprs.col(i) - mean).squaredNorm();
    decisive += (2.0 * code.posterior_probs.array() - 1.0).abs().mean();
    if (dvae.encode_hard(recon).bits == code.bits) ++stable;
    for (Index b = 0; b < bits; ++b) on_rate[b] += code.bits[static_cast<std::size_t>(b)];
  }
  on_rate /= static_cast<double>(n);
  int active = 0;
  for (Index b = 0; b < bits; ++b) active += on_rate[b] > 0.0 && on_rate[b] < 1.0;
  const auto& log = dvae.training_log();
  return json{{"n_bits", bits},
              {"train_recon_initial", log.empty() ? 0.0 : log.front().recon},
              {"train_recon_final", log.empty() ? 0.0 : log.back().recon},
              {"train_kl_final", log.empty() ? 0.0 : log.back().kl},
              {"val_relative_mse", var > 0.0 ? err / var : 0.0},
              {"decisiveness", decisive / static_cast<double>(n)},
              {"active_bits", active},
              {"bit_on_rate", vector_json(on_rate)},
              {"fixed_point_stability", static_cast<double>(stable) / static_cast<double>(n)}};
}

json generator_statistics(const explainer::TrainedGenerator& gen, const Matrix& recon_reprs,
                          const datagen::LabeledImageSet& val) {
  double abs_err = 0.0;
  for (Index i = 0; i < recon_reprs.cols(); ++i)
    abs_err += (gen.explain(recon_reprs.col(i)) - val.batch(i, 1).col(0)).cwiseAbs().sum();
  const auto& log = gen.training_log();
  return json{{"train_recon_initial", log.empty() ? 0.0 : log.front().recon},
              {"train_recon_final", log.empty() ? 0.0 : log.back().recon},
              {"effective_lambda", log.empty() ? 0.0 : log.back().effective_lambda},
              {"val_mae", abs_err / static_cast<double>(recon_reprs.cols() * val.images.rows())},
              {"training_log", log}};
}

Matrix diagnostic_centers(const Matrix& recon_reprs, int count) {
  const Index n = recon_reprs.cols();
  const Index k = std::min<Index>(count, n);
  Matrix centers(recon_reprs.rows(), k);
  for (Index c = 0; c < k; ++c) centers.col(c) = recon_reprs.col(c * n / k);
  return centers;
}

json alignment_json(const explainer::AlignmentReport& r) {
  const Vector& f = r.info_f.values;
  std::vector<double> fv(f.data(), f.data() + f.size());
  const double med = median_of(fv);
  return json{{"alignment", r.alignment},
              {"info_g", r.info_g},
              {"info_f", r.info_f},
              {"info_f_max_over_median", med > 0.0 ? f.maxCoeff() / med : 0.0}};
}

struct Loaded {
  std::optional<datagen::LabeledImageSet> train, val;
  std::optional<classifier::TrainedClassifier> clf;
  std::optional<dvae::TrainedDVAE> dvae;
  std::optional<explainer::TrainedGenerator> gen, gen0;
};

void evaluate(const RunConfig& config, const StageConfigs& sc, const RunArtifacts& art,
              Loaded& m, const std::string& hash) {
  const auto& clf = *m.clf;
  const auto& dv = *m.dvae;
  const auto& gen = *m.gen;
  const auto& val = *m.val;
  const Index n = val.size();

  const Matrix reprs = classifier::hidden_repr_each(clf, val);
  Matrix recon(reprs.rows(), n);
  std::vector<std::vector<int>> codes = intervention::encode_all(dv, reprs);
  for (Index i = 0; i < n; ++i) recon.col(i) = dv.decode(codes[static_cast<std::size_t>(i)]);

  json metrics;
  metrics["schema_version"] = kMetricsSchemaVersion;
  metrics["run"] = json{{"config_hash", hash},
                        {"seed", config.seed},
                        {"split_arm", config.split_arm},
                        {"train_confound_correlation", sc.train.confound_correlation},
                        {"val_confound_correlation", sc.val.confound_correlation},
                        {"n_train", sc.train.n_samples},
                        {"n_val", n}};
  metrics["classifier"] = json{{"training_log", clf.training_log()}};
  metrics["fidelity"] = classifier::evaluate_fidelity(clf, dv, val);

  std::vector<intervention::CounterfactualRecord> records;
  records.reserve(static_cast<std::size_t>(n));
  const auto full = intervention::InterventionMask::full(dv.n_bits());
  for (Index i = 0; i < n; ++i) {
    auto r = intervention::counterfactual(dv, clf, codes[static_cast<std::size_t>(i)], full);
    r.sample_id = static_cast<long>(i);
    records.push_back(std::move(r));
  }
  intervention::write_jsonl(art.counterfactuals, records);
  metrics["dvae"] = dvae_statistics(dv, reprs);

  json rates = json::object();
  const int budget = static_cast<int>(dv.n_bits());
  for (Strategy s : config.strategies) {
    double rate = 0.0;
    if (s == Strategy::full_flip) {
      long changed = 0;
      for (const auto& r : records) changed += r.prediction_changed;
      rate = static_cast<double>(changed) / static_cast<double>(n);
    } else if (s == Strategy::greedy_minimal) {
      std::vector<double> sizes;
      for (Index i = 0; i < n; ++i)
        if (auto mask = intervention::greedy_minimal_flip(dv, clf, codes[static_cast<std::size_t>(i)],
                                                          budget))
          sizes.push_back(static_cast<double>(mask->flip_indices.size()));
      rate = static_cast<double>(sizes.size()) / static_cast<double>(n);
      metrics["greedy_minimal"] = json{{"budget", budget},
                                       {"found_fraction", rate},
                                       {"median_mask_size", median_of(sizes)},
                                       {"mean_mask_size", mean_of(sizes)}};
    } else {
      rate = intervention::flip_rate(dv, clf, reprs, Strategy::greedy_minimal, 1);
    }
    rates[to_string(s)] = rate;
  }
  metrics["flip_rates"] = rates;
  metrics["per_bit_effect"] = vector_json(intervention::per_bit_effect(dv, clf, reprs));

  const Matrix centers = diagnostic_centers(recon, config.diagnostic.centers);
  json align{{"centers", centers.cols()},
             {"samples_per_coord", sc.diagnostic_probe.samples_per_coord},
             {"lambda", config.generator.lambda}};
  align["regularized"] =
      alignment_json(explainer::measure_alignment(gen.network(), clf, centers, sc.diagnostic_probe));
  if (m.gen0) {
    align["unregularized"] = alignment_json(
        explainer::measure_alignment(m.gen0->network(), clf, centers, sc.diagnostic_probe));
    align["delta"] = align["regularized"]["alignment"].get<double>() -
                     align["unregularized"]["alignment"].get<double>();
  }
  metrics["info_alignment"] = align;

  metrics["generator"] = generator_statistics(gen, recon, val);
  if (m.gen0) metrics["generator_lambda0"] = generator_statistics(*m.gen0, recon, val);

  std::vector<std::vector<double>> b_orig(2), b_fact(2), b_cf(2);
  std::vector<long> flips(2, 0);
  for (Index i = 0; i < n; ++i) {
    const auto& r = records[static_cast<std::size_t>(i)];
    const Vector image = val.batch(i, 1).col(0);
    const Vector fact = gen.explain(recon.col(i));
    const Vector cf = gen.explain(r.psi);
    const int y = val.labels[static_cast<std::size_t>(i)];
    const double bf = datagen::confound_statistic({fact.data(), static_cast<std::size_t>(fact.size())},
                                                  val.shape());
    const double bc =
        datagen::confound_statistic({cf.data(), static_cast<std::size_t>(cf.size())}, val.shape());
    b_orig[y].push_back(datagen::confound_statistic(
        {image.data(), static_cast<std::size_t>(image.size())}, val.shape()));
    b_fact[y].push_back(bf);
    b_cf[y].push_back(bc);
    flips[y] += sign_of(bf) != sign_of(bc);
  }
  json bias = json::object();
  for (int y = 0; y < 2; ++y) {
    const auto cnt = static_cast<double>(b_fact[y].size());
    bias[y == 1 ? "positive" : "negative"] =
        json{{"n", b_fact[y].size()},
             {"mean_b_original", mean_of(b_orig[y])},
             {"mean_b_factual", mean_of(b_fact[y])},
             {"mean_b_counterfactual", mean_of(b_cf[y])},
             {"sign_flip_fraction", cnt > 0 ? static_cast<double>(flips[y]) / cnt : 0.0}};
  }
  metrics["bias"] = bias;

  json panels = json::array();
  fs::create_directories(art.root / "panels");
  const Index k = std::min<Index>(config.panel_count, n);
  for (Strategy s : config.strategies) {
    std::vector<explainer::ExplanationPanel> ps;
    for (Index c = 0; c < k; ++c) {
      const Index i = c * n / k;
      auto p = explainer::concept_panel(gen, dv, clf, val.batch(i, 1).col(0), s, budget);
      p.sample_id = static_cast<long>(i);
      p.label = val.labels[static_cast<std::size_t>(i)];
      p.confound = val.confounds[static_cast<std::size_t>(i)];
      ps.push_back(std::move(p));
    }
    const std::string name = to_string(s);
    if (!ps.empty()) explainer::write_panel_grid(art.root / "panels" / (name + ".png"), ps, val.shape());
    io::write_json(art.root / "panels" / (name + ".json"), json(ps));
    panels.push_back(json{{"strategy", name}, {"png", "panels/" + name + ".png"}, {"count", ps.size()}});
  }
  metrics["panels"] = panels;
  io::write_json(art.metrics, metrics);
}

}  // namespace

RunArtifacts run_pipeline(const RunConfig& config, const Progress& progress) {
  try {
    config.validate();
  } catch (const ValidationError& e) {
    throw StageError("config", e.what());
  }
  if (config.output_dir.empty()) throw StageError("config", "output_dir is required");
  fs::create_directories(config.output_dir);

  RunArtifacts art = artifact_layout(config.output_dir);
  art.config_hash = config_hash(config);
  if (config.ablation) art.generator_lambda0 = art.root / "generator_lambda0";
  for (Strategy s : config.strategies)
    art.panels.push_back(art.root / "panels" / (to_string(s) + ".png"));

  Manifest manifest(art.manifest, config, art.config_hash);
  StageRunner runner(manifest, art, progress);
  const StageConfigs sc = derive_configs(config);
  Loaded m;

  auto train_set = [&]() -> const datagen::LabeledImageSet& {
    if (!m.train) m.train = datagen::load_dataset(art.train_data);
    return *m.train;
  };
  auto val_set = [&]() -> const datagen::LabeledImageSet& {
    if (!m.val) m.val = datagen::load_dataset(art.val_data);
    return *m.val;
  };
  auto clf = [&]() -> const classifier::TrainedClassifier& {
    if (!m.clf) m.clf = classifier::TrainedClassifier::load(art.classifier);
    return *m.clf;
  };
  auto dv = [&]() -> const dvae::TrainedDVAE& {
    if (!m.dvae) m.dvae = dvae::TrainedDVAE::load(art.dvae, clf().checksum());
    return *m.dvae;
  };
  auto epoch_note = [&](const std::string& stage) {
    return [&runner, stage](int epoch, double loss) {
      std::ostringstream os;
      os << stage << " epoch " << epoch << " loss " << loss;
      runner.note(os.str());
    };
  };

  const std::string data_sum = runner.run("data", {art.root / "data"}, json::object(), [&] {
    if (config.split_arm >= 0) {
      auto pair = datagen::make_bias_splits(sc.train, config.bias_split->rho_a);
      m.train = config.split_arm == 0 ? std::move(pair.split_a) : std::move(pair.split_b);
    } else {
      m.train = datagen::generate_dataset(sc.train);
    }
    m.val = datagen::generate_dataset(sc.val);
    datagen::save_dataset(art.train_data, *m.train);
    datagen::save_dataset(art.val_data, *m.val);
  });

  const json clf_inputs{{"data", data_sum}};
  const std::string clf_sum = runner.run("classifier", {art.classifier}, clf_inputs, [&] {
    auto cb = epoch_note("classifier");
    m.clf = classifier::train_classifier(sc.classifier, train_set(), val_set(),
                                         [&](const classifier::EpochLog& e) { cb(e.epoch, e.loss); });
    m.clf->save(art.classifier);
  });

  const json dvae_inputs{{"data", data_sum}, {"classifier", clf_sum}};
  const std::string dvae_sum = runner.run("dvae", {art.dvae}, dvae_inputs, [&] {
    auto cb = epoch_note("dvae");
    m.dvae = dvae::train_dvae(sc.dvae, classifier::hidden_repr_all(clf(), train_set()),
                              clf().checksum(),
                              [&](const dvae::DvaeEpochLog& e) { cb(e.epoch, e.recon + e.kl); });
    m.dvae->save(art.dvae);
  });

  const json gen_inputs{{"data", data_sum}, {"classifier", clf_sum}, {"dvae", dvae_sum}};
  auto train_gen = [&](const explainer::GeneratorConfig& gc, const std::string& stage,
                       std::optional<explainer::TrainedGenerator>& slot, const fs::path& dir) {
    auto cb = epoch_note(stage);
    slot = explainer::train_generator(gc, clf(), dv(), train_set(),
                                      [&](const explainer::GeneratorEpochLog& e) {
                                        cb(e.epoch, e.recon + e.effective_lambda * e.train_penalty);
                                      });
    slot->save(dir);
  };
  const std::string gen_sum = runner.run("generator", {art.generator}, gen_inputs,
                                         [&] { train_gen(sc.generator, "generator", m.gen, art.generator); });
  json eval_inputs{{"data", data_sum}, {"classifier", clf_sum}, {"dvae", dvae_sum},
                   {"generator", gen_sum}};
  if (art.generator_lambda0) {
    eval_inputs["generator_lambda0"] =
        runner.run("generator_lambda0", {*art.generator_lambda0}, gen_inputs, [&] {
          train_gen(sc.generator_lambda0, "generator_lambda0", m.gen0, *art.generator_lambda0);
        });
  }

  runner.run("evaluate", {art.metrics, art.counterfactuals, art.root / "panels"}, eval_inputs, [&] {
    val_set();
    clf();
    dv();
    if (!m.gen) m.gen = explainer::TrainedGenerator::load(art.generator, dv().checksum());
    if (art.generator_lambda0 && !m.gen0)
      m.gen0 = explainer::TrainedGenerator::load(*art.generator_lambda0, dv().checksum());
    evaluate(config, sc, art, m, art.config_hash);
  });

  // Downstream stages must leave upstream artifacts untouched.
  const std::vector<std::pair<std::string, std::vector<fs::path>>> upstream{
      {"data", {art.root / "data"}},
      {"classifier", {art.classifier}},
      {"dvae", {art.dvae}},
      {"generator", {art.generator}}};
  for (const auto& [name, paths] : upstream) {
    const auto it = std::find_if(art.stages.begin(), art.stages.end(),
                                 [&](const StageRecord& s) { return s.name == name; });
    if (tree_checksum(art.root, paths) != it->checksum)
      throw StageError(name, "artifact changed after the stage completed");
  }
  return art;
}

namespace {

json split_summary(const json& metrics) {
  return json{{"train_confound_correlation", metrics.at("run").at("train_confound_correlation")},
              {"bias", metrics.at("bias")},
              {"flip_rates", metrics.at("flip_rates")}};
}

std::vector<explainer::ExplanationPanel> positive_panels(const fs::path& run, int count) {
  const RunArtifacts art = artifact_layout(run);
  const auto val = datagen::load_dataset(art.val_data);
  const auto clf = classifier::TrainedClassifier::load(art.classifier);
  const auto dv = dvae::TrainedDVAE::load(art.dvae, clf.checksum());
  const auto gen = explainer::TrainedGenerator::load(art.generator, dv.checksum());
  std::vector<explainer::ExplanationPanel> out;
  for (Index i = 0; i < val.size() && static_cast<int>(out.size()) < count; ++i) {
    if (val.labels[static_cast<std::size_t>(i)] != 1) continue;
    auto p = explainer::concept_panel(gen, dv, clf, val.batch(i, 1).col(0), Strategy::full_flip);
    p.sample_id = static_cast<long>(i);
    p.label = 1;
    p.confound = val.confounds[static_cast<std::size_t>(i)];
    out.push_back(std::move(p));
  }
  return out;
}

}  // namespace

json emit_bias_report(const fs::path& run_a, const fs::path& run_b,
                      const std::optional<fs::path>& out_dir) {
  const json ma = io::read_json(artifact_layout(run_a).metrics);
  const json mb = io::read_json(artifact_layout(run_b).metrics);
  for (const json* m : {&ma, &mb})
    if (m->value("schema_version", 0) != kMetricsSchemaVersion)
      throw ArtifactError("metrics schema_version mismatch");

  const double ba = ma.at("bias").at("positive").at("mean_b_factual").get<double>();
  const double bb = mb.at("bias").at("positive").at("mean_b_factual").get<double>();
  const double fa = ma.at("bias").at("positive").at("sign_flip_fraction").get<double>();
  const double fb = mb.at("bias").at("positive").at("sign_flip_fraction").get<double>();
  const bool opposite = sign_of(ba) * sign_of(bb) < 0;
  const double margin = std::min(std::abs(ba), std::abs(bb));
  const bool flips = std::min(fa, fb) >= 0.6;
  json report{{"split_a", split_summary(ma)},
              {"split_b", split_summary(mb)},
              {"verdict",
               {{"mean_b_factual_positive_a", ba},
                {"mean_b_factual_positive_b", bb},
                {"contrast", ba - bb},
                {"opposite_sign", opposite},
                {"margin", margin},
                {"margin_ok", margin >= 0.05},
                {"sign_flip_fraction_a", fa},
                {"sign_flip_fraction_b", fb},
                {"sign_flip_ok", flips},
                {"pass", opposite && margin >= 0.05 && flips}}}};
  if (out_dir) {
    fs::create_directories(*out_dir);
    auto panels = positive_panels(run_a, 4);
    auto pb = positive_panels(run_b, 4);
    panels.insert(panels.end(), pb.begin(), pb.end());
    if (!panels.empty()) {
      const auto shape = datagen::load_dataset(artifact_layout(run_a).val_data).shape();
      explainer::write_panel_grid(*out_dir / "bias_panels.png", panels, shape);
      report["panels"] = json{{"png", "bias_panels.png"}, {"rows", json(panels)}};
    }
    io::write_json(*out_dir / "bias_report.json", report);
  }
  return report;
}

BiasSplitRun run_bias_split(const RunConfig& config, const Progress& progress) {
  if (!config.bias_split) throw StageError("config", "bias_split request missing");
  BiasSplitRun out;
  for (int arm = 0; arm < 2; ++arm) {
    RunConfig c = config;
    c.split_arm = arm;
    c.output_dir = config.output_dir / (arm == 0 ? "split_a" : "split_b");
    auto& slot = arm == 0 ? out.split_a : out.split_b;
    slot = run_pipeline(c, [&](const std::string& msg) {
      if (progress) progress((arm == 0 ? "[split_a] " : "[split_b] ") + msg);
    });
  }
  out.report = emit_bias_report(out.split_a.root, out.split_b.root, config.output_dir);
  return out;
}

json compare_regularization(const RunConfig& config, const Progress& progress) {
  json rows = json::array();
  int improved = 0;
  for (std::uint64_t s : config.seeds) {
    RunConfig c = config;
    c.seed = s;
    c.ablation = true;
    c.output_dir = config.output_dir / ("seed_" + std::to_string(s));
    const RunArtifacts art = run_pipeline(c, [&](const std::string& msg) {
      if (progress) progress("[seed " + std::to_string(s) + "] " + msg);
    });
    const json m = io::read_json(art.metrics);
    const json& a = m.at("info_alignment");
    const double off = a.at("unregularized").at("alignment").get<double>();
    const double on = a.at("regularized").at("alignment").get<double>();
    improved += on >= off;
    rows.push_back(json{{"task", "label"}, {"seed", s}, {"lambda_zero", off}, {"lambda_positive", on},
                        {"delta", on - off}});
  }
  json table{{"lambda", config.generator.lambda},
             {"columns", {"lambda_zero", "lambda_positive"}},
             {"rows", rows},
             {"seeds_improved", improved}};
  fs::create_directories(config.output_dir);
  io::write_json(config.output_dir / "ablation.json", table);
  return table;
}

std::string format_ablation_table(const json& table) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(3);
  os << "task    seed  lambda=0  lambda=" << table.at("lambda").get<double>() << "\n";
  for (const auto& r : table.at("rows"))
    os << std::left << std::setw(8) << r.at("task").get<std::string>() << std::setw(6)
       << r.at("seed").get<std::uint64_t>() << std::setw(10) << r.at("lambda_zero").get<double>()
       << r.at("lambda_positive").get<double>() << "\n";
  return os.str();
}

}  // namespace latent_lens::pipeline
