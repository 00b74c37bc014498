#include "latent_lens/service.hpp"

#include "latent_lens/error.hpp"
#include "latent_lens/intervention.hpp"
#include "latent_lens/io/checksum.hpp"
#include "latent_lens/io/model_io.hpp"
#include "latent_lens/io/png.hpp"
#include "latent_lens/pipeline.hpp"

#include <nlohmann/json.hpp>

#include <charconv>
#include <fstream>
#include <sstream>

namespace latent_lens::service {

namespace fs = std::filesystem;
using json = nlohmann::json;

std::optional<std::string> RenderCache::get(const std::string& key) {
  std::lock_guard lock(mu_);
  auto it = index_.find(key);
  if (it == index_.end()) return std::nullopt;
  order_.splice(order_.begin(), order_, it->second);
  return it->second->second;
}

void RenderCache::put(const std::string& key, std::string value) {
  if (capacity_ == 0) return;
  std::lock_guard lock(mu_);
  if (auto it = index_.find(key); it != index_.end()) {
    it->second->second = std::move(value);
    order_.splice(order_.begin(), order_, it->second);
    return;
  }
  order_.emplace_front(key, std::move(value));
  index_[key] = order_.begin();
  if (order_.size() > capacity_) {
    index_.erase(order_.back().first);
    order_.pop_back();
  }
}

std::size_t RenderCache::size() const {
  std::lock_guard lock(mu_);
  return order_.size();
}

namespace {

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ArtifactError("cannot open " + path.string());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

Response json_response(int status, const json& body) { return {status, body.dump(), "application/json"}; }

Response error_response(int status, const std::string& message) {
  return json_response(status, json{{"error", message}, {"status", status}});
}

std::string png_base64(const Vector& chw, const ImageShape& shape, int scale) {
  const auto rgb = io::to_rgb({chw.data(), static_cast<std::size_t>(chw.size())}, shape, scale);
  const auto png = io::encode_png(rgb);
  return io::base64_encode(png);
}

std::optional<long> parse_long(const std::string& s) {
  long v = 0;
  const char* end = s.data() + s.size();
  auto [ptr, ec] = std::from_chars(s.data(), end, v);
  if (ec != std::errc() || ptr != end || s.empty()) return std::nullopt;
  return v;
}

std::vector<std::string> split_path(const std::string& path) {
  std::vector<std::string> parts;
  std::string cur;
  for (char c : path) {
    if (c == '/') {
      if (!cur.empty()) parts.push_back(std::move(cur));
      cur.clear();
    } else {
      cur += c;
    }
  }
  if (!cur.empty()) parts.push_back(std::move(cur));
  return parts;
}

}  // namespace

Service::Service(fs::path run_dir, std::size_t cache_capacity)
    : run_dir_(std::move(run_dir)), cache_(cache_capacity) {
  const auto art = pipeline::artifact_layout(run_dir_);
  manifest_sha256_ = io::sha256_file(art.manifest);
  config_hash_ = io::read_json(art.manifest).value("config_hash", "");
}

Service::~Service() {
  if (loader_.joinable()) loader_.join();
}

void Service::load() {
  state_ = State::loading;
  try {
    const auto art = pipeline::artifact_layout(run_dir_);
    auto val = datagen::load_dataset(art.val_data);
    auto clf = classifier::TrainedClassifier::load(art.classifier);
    auto dv = dvae::TrainedDVAE::load(art.dvae, clf.checksum());
    auto gen = explainer::TrainedGenerator::load(art.generator, dv.checksum());
    std::string metrics_text = read_text(art.metrics);
    const json metrics = json::parse(metrics_text);
    if (metrics.value("schema_version", 0) != pipeline::kMetricsSchemaVersion)
      throw ArtifactError("unsupported metrics schema_version");
    auto effect = metrics.at("per_bit_effect").get<std::vector<double>>();

    const Matrix reprs = classifier::hidden_repr_each(clf, val);
    std::vector<dvae::LatentCode> codes;
    std::vector<double> p;
    for (Index i = 0; i < reprs.cols(); ++i) {
      codes.push_back(dv.encode_hard(reprs.col(i)));
      p.push_back(intervention::head_probability(clf, dv.decode(std::span<const int>(codes.back().bits))));
    }
    session_ = std::make_unique<Session>(Session{std::move(val), std::move(clf), std::move(dv),
                                                 std::move(gen), std::move(codes), std::move(p),
                                                 std::move(effect), std::move(metrics_text)});
    state_ = State::ready;
  } catch (const std::exception& e) {
    load_error_ = e.what();
    state_ = State::failed;
    throw;
  }
}

void Service::load_async() {
  state_ = State::loading;
  loader_ = std::thread([this] {
    try {
      load();
    } catch (const std::exception&) {
    }
  });
}

void Service::wait() const {
  while (state_.load() == State::loading) std::this_thread::sleep_for(std::chrono::milliseconds(5));
}

Response Service::health() const {
  const State s = state_.load();
  json body{{"manifest_sha256", manifest_sha256_}, {"config_hash", config_hash_}};
  switch (s) {
    case State::ready: body["status"] = "ready"; break;
    case State::failed: body["status"] = "failed"; body["error"] = load_error_; break;
    default: body["status"] = "loading"; break;
  }
  return json_response(200, body);
}

Response Service::samples(const Request& req) const {
  long offset = 0;
  long limit = 50;
  for (auto [name, slot] : {std::pair{"offset", &offset}, std::pair{"limit", &limit}}) {
    auto it = req.query.find(name);
    if (it == req.query.end()) continue;
    auto v = parse_long(it->second);
    if (!v || *v < 0) return error_response(400, std::string(name) + " must be a non-negative integer");
    *slot = *v;
  }
  if (limit > 500) return error_response(400, "limit must not exceed 500");
  const Session& s = *session_;
  const long total = static_cast<long>(s.val.size());
  json items = json::array();
  for (long i = offset; i < total && i < offset + limit; ++i) {
    const auto idx = static_cast<std::size_t>(i);
    items.push_back(json{{"sample_id", i},
                         {"thumbnail", png_base64(s.val.batch(i, 1).col(0), s.val.shape(), 2)},
                         {"label", s.val.labels[idx]},
                         {"confound", s.val.confounds[idx]},
                         {"p_original", s.p_original[idx]}});
  }
  return json_response(200, json{{"total", total}, {"offset", offset}, {"limit", limit}, {"samples", items}});
}

Response Service::latent(long id) const {
  const auto& code = session_->codes[static_cast<std::size_t>(id)];
  const Vector& q = code.posterior_probs;
  return json_response(200, json{{"sample_id", id},
                                 {"bits", code.bits},
                                 {"posterior_probs", std::vector<double>(q.data(), q.data() + q.size())},
                                 {"per_bit_effect", session_->per_bit_effect}});
}

Response Service::intervene(long id, const std::string& body) const {
  const Session& s = *session_;
  json req;
  try {
    req = json::parse(body);
  } catch (const json::exception&) {
    return error_response(400, "body is not valid JSON");
  }
  if (!req.is_object() || !req.contains("flip_indices") || !req.at("flip_indices").is_array())
    return error_response(422, "body must be {\"flip_indices\": [...]}");
  std::vector<int> indices;
  for (const auto& v : req.at("flip_indices")) {
    if (!v.is_number_integer()) return error_response(422, "flip_indices must be integers");
    indices.push_back(v.get<int>());
  }
  intervention::InterventionMask mask;
  try {
    mask = intervention::InterventionMask::make(indices, s.dvae.n_bits());
  } catch (const ValidationError& e) {
    return error_response(422, e.what());
  }

  std::string key = std::to_string(id) + ":";
  for (int i : mask.flip_indices) key += std::to_string(i) + ",";
  if (auto hit = cache_.get(key)) return {200, *hit, "application/json"};

  const auto panel = explainer::concept_panel(s.gen, s.dvae, s.clf, s.val.batch(id, 1).col(0), mask);
  const ImageShape& shape = s.gen.output_shape();
  json out{{"sample_id", id},
           {"flip_indices", mask.flip_indices},
           {"factual_render", png_base64(panel.factual_render, shape, 3)},
           {"counterfactual_render", png_base64(panel.counterfactual_render, shape, 3)},
           {"p_original", panel.p_original},
           {"p_counterfactual", panel.p_counterfactual},
           {"prediction_changed", panel.prediction_changed},
           {"bias_statistics",
            {{"b_original", panel.b_original},
             {"b_factual", panel.b_factual},
             {"b_counterfactual", panel.b_counterfactual}}}};
  std::string text = out.dump();
  cache_.put(key, text);
  return {200, std::move(text), "application/json"};
}

Response Service::suggest(long id) const {
  const Session& s = *session_;
  const auto& bits = s.codes[static_cast<std::size_t>(id)].bits;
  auto mask = intervention::greedy_minimal_flip(s.dvae, s.clf, bits, static_cast<int>(s.dvae.n_bits()));
  if (!mask) return {204, "", "application/json"};
  const auto rec = intervention::counterfactual(s.dvae, s.clf, bits, *mask);
  if (!rec.prediction_changed) return {204, "", "application/json"};
  return json_response(200, json{{"sample_id", id},
                                 {"flip_indices", mask->flip_indices},
                                 {"strategy", intervention::to_string(mask->strategy)},
                                 {"p_original", rec.p_original},
                                 {"p_counterfactual", rec.p_counterfactual}});
}

Response Service::handle(const Request& req) const {
  const auto parts = split_path(req.path);
  if (parts.size() < 2 || parts[0] != "api") return error_response(404, "no such endpoint");
  if (parts.size() == 2 && parts[1] == "health" && req.method == "GET") return health();

  const State st = state_.load();
  if (st == State::failed) return error_response(503, "run failed to load: " + load_error_);
  if (st != State::ready) return error_response(503, "run is still loading");

  try {
    if (parts.size() == 2 && parts[1] == "metrics" && req.method == "GET")
      return {200, session_->metrics_text, "application/json"};
    if (parts.size() == 2 && parts[1] == "samples" && req.method == "GET") return samples(req);

    const bool sample_route = parts.size() == 4 && parts[1] == "samples";
    const bool suggest_route = parts.size() == 3 && parts[1] == "suggest";
    if (!sample_route && !suggest_route) return error_response(404, "no such endpoint");
    const auto id = parse_long(parts[2]);
    if (!id || *id < 0 || *id >= static_cast<long>(session_->val.size()))
      return error_response(404, "unknown sample id " + parts[2]);
    if (suggest_route && req.method == "GET") return suggest(*id);
    if (sample_route && parts[3] == "latent" && req.method == "GET") return latent(*id);
    if (sample_route && parts[3] == "intervene" && req.method == "POST") return intervene(*id, req.body);
    return error_response(404, "no such endpoint");
  } catch (const std::exception& e) {
    return error_response(500, e.what());
  }
}

}  // namespace latent_lens::service
