#pragma once

#include "latent_lens/classifier.hpp"
#include "latent_lens/datagen.hpp"
#include "latent_lens/dvae.hpp"
#include "latent_lens/explainer.hpp"

#include <atomic>
#include <cstddef>
#include <filesystem>
#include <list>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <unordered_map>
#include <vector>

namespace latent_lens::service {

struct Request {
  std::string method;
  std::string path;
  std::map<std::string, std::string> query;
  std::string body;
};

struct Response {
  int status = 200;
  std::string body;
  std::string content_type = "application/json";
};

/// Frozen models and precomputed per-sample codes of one completed run.
struct Session {
  datagen::LabeledImageSet val;
  classifier::TrainedClassifier clf;
  dvae::TrainedDVAE dvae;
  explainer::TrainedGenerator gen;
  std::vector<dvae::LatentCode> codes;
  std::vector<double> p_original;
  std::vector<double> per_bit_effect;
  std::string metrics_text;
};

/// Thread-safe LRU map from key to response body.
class RenderCache {
 public:
  explicit RenderCache(std::size_t capacity) : capacity_(capacity) {}

  std::optional<std::string> get(const std::string& key);
  void put(const std::string& key, std::string value);
  std::size_t size() const;

 private:
  using Entry = std::pair<std::string, std::string>;
  std::size_t capacity_;
  mutable std::mutex mu_;
  std::list<Entry> order_;  // most recent first
  std::unordered_map<std::string, std::list<Entry>::iterator> index_;
};

/// Read-only JSON API over a run directory. `handle` is safe to call from
/// several threads once loading has finished; before that, data endpoints
/// answer 503.
class Service {
 public:
  explicit Service(std::filesystem::path run_dir, std::size_t cache_capacity = 256);
  ~Service();
  Service(const Service&) = delete;
  Service& operator=(const Service&) = delete;

  /// Loads synchronously; throws on failure.
  void load();
  /// Loads on a background thread; failures are reported by /api/health.
  void load_async();
  bool ready() const noexcept { return state_.load() == State::ready; }
  void wait() const;

  Response handle(const Request& req) const;

  const std::string& manifest_sha256() const noexcept { return manifest_sha256_; }
  std::size_t cache_size() const { return cache_.size(); }

 private:
  enum class State { idle, loading, ready, failed };

  Response health() const;
  Response samples(const Request& req) const;
  Response latent(long id) const;
  Response intervene(long id, const std::string& body) const;
  Response suggest(long id) const;

  std::filesystem::path run_dir_;
  std::string manifest_sha256_;
  std::string config_hash_;
  std::unique_ptr<Session> session_;
  std::atomic<State> state_{State::idle};
  std::string load_error_;
  std::thread loader_;
  mutable RenderCache cache_;
};

/// HTTP front end for a Service, with CORS headers on every response. When
/// `static_dir` is set its files are served under /.
class HttpServer {
 public:
  explicit HttpServer(const Service& service,
                      std::optional<std::filesystem::path> static_dir = {});
  ~HttpServer();
  HttpServer(const HttpServer&) = delete;
  HttpServer& operator=(const HttpServer&) = delete;

  /// Binds to host:port (0 picks a free port) and returns the bound port.
  int bind(const std::string& host, int port);
  /// Serves until stop() is called from another thread.
  void listen();
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace latent_lens::service
