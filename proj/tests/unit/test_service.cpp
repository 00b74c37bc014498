#include "latent_lens/intervention.hpp"
#include "latent_lens/io/checksum.hpp"
#include "latent_lens/io/model_io.hpp"
#include "latent_lens/pipeline.hpp"
#include "latent_lens/service.hpp"
#include "unit/support.hpp"

#include <doctest.h>
#include <httplib.h>

#include <fstream>
#include <thread>

using namespace latent_lens;
using namespace latent_lens::service;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

const Service& loaded() {
  static Service s = [] {
    return Service(test_support::shared_tiny_run(), 4);
  }();
  static const bool once = (s.load(), true);
  (void)once;
  return s;
}

Response get(const std::string& path, std::map<std::string, std::string> query = {}) {
  return loaded().handle({"GET", path, std::move(query), ""});
}

Response post(const std::string& path, const std::string& body) {
  return loaded().handle({"POST", path, {}, body});
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

}  // namespace

TEST_SUITE("service") {

TEST_CASE("health answers while loading; data endpoints wait") {
  const fs::path run = test_support::shared_tiny_run();
  Service s(run);
  const auto before = s.handle({"GET", "/api/health", {}, ""});
  CHECK(before.status == 200);
  CHECK(json::parse(before.body).at("status") == "loading");
  CHECK(s.handle({"GET", "/api/metrics", {}, ""}).status == 503);
  CHECK(s.handle({"GET", "/api/samples", {}, ""}).status == 503);

  s.load_async();
  s.wait();
  REQUIRE(s.ready());
  const json h = json::parse(s.handle({"GET", "/api/health", {}, ""}).body);
  CHECK(h.at("status") == "ready");
  CHECK(h.at("manifest_sha256") == io::sha256_file(run / "manifest.json"));
  CHECK(h.at("config_hash") == io::read_json(run / "manifest.json").at("config_hash"));
}

TEST_CASE("a broken run reports failure through health") {
  test_support::TempDir dir("broken");
  const fs::path run = test_support::shared_tiny_run();
  fs::copy(run, dir.path() / "run", fs::copy_options::recursive);
  fs::remove_all(dir.path() / "run" / "dvae");
  Service s(dir.path() / "run");
  s.load_async();
  s.wait();
  CHECK_FALSE(s.ready());
  CHECK(json::parse(s.handle({"GET", "/api/health", {}, ""}).body).at("status") == "failed");
  CHECK(s.handle({"GET", "/api/samples", {}, ""}).status == 503);
}

TEST_CASE("metrics are served byte for byte") {
  const auto r = get("/api/metrics");
  CHECK(r.status == 200);
  CHECK(r.body == slurp(test_support::shared_tiny_run() / "metrics.json"));
}

TEST_CASE("sample pagination") {
  const json page = json::parse(get("/api/samples", {{"offset", "5"}, {"limit", "3"}}).body);
  CHECK(page.at("total") == 40);
  REQUIRE(page.at("samples").size() == 3);
  CHECK(page.at("samples")[0].at("sample_id") == 5);
  CHECK(page.at("samples")[2].at("sample_id") == 7);
  // Base64 of the eight-byte PNG signature.
  CHECK(page.at("samples")[0].at("thumbnail").get<std::string>().rfind("iVBORw0KGgo", 0) == 0);

  CHECK(json::parse(get("/api/samples").body).at("samples").size() == 40);
  CHECK(json::parse(get("/api/samples", {{"limit", "0"}}).body).at("samples").empty());
  CHECK(json::parse(get("/api/samples", {{"offset", "40"}}).body).at("samples").empty());
  CHECK(json::parse(get("/api/samples", {{"offset", "38"}}).body).at("samples").size() == 2);
  for (auto [k, v] : {std::pair{"offset", "-1"}, {"limit", "abc"}, {"limit", "501"}, {"offset", ""}})
    CHECK(get("/api/samples", {{k, v}}).status == 400);
}

TEST_CASE("listed probabilities match the stored counterfactual records") {
  const auto recs = intervention::read_jsonl(test_support::shared_tiny_run() / "counterfactuals.jsonl");
  const json page = json::parse(get("/api/samples", {{"limit", "40"}}).body);
  for (const auto& item : page.at("samples")) {
    const auto& rec = recs.at(item.at("sample_id").get<std::size_t>());
    CHECK(item.at("p_original").get<double>() == rec.p_original);
  }
}

TEST_CASE("latent codes are thresholded posteriors and stable") {
  for (int id : {0, 17, 39}) {
    const auto r = get("/api/samples/" + std::to_string(id) + "/latent");
    REQUIRE(r.status == 200);
    const json j = json::parse(r.body);
    const auto bits = j.at("bits").get<std::vector<int>>();
    const auto q = j.at("posterior_probs").get<std::vector<double>>();
    REQUIRE(bits.size() == 8);
    REQUIRE(q.size() == 8);
    for (std::size_t b = 0; b < bits.size(); ++b) CHECK(bits[b] == (q[b] >= 0.5 ? 1 : 0));
    CHECK(j.at("per_bit_effect").size() == 8);
    CHECK(get("/api/samples/" + std::to_string(id) + "/latent").body == r.body);
  }
}

TEST_CASE("interventions: empty mask, full flip, errors and caching") {
  const json none = json::parse(post("/api/samples/3/intervene", R"({"flip_indices": []})").body);
  CHECK(none.at("factual_render") == none.at("counterfactual_render"));
  CHECK(none.at("p_original") == none.at("p_counterfactual"));
  CHECK(none.at("prediction_changed") == false);
  for (const char* key : {"b_original", "b_factual", "b_counterfactual"})
    CHECK(none.at("bias_statistics").contains(key));

  const auto recs = intervention::read_jsonl(test_support::shared_tiny_run() / "counterfactuals.jsonl");
  for (int id : {0, 11, 25}) {
    const auto r = post("/api/samples/" + std::to_string(id) + "/intervene",
                        R"({"flip_indices": [7, 6, 5, 4, 3, 2, 1, 0]})");
    REQUIRE(r.status == 200);
    const json full = json::parse(r.body);
    const auto& rec = recs.at(static_cast<std::size_t>(id));
    CHECK(full.at("flip_indices") == json(rec.mask.flip_indices));
    CHECK(full.at("p_counterfactual").get<double>() == rec.p_counterfactual);
    CHECK(full.at("prediction_changed").get<bool>() == rec.prediction_changed);
  }

  CHECK(post("/api/samples/3/intervene", "{oops").status == 400);
  CHECK(post("/api/samples/3/intervene", R"({"flip_indices": [8]})").status == 422);
  CHECK(post("/api/samples/3/intervene", R"({"flip_indices": [1, 1]})").status == 422);
  CHECK(post("/api/samples/3/intervene", R"({"flip_indices": ["a"]})").status == 422);
  CHECK(post("/api/samples/3/intervene", R"({"bits": [1]})").status == 422);
  CHECK(post("/api/samples/40/intervene", R"({"flip_indices": []})").status == 404);
  CHECK(get("/api/samples/x/latent").status == 404);
  CHECK(get("/api/nowhere").status == 404);
  CHECK(get("/api/samples/3/intervene").status == 404);

  const auto a = post("/api/samples/9/intervene", R"({"flip_indices": [2, 0]})");
  const auto b = post("/api/samples/9/intervene", R"({"flip_indices": [0, 2]})");
  CHECK(a.status == 200);
  CHECK(a.body == b.body);
  for (int id = 0; id < 10; ++id) post("/api/samples/" + std::to_string(id) + "/intervene", R"({"flip_indices": [1]})");
  CHECK(loaded().cache_size() == 4);
  CHECK(post("/api/samples/9/intervene", R"({"flip_indices": [2, 0]})").body == a.body);
}

TEST_CASE("suggested masks flip the prediction") {
  const auto recs = intervention::read_jsonl(test_support::shared_tiny_run() / "counterfactuals.jsonl");
  int found = 0;
  for (int id = 0; id < 40; ++id) {
    const auto r = get("/api/suggest/" + std::to_string(id));
    if (r.status == 204) {
      CHECK(r.body.empty());
      continue;
    }
    REQUIRE(r.status == 200);
    ++found;
    const json s = json::parse(r.body);
    CHECK(s.at("strategy") == "greedy_minimal");
    CHECK(s.at("p_original").get<double>() == recs.at(static_cast<std::size_t>(id)).p_original);
    const json applied = json::parse(
        post("/api/samples/" + std::to_string(id) + "/intervene", json{{"flip_indices", s.at("flip_indices")}}.dump()).body);
    CHECK(applied.at("prediction_changed") == true);
    CHECK(applied.at("p_counterfactual") == s.at("p_counterfactual"));
  }
  const json m = json::parse(get("/api/metrics").body);
  CHECK(found / 40.0 == doctest::Approx(m.at("flip_rates").at("greedy_minimal").get<double>()));
}

TEST_CASE("HTTP front end over a real socket") {
  HttpServer server(loaded());
  const int port = server.bind("127.0.0.1", 0);
  REQUIRE(port > 0);
  std::thread t([&] { server.listen(); });

  httplib::Client client("127.0.0.1", port);
  const auto health = client.Get("/api/health");
  REQUIRE(health);
  CHECK(health->status == 200);
  CHECK(health->get_header_value("Access-Control-Allow-Origin") == "*");
  CHECK(json::parse(health->body).at("manifest_sha256") == loaded().manifest_sha256());

  const auto page = client.Get("/api/samples?offset=2&limit=2");
  REQUIRE(page);
  CHECK(json::parse(page->body).at("samples")[0].at("sample_id") == 2);
  CHECK(client.Get("/api/samples?limit=-4")->status == 400);

  const auto posted = client.Post("/api/samples/1/intervene", R"({"flip_indices": [0]})", "application/json");
  REQUIRE(posted);
  CHECK(posted->status == 200);
  CHECK(posted->body == post("/api/samples/1/intervene", R"({"flip_indices": [0]})").body);
  CHECK(client.Options("/api/samples/1/intervene")->status == 204);
  CHECK(client.Get("/api/missing")->status == 404);

  server.stop();
  t.join();
}

}
