#include "latent_lens/error.hpp"
#include "latent_lens/io/model_io.hpp"
#include "latent_lens/pipeline.hpp"
#include "latent_lens/service.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <chrono>
#include <iomanip>
#include <iostream>

namespace ll = latent_lens;
namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

ll::pipeline::Progress progress_printer(bool quiet) {
  if (quiet) return {};
  const auto start = std::chrono::steady_clock::now();
  return [start](const std::string& msg) {
    const double t = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    std::cerr << "[" << std::fixed << std::setprecision(1) << std::setw(7) << t << "s] " << msg << '\n';
  };
}

ll::pipeline::RunConfig read_config(const fs::path& file, const std::string& output) {
  auto config = ll::pipeline::load_run_config(file);
  if (!output.empty()) config.output_dir = output;
  if (config.output_dir.empty()) throw ll::ValidationError("output_dir", "set it in the config or pass --output");
  return config;
}

void print_summary(const fs::path& metrics_path) {
  const json m = ll::io::read_json(metrics_path);
  const auto& f = m.at("fidelity");
  std::cout << "metrics: " << metrics_path.string() << "\n"
            << "  acc_phi " << f.at("acc_phi") << "  acc_phi_prime " << f.at("acc_phi_prime")
            << "  agreement " << f.at("agreement") << "\n";
  for (const auto& [name, rate] : m.at("flip_rates").items())
    std::cout << "  flip_rate[" << name << "] " << rate << "\n";
  const auto& a = m.at("info_alignment");
  std::cout << "  info_alignment " << a.at("regularized").at("alignment");
  if (a.contains("unregularized"))
    std::cout << "  (lambda=0: " << a.at("unregularized").at("alignment") << ")";
  std::cout << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Concept-level counterfactual explanations for image classifiers"};
  app.require_subcommand(1);

  std::string config_file, output, run_a, run_b, report_dir, run_dir, host = "127.0.0.1", static_dir;
  int port = 8080;
  std::size_t cache = 256;
  bool quiet = false;

  auto* run = app.add_subcommand("run", "Train and evaluate one pipeline (or a bias-split pair)");
  run->add_option("--config", config_file, "JSON run configuration")->required()->check(CLI::ExistingFile);
  run->add_option("--output", output, "Output directory (overrides output_dir)");
  run->add_flag("--quiet", quiet, "No progress output");

  auto* ablate = app.add_subcommand("ablate", "Paired lambda = 0 / lambda > 0 runs over the configured seeds");
  ablate->add_option("--config", config_file, "JSON run configuration")->required()->check(CLI::ExistingFile);
  ablate->add_option("--output", output, "Output directory (overrides output_dir)");
  ablate->add_flag("--quiet", quiet, "No progress output");

  auto* bias = app.add_subcommand("bias-report", "Compare the confound statistic across two split runs");
  bias->add_option("--run-a", run_a, "Run trained on split a")->required()->check(CLI::ExistingDirectory);
  bias->add_option("--run-b", run_b, "Run trained on split b")->required()->check(CLI::ExistingDirectory);
  bias->add_option("--out", report_dir, "Directory for bias_report.json and bias_panels.png");

  auto* serve = app.add_subcommand("serve", "Serve the explorer API over a completed run");
  serve->add_option("--run", run_dir, "Run directory")->required()->check(CLI::ExistingDirectory);
  serve->add_option("--port", port, "TCP port")->check(CLI::Range(0, 65535));
  serve->add_option("--host", host, "Bind address");
  serve->add_option("--static", static_dir, "Directory of explorer assets served at /")
      ->check(CLI::ExistingDirectory);
  serve->add_option("--cache", cache, "Render cache entries");

  auto* defaults = app.add_subcommand("default-config", "Print the default run configuration");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*run) {
      const auto config = read_config(config_file, output);
      if (config.bias_split && config.split_arm < 0) {
        const auto pair = ll::pipeline::run_bias_split(config, progress_printer(quiet));
        print_summary(pair.split_a.metrics);
        print_summary(pair.split_b.metrics);
        std::cout << "bias verdict:\n" << pair.report.at("verdict").dump(2) << "\n";
      } else {
        const auto art = ll::pipeline::run_pipeline(config, progress_printer(quiet));
        print_summary(art.metrics);
      }
    } else if (*ablate) {
      const auto config = read_config(config_file, output);
      const json table = ll::pipeline::compare_regularization(config, progress_printer(quiet));
      std::cout << ll::pipeline::format_ablation_table(table);
    } else if (*bias) {
      std::optional<fs::path> out;
      if (!report_dir.empty()) out = report_dir;
      std::cout << ll::pipeline::emit_bias_report(run_a, run_b, out).dump(2) << "\n";
    } else if (*serve) {
      ll::service::Service service(run_dir, cache);
      service.load_async();
      std::optional<fs::path> assets;
      if (!static_dir.empty()) assets = static_dir;
      ll::service::HttpServer server(service, assets);
      const int bound = server.bind(host, port);
      std::cerr << "serving " << run_dir << " on http://" << host << ":" << bound << "\n";
      server.listen();
    } else if (*defaults) {
      std::cout << json(ll::pipeline::RunConfig{}).dump(2) << "\n";
    }
  } catch (const ll::StageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const ll::ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
