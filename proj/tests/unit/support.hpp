#pragma once

#include "latent_lens/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <filesystem>
#include <functional>
#include <string>
#include <unistd.h>

namespace test_support {

namespace fs = std::filesystem;

/// Directory removed when the object goes out of scope.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static std::atomic<int> counter{0};
    path_ = fs::temp_directory_path() /
            ("latent_lens_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
};

/// A run small enough to train in a few seconds: 16x16 images, 8 bits.
inline latent_lens::pipeline::RunConfig tiny_run_config(const fs::path& out) {
  using namespace latent_lens;
  pipeline::RunConfig c;
  c.output_dir = out;
  c.dataset.image_shape = {3, 16, 16};
  c.dataset.n_samples = 300;
  c.val_samples = 40;
  c.classifier.input_shape = {3, 16, 16};
  c.classifier.conv_layers = {{8, 3, 2}, {8, 3, 2}};
  c.classifier.fc_widths = {32, 16};
  c.classifier.epochs = 3;
  c.dvae.n_bits = 8;
  c.dvae.encoder_widths = {32, 16, 16, 8};
  c.dvae.epochs = 6;
  c.dvae.anneal_epochs = 3;
  c.generator.output_shape = {3, 16, 16};
  c.generator.base_channels = 8;
  c.generator.deconv_layers = {{8, 3, 2}, {3, 3, 2}};
  c.generator.epochs = 2;
  c.generator.log_centers = 2;
  c.generator.log_samples = 4;
  c.diagnostic = {2, 4};
  c.panel_count = 3;
  c.seeds = {0, 1};
  return c;
}

/// One tiny completed run shared by every test in the process.
inline const fs::path& shared_tiny_run() {
  static TempDir dir("shared_run");
  static const bool done = [] {
    auto c = tiny_run_config(dir.path() / "run");
    c.ablation = true;
    latent_lens::pipeline::run_pipeline(c);
    return true;
  }();
  (void)done;
  static const fs::path run = dir.path() / "run";
  return run;
}

/// Central difference of f at x along coordinate `ref`.
inline double central_difference(const std::function<double()>& f, double& ref, double h) {
  const double saved = ref;
  ref = saved + h;
  const double up = f();
  ref = saved - h;
  const double down = f();
  ref = saved;
  return (up - down) / (2.0 * h);
}

inline double relative_error(double a, double b, double floor = 1e-8) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

}  // namespace test_support
