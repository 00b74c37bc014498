#pragma once

#include <Eigen/Core>

#include <cstddef>
#include <span>
#include <string>

namespace latent_lens {

/// Activations are stored feature-major: one column per sample.
using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using Index = Eigen::Index;

struct ImageShape {
  int channels = 3;
  int height = 32;
  int width = 32;

  Index size() const noexcept { return Index{channels} * height * width; }
  Index plane() const noexcept { return Index{height} * width; }
  bool operator==(const ImageShape&) const = default;
  std::string str() const;
};

inline std::span<const double> as_span(const Vector& v) {
  return {v.data(), static_cast<std::size_t>(v.size())};
}

}  // namespace latent_lens
