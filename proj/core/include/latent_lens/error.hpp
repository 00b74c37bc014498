#pragma once

#include <stdexcept>
#include <string>

namespace latent_lens {

/// Base class for every error raised by the toolkit.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A configuration or input value violates its documented range.
class ValidationError : public Error {
 public:
  ValidationError(std::string field, const std::string& what)
      : Error("invalid " + field + ": " + what), field_(std::move(field)) {}

  const std::string& field() const noexcept { return field_; }

 private:
  std::string field_;
};

/// Tensor or model dimensions do not line up.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// A derivative or estimate came out non-finite.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// A training loop produced a non-finite loss.
class TrainingError : public Error {
 public:
  TrainingError(std::string stage, int epoch, const std::string& what)
      : Error(stage + " diverged at epoch " + std::to_string(epoch) + ": " + what),
        stage_(std::move(stage)),
        epoch_(epoch) {}

  const std::string& stage() const noexcept { return stage_; }
  int epoch() const noexcept { return epoch_; }

 private:
  std::string stage_;
  int epoch_;
};

/// On-disk artifacts are missing, malformed, or fail checksum validation.
class ArtifactError : public Error {
 public:
  using Error::Error;
};

/// Raised by the pipeline; carries the name of the failing stage.
class StageError : public Error {
 public:
  StageError(std::string stage, const std::string& what)
      : Error("stage '" + stage + "' failed: " + what), stage_(std::move(stage)) {}

  const std::string& stage() const noexcept { return stage_; }

 private:
  std::string stage_;
};

}  // namespace latent_lens
