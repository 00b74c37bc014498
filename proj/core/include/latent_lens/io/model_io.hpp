#pragma once

#include "latent_lens/nn/sequential.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

namespace latent_lens::io {

/// A model artifact directory:
///   manifest.json   {"format": "latent-lens-model", "format_version": 1, "kind", "config",
///                    "networks": [{"name", "layers", "blob", "blob_sha256",
///                                  "parameter_shapes"}], "checksum", "extra"}
///   <name>.bin      parameters of each network as little-endian float64, column-major,
///                   concatenated in layer order
/// `checksum` is the SHA-256 over all parameter bytes of all networks in manifest order.
struct ModelArtifact {
  std::string kind;
  nlohmann::json config;
  nlohmann::json extra;
  std::vector<std::pair<std::string, nn::Sequential>> networks;
  std::string checksum;

  const nn::Sequential& network(const std::string& name) const;
};

using NamedNetworks = std::vector<std::pair<std::string, const nn::Sequential*>>;

/// SHA-256 over the parameters of the given networks, in order.
std::string parameter_checksum(const NamedNetworks& networks);

/// Writes the artifact and returns its checksum.
std::string save_model(const std::filesystem::path& dir, const std::string& kind,
                       const nlohmann::json& config, const NamedNetworks& networks,
                       const nlohmann::json& extra = nlohmann::json::object());

/// Loads and validates blob hashes, parameter shapes and the overall checksum.
ModelArtifact load_model(const std::filesystem::path& dir, const std::string& expected_kind);

nlohmann::json read_json(const std::filesystem::path& path);
void write_json(const std::filesystem::path& path, const nlohmann::json& value);

}  // namespace latent_lens::io
