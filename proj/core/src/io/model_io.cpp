#include "latent_lens/io/model_io.hpp"

#include "latent_lens/error.hpp"
#include "latent_lens/io/checksum.hpp"

#include <fstream>

namespace latent_lens::io {
namespace {

using nlohmann::json;

std::span<const std::byte> bytes_of(const Matrix& m) {
  return {reinterpret_cast<const std::byte*>(m.data()),
          static_cast<std::size_t>(m.size()) * sizeof(double)};
}

}  // namespace

const nn::Sequential& ModelArtifact::network(const std::string& name) const {
  for (const auto& [n, net] : networks) {
    if (n == name) return net;
  }
  throw ArtifactError("model '" + kind + "' has no network named '" + name + "'");
}

std::string parameter_checksum(const NamedNetworks& networks) {
  Sha256 h;
  for (const auto& [name, net] : networks) {
    for (const auto* p : net->parameters()) h.update(bytes_of(*p));
  }
  return h.hex_digest();
}

json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ArtifactError("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw ArtifactError(path.string() + ": " + e.what());
  }
}

void write_json(const std::filesystem::path& path, const json& value) {
  std::ofstream out(path);
  if (!out) throw ArtifactError("cannot write " + path.string());
  out << value.dump(2) << '\n';
}

std::string save_model(const std::filesystem::path& dir, const std::string& kind,
                       const json& config, const NamedNetworks& networks, const json& extra) {
  std::filesystem::create_directories(dir);
  json nets = json::array();
  for (const auto& [name, net] : networks) {
    const std::string blob = name + ".bin";
    std::ofstream out(dir / blob, std::ios::binary);
    if (!out) throw ArtifactError("cannot write " + (dir / blob).string());
    json shapes = json::array();
    for (const auto* p : net->parameters()) {
      const auto b = bytes_of(*p);
      out.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
      shapes.push_back({p->rows(), p->cols()});
    }
    out.close();
    nets.push_back({{"name", name},
                    {"layers", net->describe()},
                    {"blob", blob},
                    {"blob_sha256", sha256_file(dir / blob)},
                    {"parameter_shapes", shapes}});
  }
  const std::string checksum = parameter_checksum(networks);
  write_json(dir / "manifest.json", json{{"format", "latent-lens-model"},
                                         {"format_version", 1},
                                         {"kind", kind},
                                         {"config", config},
                                         {"networks", nets},
                                         {"checksum", checksum},
                                         {"extra", extra}});
  return checksum;
}

ModelArtifact load_model(const std::filesystem::path& dir, const std::string& expected_kind) {
  const json manifest = read_json(dir / "manifest.json");
  if (manifest.value("format", "") != "latent-lens-model") {
    throw ArtifactError(dir.string() + ": not a latent-lens model artifact");
  }
  ModelArtifact art;
  art.kind = manifest.at("kind").get<std::string>();
  if (art.kind != expected_kind) {
    throw ArtifactError(dir.string() + ": expected a " + expected_kind + " model, found " +
                        art.kind);
  }
  art.config = manifest.at("config");
  art.extra = manifest.value("extra", json::object());
  for (const auto& entry : manifest.at("networks")) {
    const auto blob = dir / entry.at("blob").get<std::string>();
    if (sha256_file(blob) != entry.at("blob_sha256").get<std::string>()) {
      throw ArtifactError(blob.string() + ": checksum mismatch");
    }
    nn::Sequential net = nn::Sequential::from_description(entry.at("layers"));
    const auto params = net.parameters();
    const auto& shapes = entry.at("parameter_shapes");
    if (shapes.size() != params.size()) {
      throw ArtifactError(blob.string() + ": parameter count disagrees with manifest");
    }
    std::ifstream in(blob, std::ios::binary);
    for (std::size_t k = 0; k < params.size(); ++k) {
      if (shapes[k][0].get<Index>() != params[k]->rows() ||
          shapes[k][1].get<Index>() != params[k]->cols()) {
        throw ArtifactError(blob.string() + ": parameter " + std::to_string(k) +
                            " shape disagrees with architecture");
      }
      in.read(reinterpret_cast<char*>(params[k]->data()),
              static_cast<std::streamsize>(params[k]->size() * sizeof(double)));
    }
    if (!in || in.peek() != std::char_traits<char>::eof()) {
      throw ArtifactError(blob.string() + ": blob size disagrees with manifest shapes");
    }
    art.networks.emplace_back(entry.at("name").get<std::string>(), std::move(net));
  }
  NamedNetworks named;
  for (const auto& [n, net] : art.networks) named.emplace_back(n, &net);
  art.checksum = parameter_checksum(named);
  if (art.checksum != manifest.at("checksum").get<std::string>()) {
    throw ArtifactError(dir.string() + ": parameter checksum mismatch");
  }
  return art;
}

}  // namespace latent_lens::io
