#include "latent_lens/io/npy.hpp"

#include "latent_lens/error.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <numeric>
#include <regex>
#include <sstream>
#include <string>

namespace latent_lens::io {
namespace {

constexpr char kMagic[] = "\x93NUMPY";
constexpr std::size_t kMagicLen = 6;

static_assert(std::endian::native == std::endian::little, "npy writer assumes little-endian");

long element_count(const std::vector<long>& shape) {
  return std::accumulate(shape.begin(), shape.end(), 1L, std::multiplies<>());
}

}  // namespace

void write_npy(const std::filesystem::path& path, const std::vector<long>& shape,
               const float* data) {
  std::ostringstream dict;
  dict << "{'descr': '<f4', 'fortran_order': False, 'shape': (";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    dict << shape[i] << (shape.size() == 1 || i + 1 < shape.size() ? "," : "");
    if (i + 1 < shape.size()) dict << ' ';
  }
  dict << "), }";
  std::string header = dict.str();
  const std::size_t prefix = kMagicLen + 2 + 2;
  const std::size_t total = ((prefix + header.size() + 1 + 63) / 64) * 64;
  header.append(total - prefix - header.size() - 1, ' ');
  header.push_back('\n');

  std::ofstream out(path, std::ios::binary);
  if (!out) throw ArtifactError("cannot write " + path.string());
  out.write(kMagic, kMagicLen);
  const char version[2] = {1, 0};
  out.write(version, 2);
  const auto hlen = static_cast<std::uint16_t>(header.size());
  out.write(reinterpret_cast<const char*>(&hlen), 2);
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  out.write(reinterpret_cast<const char*>(data),
            static_cast<std::streamsize>(element_count(shape) * sizeof(float)));
  if (!out) throw ArtifactError("short write to " + path.string());
}

NpyArray read_npy(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ArtifactError("cannot open " + path.string());
  char magic[kMagicLen];
  in.read(magic, kMagicLen);
  if (!in || std::memcmp(magic, kMagic, kMagicLen) != 0) {
    throw ArtifactError(path.string() + ": missing npy magic string");
  }
  char version[2];
  in.read(version, 2);
  if (version[0] != 1) throw ArtifactError(path.string() + ": unsupported npy version");
  std::uint16_t hlen = 0;
  in.read(reinterpret_cast<char*>(&hlen), 2);
  std::string header(hlen, '\0');
  in.read(header.data(), hlen);
  if (!in) throw ArtifactError(path.string() + ": truncated header");

  if (header.find("'descr': '<f4'") == std::string::npos) {
    throw ArtifactError(path.string() + ": only little-endian float32 arrays are supported");
  }
  if (header.find("'fortran_order': False") == std::string::npos) {
    throw ArtifactError(path.string() + ": fortran-ordered arrays are not supported");
  }
  std::smatch m;
  if (!std::regex_search(header, m, std::regex(R"('shape':\s*\(([^)]*)\))"))) {
    throw ArtifactError(path.string() + ": header has no shape");
  }
  NpyArray arr;
  const std::string dims = m[1];
  std::regex num(R"(\d+)");
  for (auto it = std::sregex_iterator(dims.begin(), dims.end(), num); it != std::sregex_iterator();
       ++it) {
    arr.shape.push_back(std::stol(it->str()));
  }
  arr.data.resize(static_cast<std::size_t>(element_count(arr.shape)));
  in.read(reinterpret_cast<char*>(arr.data.data()),
          static_cast<std::streamsize>(arr.data.size() * sizeof(float)));
  if (!in) throw ArtifactError(path.string() + ": truncated data");
  return arr;
}

}  // namespace latent_lens::io
