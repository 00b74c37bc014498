#include "latent_lens/error.hpp"
#include "latent_lens/io/checksum.hpp"
#include "latent_lens/io/model_io.hpp"
#include "latent_lens/io/npy.hpp"
#include "latent_lens/io/png.hpp"
#include "latent_lens/nn/layers.hpp"
#include "unit/support.hpp"

#include <doctest.h>

#include <fstream>

using namespace latent_lens;
using test_support::TempDir;

TEST_SUITE("io") {

TEST_CASE("sha256 and base64 known vectors") {
  CHECK(io::sha256_hex("abc") == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
  CHECK(io::sha256_hex("") == "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
  io::Sha256 h;
  h.update("a");
  h.update("bc");
  CHECK(h.hex_digest() == io::sha256_hex("abc"));
  const std::vector<std::uint8_t> bytes{'f', 'o', 'o', 'b', 'a', 'r'};
  CHECK(io::base64_encode(bytes) == "Zm9vYmFy");
  CHECK(io::base64_encode(std::span(bytes).first(4)) == "Zm9vYg==");
  CHECK(io::base64_encode(std::span(bytes).first(5)) == "Zm9vYmE=");
  CHECK(io::base64_encode({}) == "");
}

TEST_CASE("npy round trip and header layout") {
  TempDir dir("npy");
  const std::vector<float> data{1.5f, -2.0f, 3.25f, 0.0f, 7.0f, 8.0f};
  io::write_npy(dir.path() / "a.npy", {2, 3}, data.data());
  const auto arr = io::read_npy(dir.path() / "a.npy");
  CHECK(arr.shape == std::vector<long>{2, 3});
  CHECK(arr.data == data);

  std::ifstream in(dir.path() / "a.npy", std::ios::binary);
  std::string head(10, '\0');
  in.read(head.data(), 10);
  CHECK(head.substr(0, 6) == "\x93NUMPY");
  const auto header_len = static_cast<unsigned char>(head[8]) | (static_cast<unsigned char>(head[9]) << 8);
  CHECK((10 + header_len) % 64 == 0);

  std::ofstream(dir.path() / "bad.npy") << "not numpy";
  CHECK_THROWS_AS(io::read_npy(dir.path() / "bad.npy"), ArtifactError);
}

TEST_CASE("png encoding has a valid signature and scales tiles") {
  const ImageShape shape{3, 2, 2};
  std::vector<double> chw(12, 0.5);
  const auto rgb = io::to_rgb(chw, shape, 3);
  CHECK(rgb.width == 6);
  CHECK(rgb.height == 6);
  CHECK(rgb.pixels.size() == 6 * 6 * 3);
  CHECK(rgb.pixels[0] == 128);
  const auto png = io::encode_png(rgb);
  REQUIRE(png.size() > 8);
  CHECK(std::equal(png.begin(), png.begin() + 8,
                   std::vector<std::uint8_t>{0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'}.begin()));
  const auto row = io::hstack({rgb, rgb}, 2);
  CHECK(row.width == 14);
  CHECK(io::vstack({row, rgb}, 2).height == 14);
}

TEST_CASE("model artifacts round trip and detect tampering") {
  TempDir dir("model");
  Rng rng(3);
  nn::Sequential net;
  net.add<nn::Linear>(3, 2);
  net.add<nn::Sigmoid>(2);
  net.initialize(rng);
  const auto sum = io::save_model(dir.path() / "m", "toy", {{"a", 1}}, {{"net", &net}}, {{"b", 2}});
  const auto art = io::load_model(dir.path() / "m", "toy");
  CHECK(art.checksum == sum);
  CHECK(art.config == nlohmann::json{{"a", 1}});
  CHECK(art.extra == nlohmann::json{{"b", 2}});
  CHECK(art.network("net").layer(0).parameters()[0] == net.layer(0).parameters()[0]);
  CHECK(io::parameter_checksum({{"net", &net}}) == sum);
  CHECK_THROWS_AS(io::load_model(dir.path() / "m", "other"), ArtifactError);

  {
    std::fstream f(dir.path() / "m" / "net.bin", std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(3);
    f.put('\x7f');
  }
  CHECK_THROWS_AS(io::load_model(dir.path() / "m", "toy"), ArtifactError);
  CHECK_THROWS_AS(io::load_model(dir.path() / "missing", "toy"), ArtifactError);
}

}
