#pragma once

#include <Eigen/Core>

#include <filesystem>
#include <vector>

namespace latent_lens::io {

/// Dense float32 array stored in the NumPy .npy v1.0 layout:
///   "\x93NUMPY" | 0x01 0x00 | uint16 LE header length | ASCII dict header
///   {'descr': '<f4', 'fortran_order': False, 'shape': (...), } padded to 64 bytes
///   followed by little-endian float32 values in C order.
struct NpyArray {
  std::vector<long> shape;
  std::vector<float> data;
};

void write_npy(const std::filesystem::path& path, const std::vector<long>& shape,
               const float* data);
NpyArray read_npy(const std::filesystem::path& path);

}  // namespace latent_lens::io
