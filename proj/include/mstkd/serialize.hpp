#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "mstkd/tensor.hpp"

namespace mstkd {

// Flat binary tensor format: 1 magic byte, rank (u32 LE), extents (u32 LE each),
// then the values as 64-bit little-endian doubles in row-major order.
inline constexpr unsigned char kTensorMagic = 0x4D;

void write_tensor(std::ostream& os, const Tensor& t);
Tensor read_tensor(std::istream& is);

void save_tensor(const std::string& path, const Tensor& t);
Tensor load_tensor(const std::string& path);

// Checkpoint: concatenated tensor records in one binary file, plus a text
// manifest "<name>\t<e0xe1x...>\t<byte offset>" per line in the same order.
struct NamedTensor {
    std::string name;
    Tensor tensor;
};

void save_checkpoint(const std::string& path, const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> load_checkpoint(const std::string& path);

}  // namespace mstkd
