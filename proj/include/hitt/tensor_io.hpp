#pragma once

#include <string>
#include <utility>
#include <vector>

#include "hitt/tensor.hpp"

namespace hitt {

// Single-tensor binary file: magic "HTT1", u8 rank, rank x u32 little-endian
// dims, then the f32 little-endian payload in row-major order.
void write_tensor(const std::string& path, const Tensor& t);
Tensor read_tensor(const std::string& path);

// Multi-tensor container (checkpoints): magic "HTTC", u32 entry count, then
// per entry a u32 name length, the name bytes, and one complete
// single-tensor record in the format above.
using NamedTensors = std::vector<std::pair<std::string, Tensor>>;
void write_named_tensors(const std::string& path, const NamedTensors& entries);
NamedTensors read_named_tensors(const std::string& path);

// FNV-1a (64-bit, hex) content hashes for run logs and manifests.
std::string bytes_hash(const void* data, std::size_t n);
std::string file_content_hash(const std::string& path);

}  // namespace hitt
