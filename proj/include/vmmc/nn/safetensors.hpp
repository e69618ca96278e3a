#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace vmmc::nn {

// Reader/writer for the safetensors container: an 8-byte little-endian header
// length, a JSON header describing each tensor, then the raw buffer.
// Tensors are always materialized as float32; F64, F16 and BF16 are widened on read.
struct StoredTensor {
  std::vector<std::int64_t> shape;
  std::vector<float> data;
};

struct TensorArchive {
  std::map<std::string, StoredTensor> tensors;
  std::map<std::string, std::string> metadata;
};

TensorArchive read_safetensors(const std::filesystem::path& path);
void write_safetensors(const std::filesystem::path& path, const TensorArchive& archive);

}  // namespace vmmc::nn
