#include "vmmc/nn/safetensors.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <json.hpp>
#include <stdexcept>

namespace vmmc::nn {
namespace {

using json = nlohmann::json;

float half_to_float(std::uint16_t h) {
  const std::uint32_t sign = (h & 0x8000u) << 16;
  std::uint32_t exponent = (h >> 10) & 0x1Fu;
  std::uint32_t mantissa = h & 0x3FFu;
  std::uint32_t bits;
  if (exponent == 0) {
    if (mantissa == 0) {
      bits = sign;
    } else {
      exponent = 127 - 15 + 1;
      while ((mantissa & 0x400u) == 0) {
        mantissa <<= 1;
        --exponent;
      }
      mantissa &= 0x3FFu;
      bits = sign | (exponent << 23) | (mantissa << 13);
    }
  } else if (exponent == 0x1F) {
    bits = sign | 0x7F800000u | (mantissa << 13);
  } else {
    bits = sign | ((exponent + 127 - 15) << 23) | (mantissa << 13);
  }
  return std::bit_cast<float>(bits);
}

std::size_t element_size(const std::string& dtype) {
  if (dtype == "F32") return 4;
  if (dtype == "F64") return 8;
  if (dtype == "F16" || dtype == "BF16") return 2;
  throw std::runtime_error("safetensors: unsupported dtype " + dtype);
}

}  // namespace

TensorArchive read_safetensors(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::uint64_t header_len = 0;
  in.read(reinterpret_cast<char*>(&header_len), sizeof header_len);
  if (!in || header_len > (std::uint64_t{1} << 30)) {
    throw std::runtime_error("safetensors: bad header length in " + path.string());
  }
  std::string header(header_len, '\0');
  in.read(header.data(), static_cast<std::streamsize>(header_len));
  std::vector<char> buffer((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

  const json doc = json::parse(header);
  TensorArchive archive;
  for (const auto& [name, entry] : doc.items()) {
    if (name == "__metadata__") {
      for (const auto& [k, v] : entry.items()) archive.metadata[k] = v.get<std::string>();
      continue;
    }
    const std::string dtype = entry.at("dtype").get<std::string>();
    const auto offsets = entry.at("data_offsets").get<std::vector<std::uint64_t>>();
    StoredTensor t;
    t.shape = entry.at("shape").get<std::vector<std::int64_t>>();
    std::size_t count = 1;
    for (auto d : t.shape) count *= static_cast<std::size_t>(d);
    const std::size_t width = element_size(dtype);
    if (offsets.size() != 2 || offsets[1] < offsets[0] || offsets[1] > buffer.size() ||
        offsets[1] - offsets[0] != count * width) {
      throw std::runtime_error("safetensors: inconsistent offsets for " + name);
    }
    const char* src = buffer.data() + offsets[0];
    t.data.resize(count);
    for (std::size_t i = 0; i < count; ++i) {
      if (dtype == "F32") {
        std::memcpy(&t.data[i], src + 4 * i, 4);
      } else if (dtype == "F64") {
        double d;
        std::memcpy(&d, src + 8 * i, 8);
        t.data[i] = static_cast<float>(d);
      } else {
        std::uint16_t h;
        std::memcpy(&h, src + 2 * i, 2);
        t.data[i] = dtype == "F16" ? half_to_float(h)
                                   : std::bit_cast<float>(std::uint32_t{h} << 16);
      }
    }
    archive.tensors.emplace(name, std::move(t));
  }
  return archive;
}

void write_safetensors(const std::filesystem::path& path, const TensorArchive& archive) {
  json header = json::object();
  std::uint64_t offset = 0;
  for (const auto& [name, t] : archive.tensors) {
    const std::uint64_t bytes = t.data.size() * sizeof(float);
    header[name] = {{"dtype", "F32"}, {"shape", t.shape}, {"data_offsets", {offset, offset + bytes}}};
    offset += bytes;
  }
  if (!archive.metadata.empty()) header["__metadata__"] = archive.metadata;
  std::string text = header.dump();
  while (text.size() % 8 != 0) text.push_back(' ');

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  const std::uint64_t len = text.size();
  out.write(reinterpret_cast<const char*>(&len), sizeof len);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& [name, t] : archive.tensors) {
    out.write(reinterpret_cast<const char*>(t.data.data()),
              static_cast<std::streamsize>(t.data.size() * sizeof(float)));
  }
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

}  // namespace vmmc::nn
