#include "vmmc/nn/state.hpp"

#include <algorithm>
#include <stdexcept>

namespace vmmc::nn {
namespace {

std::vector<std::pair<std::string, Tensor*>> named_tensors(Layer& layer) {
  std::vector<std::pair<std::string, Tensor*>> out;
  for (Parameter* p : parameters_of(layer)) out.emplace_back(p->name, &p->value);
  std::vector<Buffer> buffers;
  layer.collect_buffers(buffers);
  for (const Buffer& b : buffers) out.emplace_back(b.name, b.value);
  return out;
}

}  // namespace

TensorArchive export_state(Layer& layer) {
  TensorArchive archive;
  for (auto& [name, t] : named_tensors(layer)) {
    const Shape& s = t->shape();
    StoredTensor stored;
    stored.shape = {s.n, s.h, s.w, s.c};
    stored.data.assign(t->data(), t->data() + t->size());
    if (!archive.tensors.emplace(name, std::move(stored)).second) {
      throw std::logic_error("duplicate tensor name " + name);
    }
  }
  return archive;
}

std::size_t import_state(Layer& layer, const TensorArchive& archive, bool strict) {
  std::size_t loaded = 0;
  for (auto& [name, t] : named_tensors(layer)) {
    const auto it = archive.tensors.find(name);
    if (it == archive.tensors.end()) {
      if (strict) throw std::runtime_error("checkpoint is missing tensor " + name);
      continue;
    }
    if (it->second.data.size() != t->size()) {
      throw std::runtime_error("checkpoint tensor " + name + " has " +
                               std::to_string(it->second.data.size()) + " values, expected " +
                               std::to_string(t->size()));
    }
    std::copy(it->second.data.begin(), it->second.data.end(), t->data());
    ++loaded;
  }
  return loaded;
}

void save_state(Layer& layer, const std::filesystem::path& path,
                const std::map<std::string, std::string>& metadata) {
  TensorArchive archive = export_state(layer);
  archive.metadata = metadata;
  write_safetensors(path, archive);
}

void load_state(Layer& layer, const std::filesystem::path& path, bool strict) {
  import_state(layer, read_safetensors(path), strict);
}

std::vector<Tensor> snapshot_state(Layer& layer) {
  std::vector<Tensor> out;
  for (auto& [name, t] : named_tensors(layer)) out.push_back(*t);
  return out;
}

void restore_state(Layer& layer, const std::vector<Tensor>& snapshot) {
  auto tensors = named_tensors(layer);
  if (tensors.size() != snapshot.size()) throw std::logic_error("snapshot does not match layer");
  for (std::size_t i = 0; i < tensors.size(); ++i) *tensors[i].second = snapshot[i];
}

}  // namespace vmmc::nn
