#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "vmmc/nn/layers.hpp"
#include "vmmc/nn/safetensors.hpp"

namespace vmmc::nn {

// Parameters and buffers of a layer tree, keyed by their hierarchical names.
TensorArchive export_state(Layer& layer);

// Copies matching tensors into the layer. With strict, every parameter and buffer
// must be present with the same element count. Returns the number of tensors loaded.
std::size_t import_state(Layer& layer, const TensorArchive& archive, bool strict = true);

void save_state(Layer& layer, const std::filesystem::path& path,
                const std::map<std::string, std::string>& metadata = {});
void load_state(Layer& layer, const std::filesystem::path& path, bool strict = true);

// In-memory copy used for best-epoch checkpoint selection.
std::vector<Tensor> snapshot_state(Layer& layer);
void restore_state(Layer& layer, const std::vector<Tensor>& snapshot);

}  // namespace vmmc::nn
