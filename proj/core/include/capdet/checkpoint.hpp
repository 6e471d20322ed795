#pragma once

#include <torch/torch.h>

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

namespace capdet {

// Single-file container: an 8-byte little-endian header length, a JSON
// header mapping tensor name -> {"dtype": "f32", "shape", "offset"} (offset in
// bytes from the start of the payload) plus a "__meta__" object, then the
// little-endian f32 payload.
struct Checkpoint {
  std::vector<std::pair<std::string, torch::Tensor>> tensors;
  nlohmann::json meta = nlohmann::json::object();

  const torch::Tensor* find(const std::string& name) const;
};

// Writes to a temporary sibling and renames it into place.
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);

// Throws DataError for missing, truncated or malformed files.
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Copies tensors into the module's parameters and buffers by name. Throws
// DataError when a parameter is missing or a shape differs.
void load_into(torch::nn::Module& module, const Checkpoint& checkpoint);

// Parameters and buffers of a module as checkpoint tensors.
std::vector<std::pair<std::string, torch::Tensor>> module_tensors(const torch::nn::Module& module);

}  // namespace capdet
