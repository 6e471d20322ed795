#include "capdet/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <string>

#include "capdet/error.hpp"

namespace capdet {

static_assert(std::endian::native == std::endian::little, "checkpoint payload assumes a little-endian host");

namespace {

constexpr const char* kMetaKey = "__meta__";

}  // namespace

const torch::Tensor* Checkpoint::find(const std::string& name) const {
  for (const auto& [n, t] : tensors) {
    if (n == name) return &t;
  }
  return nullptr;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint) {
  nlohmann::json header = nlohmann::json::object();
  std::vector<torch::Tensor> payload;
  std::uint64_t offset = 0;
  for (const auto& [name, tensor] : checkpoint.tensors) {
    if (name == kMetaKey) throw ConfigError("checkpoint: reserved tensor name " + name);
    if (header.contains(name)) throw ConfigError("checkpoint: duplicate tensor name " + name);
    auto t = tensor.detach().to(torch::kFloat32).contiguous();
    header[name] = {{"dtype", "f32"}, {"shape", t.sizes().vec()}, {"offset", offset}};
    offset += static_cast<std::uint64_t>(t.numel()) * sizeof(float);
    payload.push_back(t);
  }
  header[kMetaKey] = checkpoint.meta;
  const std::string text = header.dump();
  const std::uint64_t length = text.size();

  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write checkpoint " + tmp.string());
    out.write(reinterpret_cast<const char*>(&length), sizeof(length));
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& t : payload) {
      out.write(reinterpret_cast<const char*>(t.data_ptr<float>()),
                static_cast<std::streamsize>(t.numel() * sizeof(float)));
    }
    out.flush();
    if (!out) throw DataError("failed writing checkpoint " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("checkpoint not found: " + path.string());
  std::uint64_t length = 0;
  in.read(reinterpret_cast<char*>(&length), sizeof(length));
  const auto file_size = std::filesystem::file_size(path);
  if (!in || length > file_size - sizeof(length)) throw DataError("checkpoint header truncated: " + path.string());
  std::string text(length, '\0');
  in.read(text.data(), static_cast<std::streamsize>(length));
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw DataError("checkpoint header is not valid JSON: " + path.string() + ": " + e.what());
  }
  const std::uint64_t payload_start = sizeof(length) + length;
  const std::uint64_t payload_size = file_size - payload_start;

  Checkpoint ck;
  if (header.contains(kMetaKey)) ck.meta = header[kMetaKey];
  std::vector<std::pair<std::uint64_t, std::string>> order;
  for (const auto& [name, entry] : header.items()) {
    if (name == kMetaKey) continue;
    order.emplace_back(entry.at("offset").get<std::uint64_t>(), name);
  }
  std::sort(order.begin(), order.end());
  for (const auto& [offset, name] : order) {
    const auto& entry = header[name];
    if (entry.value("dtype", "") != "f32") throw DataError("checkpoint tensor " + name + " is not f32");
    auto shape = entry.at("shape").get<std::vector<int64_t>>();
    auto t = torch::empty(shape, torch::kFloat32);
    const auto bytes = static_cast<std::uint64_t>(t.numel()) * sizeof(float);
    if (offset + bytes > payload_size) throw DataError("checkpoint payload truncated at tensor " + name);
    in.seekg(static_cast<std::streamoff>(payload_start + offset));
    in.read(reinterpret_cast<char*>(t.data_ptr<float>()), static_cast<std::streamsize>(bytes));
    if (!in) throw DataError("checkpoint payload unreadable at tensor " + name);
    ck.tensors.emplace_back(name, t);
  }
  return ck;
}

void load_into(torch::nn::Module& module, const Checkpoint& checkpoint) {
  torch::NoGradGuard no_grad;
  auto assign = [&](const std::string& name, torch::Tensor& target) {
    const auto* src = checkpoint.find(name);
    if (src == nullptr) throw DataError("checkpoint is missing " + name);
    if (src->sizes() != target.sizes()) throw DataError("checkpoint shape mismatch for " + name);
    target.copy_(*src);
  };
  for (auto& p : module.named_parameters()) assign(p.key(), p.value());
  for (auto& b : module.named_buffers()) assign(b.key(), b.value());
}

std::vector<std::pair<std::string, torch::Tensor>> module_tensors(const torch::nn::Module& module) {
  std::vector<std::pair<std::string, torch::Tensor>> out;
  for (const auto& p : module.named_parameters()) out.emplace_back(p.key(), p.value());
  for (const auto& b : module.named_buffers()) out.emplace_back(b.key(), b.value());
  return out;
}

}  // namespace capdet
