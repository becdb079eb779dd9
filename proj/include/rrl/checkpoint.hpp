#pragma once

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "rrl/nn.hpp"
#include "rrl/tensor.hpp"

namespace rrl {

static_assert(std::endian::native == std::endian::little,
              "checkpoint blobs are little-endian; big-endian hosts unsupported");

/// Parameter checkpoint: `manifest.json` with names, shapes and byte offsets,
/// plus `params.bin`, one little-endian float32 blob. Round-trips bit-exactly.
inline void save_checkpoint(const std::filesystem::path& dir,
                            const std::vector<std::string>& names,
                            const std::vector<const Tensor*>& tensors) {
  if (names.size() != tensors.size())
    throw std::invalid_argument("save_checkpoint: name/tensor count mismatch");
  std::filesystem::create_directories(dir);
  nlohmann::json manifest;
  manifest["format"] = "rrl-checkpoint";
  manifest["version"] = 1;
  auto& plist = manifest["params"] = nlohmann::json::array();
  uint64_t offset = 0;
  std::ofstream blob(dir / "params.bin", std::ios::binary | std::ios::trunc);
  if (!blob) throw std::runtime_error("save_checkpoint: cannot write " + (dir / "params.bin").string());
  for (size_t i = 0; i < tensors.size(); ++i) {
    const Tensor& t = *tensors[i];
    plist.push_back({{"name", names[i]}, {"shape", t.shape}, {"offset", offset}});
    blob.write(reinterpret_cast<const char*>(t.data.data()),
               static_cast<std::streamsize>(t.data.size() * sizeof(float)));
    offset += t.data.size() * sizeof(float);
  }
  manifest["total_bytes"] = offset;
  std::ofstream mf(dir / "manifest.json", std::ios::trunc);
  mf << manifest.dump(2) << "\n";
  if (!blob.good() || !mf.good()) throw std::runtime_error("save_checkpoint: write failed");
}

inline std::map<std::string, Tensor> load_checkpoint(const std::filesystem::path& dir) {
  std::ifstream mf(dir / "manifest.json");
  if (!mf) throw std::runtime_error("load_checkpoint: missing " + (dir / "manifest.json").string());
  nlohmann::json manifest = nlohmann::json::parse(mf);
  if (manifest.value("format", "") != "rrl-checkpoint")
    throw std::runtime_error("load_checkpoint: not a checkpoint manifest");
  if (manifest.value("version", 0) != 1)
    throw std::runtime_error("load_checkpoint: unsupported version");
  std::ifstream blob(dir / "params.bin", std::ios::binary);
  if (!blob) throw std::runtime_error("load_checkpoint: missing " + (dir / "params.bin").string());
  std::map<std::string, Tensor> out;
  for (const auto& entry : manifest.at("params")) {
    const std::string name = entry.at("name").get<std::string>();
    const std::vector<int> shape = entry.at("shape").get<std::vector<int>>();
    const uint64_t offset = entry.at("offset").get<uint64_t>();
    Tensor t(shape);
    blob.seekg(static_cast<std::streamoff>(offset));
    blob.read(reinterpret_cast<char*>(t.data.data()),
              static_cast<std::streamsize>(t.data.size() * sizeof(float)));
    if (!blob)
      throw std::runtime_error("load_checkpoint: truncated blob reading '" + name + "' at offset " +
                               std::to_string(offset));
    out.emplace(name, std::move(t));
  }
  return out;
}

inline void save_network(const std::filesystem::path& dir, const Network& net) {
  std::vector<const Tensor*> tensors = net.param_tensors();
  save_checkpoint(dir, net.param_names(), tensors);
}

/// Loads parameters into an already-built network; shapes must match.
inline void load_network(const std::filesystem::path& dir, Network& net) {
  auto loaded = load_checkpoint(dir);
  auto names = net.param_names();
  auto tensors = net.param_tensors();
  for (size_t i = 0; i < names.size(); ++i) {
    auto it = loaded.find(names[i]);
    if (it == loaded.end())
      throw std::runtime_error("load_network: checkpoint lacks parameter '" + names[i] + "'");
    if (it->second.shape != tensors[i]->shape)
      throw std::runtime_error("load_network: shape mismatch for '" + names[i] + "'");
    *tensors[i] = std::move(it->second);
  }
}

}  // namespace rrl
