#pragma once

#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "noduleid/common.hpp"
#include "noduleid/tensor.hpp"

namespace noduleid {

// Self-describing parameter container: magic + version + JSON directory
// (kind, metadata, tensor shapes/offsets) + raw fp32 blobs. Round-trips are
// bit-exact.
namespace checkpoint {

inline constexpr char kMagic[4] = {'N', 'I', 'D', 'C'};
inline constexpr std::uint32_t kVersion = 1;

struct NamedTensor {
  std::string name;
  const Tensor<float>* tensor;
};

inline void save(const std::filesystem::path& path, const std::string& kind,
                 const nlohmann::json& meta, const std::vector<NamedTensor>& tensors) {
  nlohmann::json dir;
  dir["kind"] = kind;
  dir["meta"] = meta;
  dir["tensors"] = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& nt : tensors) {
    dir["tensors"].push_back({{"name", nt.name},
                              {"shape", nt.tensor->shape()},
                              {"offset", offset},
                              {"count", nt.tensor->numel()}});
    offset += static_cast<std::uint64_t>(nt.tensor->numel()) * sizeof(float);
  }
  const std::string header = dir.dump();

  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open checkpoint for writing: " + path.string());
  f.write(kMagic, 4);
  const std::uint32_t version = kVersion;
  f.write(reinterpret_cast<const char*>(&version), sizeof(version));
  const std::uint64_t hlen = header.size();
  f.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
  f.write(header.data(), static_cast<std::streamsize>(header.size()));
  for (const auto& nt : tensors)
    f.write(reinterpret_cast<const char*>(nt.tensor->data()),
            static_cast<std::streamsize>(nt.tensor->numel() * sizeof(float)));
  if (!f) throw std::runtime_error("checkpoint write failed: " + path.string());
}

struct Loaded {
  std::string kind;
  nlohmann::json meta;
  std::map<std::string, Tensor<float>> tensors;
};

inline Loaded load(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw NotFoundError("checkpoint not found: " + path.string());

  char magic[4];
  f.read(magic, 4);
  if (f.gcount() != 4 || std::memcmp(magic, kMagic, 4) != 0)
    throw CorruptCheckpointError("bad checkpoint magic: " + path.string());
  std::uint32_t version = 0;
  f.read(reinterpret_cast<char*>(&version), sizeof(version));
  if (!f || version != kVersion)
    throw CorruptCheckpointError("unsupported checkpoint version " + std::to_string(version) +
                                 " in " + path.string());
  std::uint64_t hlen = 0;
  f.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
  if (!f || hlen == 0 || hlen > (1ull << 30))
    throw CorruptCheckpointError("bad checkpoint header length: " + path.string());
  std::string header(hlen, '\0');
  f.read(header.data(), static_cast<std::streamsize>(hlen));
  if (static_cast<std::uint64_t>(f.gcount()) != hlen)
    throw CorruptCheckpointError("truncated checkpoint header: " + path.string());

  nlohmann::json dir;
  try {
    dir = nlohmann::json::parse(header);
  } catch (const nlohmann::json::exception& e) {
    throw CorruptCheckpointError("bad checkpoint directory in " + path.string() + ": " +
                                 e.what());
  }

  Loaded out;
  try {
    out.kind = dir.at("kind").get<std::string>();
    out.meta = dir.value("meta", nlohmann::json::object());
    for (const auto& td : dir.at("tensors")) {
      const std::string name = td.at("name").get<std::string>();
      const std::vector<int> shape = td.at("shape").get<std::vector<int>>();
      const std::int64_t count = td.at("count").get<std::int64_t>();
      Tensor<float> t(shape);
      if (t.numel() != count)
        throw CorruptCheckpointError("tensor shape/count mismatch for " + name);
      f.read(reinterpret_cast<char*>(t.data()),
             static_cast<std::streamsize>(count * sizeof(float)));
      if (static_cast<std::int64_t>(f.gcount()) != count * static_cast<std::int64_t>(sizeof(float)))
        throw CorruptCheckpointError("truncated checkpoint payload at tensor " + name + " in " +
                                     path.string());
      out.tensors.emplace(name, std::move(t));
    }
  } catch (const nlohmann::json::exception& e) {
    throw CorruptCheckpointError("bad checkpoint directory in " + path.string() + ": " +
                                 e.what());
  }
  return out;
}

}  // namespace checkpoint
}  // namespace noduleid
