#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "linedoc/model.hpp"
#include "linedoc/optim.hpp"

namespace linedoc {

// On-disk training snapshot. Layout (little-endian throughout):
//   magic "WKRD" | version u32 | config_len u32 | config JSON bytes
//   | param count u32 | records | moment1 records | moment2 records
//   | adam step u64 | global step u64
// Each record: name_len u32, name bytes, rank u32, dims i32..., values f64...
// Values are raw IEEE-754 doubles, so a save/load round trip is bit exact.

inline constexpr char kCheckpointMagic[4] = {'W', 'K', 'R', 'D'};
inline constexpr uint32_t kCheckpointVersion = 1;

struct CheckpointError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

namespace detail {

template <typename T>
void write_pod(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw CheckpointError("checkpoint: truncated file");
  return v;
}

inline void write_tensor_record(std::ostream& os, const std::string& name,
                                const Shape& shape, const std::vector<double>& values) {
  write_pod<uint32_t>(os, static_cast<uint32_t>(name.size()));
  os.write(name.data(), static_cast<std::streamsize>(name.size()));
  write_pod<uint32_t>(os, static_cast<uint32_t>(shape.size()));
  for (int d : shape) write_pod<int32_t>(os, d);
  os.write(reinterpret_cast<const char*>(values.data()),
           static_cast<std::streamsize>(values.size() * sizeof(double)));
}

inline void read_tensor_record(std::istream& is, std::string& name, Shape& shape,
                               std::vector<double>& values) {
  uint32_t name_len = read_pod<uint32_t>(is);
  name.resize(name_len);
  is.read(name.data(), name_len);
  uint32_t rank = read_pod<uint32_t>(is);
  shape.resize(rank);
  size_t n = 1;
  for (uint32_t i = 0; i < rank; ++i) {
    shape[i] = read_pod<int32_t>(is);
    if (shape[i] <= 0) throw CheckpointError("checkpoint: bad dimension");
    n *= static_cast<size_t>(shape[i]);
  }
  values.resize(n);
  is.read(reinterpret_cast<char*>(values.data()),
          static_cast<std::streamsize>(n * sizeof(double)));
  if (!is) throw CheckpointError("checkpoint: truncated file");
}

inline void write_store(std::ostream& os, const std::map<std::string, Tensor>& m) {
  for (const auto& [name, t] : m)
    write_tensor_record(os, name, t.shape(), t.data());
}

// optimizer moments are stored flat; serialize them as rank-1 records
inline void write_moments(std::ostream& os,
                          const std::map<std::string, std::vector<double>>& m) {
  for (const auto& [name, v] : m)
    write_tensor_record(os, name, {static_cast<int>(v.size())}, v);
}

inline void read_into_store(std::istream& is, std::map<std::string, Tensor>& m,
                            size_t count) {
  std::string name;
  Shape shape;
  std::vector<double> values;
  for (size_t i = 0; i < count; ++i) {
    read_tensor_record(is, name, shape, values);
    auto it = m.find(name);
    if (it == m.end())
      throw CheckpointError("checkpoint: unknown tensor '" + name + "'");
    if (it->second.shape() != shape)
      throw CheckpointError("checkpoint: shape mismatch for '" + name + "'");
    it->second.data() = values;
  }
}

inline void read_into_moments(std::istream& is,
                              std::map<std::string, std::vector<double>>& m,
                              size_t count) {
  std::string name;
  Shape shape;
  std::vector<double> values;
  for (size_t i = 0; i < count; ++i) {
    read_tensor_record(is, name, shape, values);
    auto it = m.find(name);
    if (it == m.end())
      throw CheckpointError("checkpoint: unknown moment '" + name + "'");
    if (it->second.size() != values.size())
      throw CheckpointError("checkpoint: size mismatch for moment '" + name + "'");
    it->second = values;
  }
}

}  // namespace detail

inline void save_checkpoint(const std::filesystem::path& path, const Model& model,
                            const AdamState& adam, uint64_t global_step) {
  // write to a sibling temp file, then rename: a crash never leaves a
  // half-written checkpoint under the target name
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw CheckpointError("checkpoint: cannot open " + tmp.string());
    os.write(kCheckpointMagic, 4);
    detail::write_pod<uint32_t>(os, kCheckpointVersion);
    std::string cfg = model.config().to_json().dump();
    detail::write_pod<uint32_t>(os, static_cast<uint32_t>(cfg.size()));
    os.write(cfg.data(), static_cast<std::streamsize>(cfg.size()));
    const auto& params = model.params().params;
    detail::write_pod<uint32_t>(os, static_cast<uint32_t>(params.size()));
    detail::write_store(os, params);
    detail::write_moments(os, adam.first_moment);
    detail::write_moments(os, adam.second_moment);
    detail::write_pod<uint64_t>(os, static_cast<uint64_t>(adam.step));
    detail::write_pod<uint64_t>(os, global_step);
    if (!os) throw CheckpointError("checkpoint: write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

struct LoadedCheckpoint {
  ModelConfig config;
  uint64_t global_step = 0;
};

// Loads parameters and optimizer moments into an existing model whose
// configuration must match the one stored in the file.
inline LoadedCheckpoint load_checkpoint(const std::filesystem::path& path,
                                        Model& model, AdamState& adam) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("checkpoint: cannot open " + path.string());
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kCheckpointMagic, 4) != 0)
    throw CheckpointError("checkpoint: bad magic in " + path.string());
  uint32_t version = detail::read_pod<uint32_t>(is);
  if (version != kCheckpointVersion)
    throw CheckpointError("checkpoint: unsupported version " + std::to_string(version));
  uint32_t cfg_len = detail::read_pod<uint32_t>(is);
  std::string cfg_str(cfg_len, '\0');
  is.read(cfg_str.data(), cfg_len);
  if (!is) throw CheckpointError("checkpoint: truncated config");
  LoadedCheckpoint out;
  out.config = ModelConfig::from_json(nlohmann::json::parse(cfg_str));
  if (!(out.config == model.config()))
    throw CheckpointError("checkpoint: configuration mismatch; refusing to load");
  uint32_t count = detail::read_pod<uint32_t>(is);
  if (count != model.params().params.size())
    throw CheckpointError("checkpoint: parameter count mismatch");
  detail::read_into_store(is, model.params().params, count);
  detail::read_into_moments(is, adam.first_moment, count);
  detail::read_into_moments(is, adam.second_moment, count);
  adam.step = static_cast<int64_t>(detail::read_pod<uint64_t>(is));
  out.global_step = detail::read_pod<uint64_t>(is);
  return out;
}

// Reads only the stored configuration (for tools that must construct the
// model before loading weights).
inline ModelConfig peek_checkpoint_config(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("checkpoint: cannot open " + path.string());
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kCheckpointMagic, 4) != 0)
    throw CheckpointError("checkpoint: bad magic in " + path.string());
  uint32_t version = detail::read_pod<uint32_t>(is);
  if (version != kCheckpointVersion)
    throw CheckpointError("checkpoint: unsupported version " + std::to_string(version));
  uint32_t cfg_len = detail::read_pod<uint32_t>(is);
  std::string cfg_str(cfg_len, '\0');
  is.read(cfg_str.data(), cfg_len);
  if (!is) throw CheckpointError("checkpoint: truncated config");
  return ModelConfig::from_json(nlohmann::json::parse(cfg_str));
}

}  // namespace linedoc
