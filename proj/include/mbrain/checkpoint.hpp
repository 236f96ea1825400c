#pragma once

// Named-tensor checkpoint files.
//
// Layout (little-endian):
//   "MBCK"  u32 version  u64 header_bytes  header JSON  payload
// The header carries the training state (step, seed, config hash), a
// payload checksum and one manifest entry per tensor: name, shape, dtype
// and byte offset into the payload.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mbrain/layers.hpp"
#include "mbrain/signal.hpp"
#include "mbrain/synthetic.hpp"

namespace mbrain {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ConfigHashMismatch : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};

enum class TensorDtype { float64, float32 };

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct TensorEntry {
  std::string name;
  std::size_t rows = 0, cols = 0;
  TensorDtype dtype = TensorDtype::float64;
  std::uint64_t offset = 0;

  std::size_t bytes() const { return rows * cols * (dtype == TensorDtype::float64 ? 8 : 4); }
};

struct CheckpointHeader {
  std::size_t step = 0;
  std::uint64_t seed = 0;
  std::string config_hash;
  std::vector<TensorEntry> tensors;
  nlohmann::json extra = nlohmann::json::object();
};

/// float64 keeps the round trip bitwise; float32 halves the file size.
inline void save_checkpoint(const std::filesystem::path& path, const ParamList& params, const CheckpointHeader& state,
                            TensorDtype dtype = TensorDtype::float64) {
  std::string payload;
  nlohmann::json manifest = nlohmann::json::array();
  for (const auto& [name, var] : params.items) {
    const Matrix& m = var->value;
    manifest.push_back({{"name", name},
                        {"shape", {m.rows, m.cols}},
                        {"dtype", dtype == TensorDtype::float64 ? "float64" : "float32"},
                        {"offset", payload.size()}});
    for (double v : m.data) {
      if (dtype == TensorDtype::float64)
        detail::put_le<std::uint64_t>(payload, std::bit_cast<std::uint64_t>(v));
      else
        detail::put_le<std::uint32_t>(payload, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
    }
  }
  const nlohmann::json header{{"step", state.step},
                              {"seed", state.seed},
                              {"config_hash", state.config_hash},
                              {"payload_bytes", payload.size()},
                              {"payload_fnv1a", hex64(fnv1a(payload))},
                              {"tensors", manifest},
                              {"extra", state.extra}};
  const std::string h = header.dump();
  std::string out = "MBCK";
  detail::put_le<std::uint32_t>(out, kCheckpointVersion);
  detail::put_le<std::uint64_t>(out, static_cast<std::uint64_t>(h.size()));
  out += h;
  out += payload;
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary);
    if (!f) throw CheckpointError("cannot write checkpoint " + tmp);
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw CheckpointError("short write to " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

struct LoadOptions {
  std::string expected_config_hash;  // empty = do not check
  bool allow_hash_mismatch = false;
};

namespace detail {

inline CheckpointHeader parse_checkpoint_unchecked(const std::string& bytes, const std::string& where, std::string_view& payload) {
  if (bytes.size() < 16 || bytes.compare(0, 4, "MBCK") != 0) throw CheckpointError(where + ": not a checkpoint (bad magic)");
  std::size_t pos = 4;
  const auto version = get_le<std::uint32_t>(bytes, pos);
  if (version != kCheckpointVersion) throw CheckpointError(where + ": unsupported checkpoint version " + std::to_string(version));
  const std::uint64_t hlen = get_le<std::uint64_t>(bytes, pos);
  if (hlen > bytes.size() - pos) throw CheckpointError(where + ": truncated header");
  nlohmann::json h;
  try {
    h = nlohmann::json::parse(bytes.substr(pos, hlen));
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(where + ": corrupt header: " + e.what());
  }
  pos += hlen;
  const std::uint64_t plen = h.at("payload_bytes").get<std::uint64_t>();
  if (bytes.size() - pos != plen)
    throw CheckpointError(where + ": payload is " + std::to_string(bytes.size() - pos) + " bytes, header says " +
                          std::to_string(plen) + " (truncated or corrupt file)");
  payload = std::string_view(bytes).substr(pos);
  if (hex64(fnv1a(payload)) != h.at("payload_fnv1a").get<std::string>())
    throw CheckpointError(where + ": payload checksum mismatch");
  CheckpointHeader out;
  out.step = h.at("step").get<std::size_t>();
  out.seed = h.at("seed").get<std::uint64_t>();
  out.config_hash = h.at("config_hash").get<std::string>();
  out.extra = h.value("extra", nlohmann::json::object());
  for (const auto& t : h.at("tensors")) {
    TensorEntry e;
    e.name = t.at("name").get<std::string>();
    e.rows = t.at("shape").at(0).get<std::size_t>();
    e.cols = t.at("shape").at(1).get<std::size_t>();
    const auto dt = t.at("dtype").get<std::string>();
    if (dt == "float64")
      e.dtype = TensorDtype::float64;
    else if (dt == "float32")
      e.dtype = TensorDtype::float32;
    else
      throw CheckpointError(where + ": tensor " + e.name + " has unknown dtype " + dt);
    e.offset = t.at("offset").get<std::uint64_t>();
    if (e.offset > payload.size() || e.bytes() > payload.size() - e.offset)
      throw CheckpointError(where + ": tensor " + e.name + " extends past the payload");
    out.tensors.push_back(std::move(e));
  }
  return out;
}

inline CheckpointHeader parse_checkpoint(const std::string& bytes, const std::string& where, std::string_view& payload) {
  try {
    return parse_checkpoint_unchecked(bytes, where, payload);
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(where + ": malformed header field: " + e.what());
  }
}

}  // namespace detail

inline CheckpointHeader read_checkpoint_header(const std::filesystem::path& path) {
  const std::string bytes = detail::read_file(path);
  std::string_view payload;
  return detail::parse_checkpoint(bytes, path.string(), payload);
}

/// Loads every tensor of `params` by name. All checks run before any
/// parameter is written, so a failed load leaves `params` untouched.
inline CheckpointHeader load_checkpoint(const std::filesystem::path& path, const ParamList& params, const LoadOptions& opt = {}) {
  const std::string bytes = detail::read_file(path);
  std::string_view payload;
  CheckpointHeader h = detail::parse_checkpoint(bytes, path.string(), payload);
  if (!opt.expected_config_hash.empty() && h.config_hash != opt.expected_config_hash && !opt.allow_hash_mismatch)
    throw ConfigHashMismatch(path.string() + " was written under config hash " + h.config_hash + " but the current config hashes to " +
                             opt.expected_config_hash + "; loading would mix incompatible settings (pass --allow-hash-mismatch to override)");
  std::vector<const TensorEntry*> matched;
  for (const auto& [name, var] : params.items) {
    const TensorEntry* e = nullptr;
    for (const auto& t : h.tensors)
      if (t.name == name) e = &t;
    if (!e) throw CheckpointError(path.string() + ": tensor " + name + " missing from checkpoint");
    if (e->rows != var->rows() || e->cols != var->cols())
      throw ShapeError("checkpoint tensor " + name + " has shape [" + std::to_string(e->rows) + "x" + std::to_string(e->cols) +
                       "] but the model expects " + shape_str(var->value));
    matched.push_back(e);
  }
  for (std::size_t k = 0; k < matched.size(); ++k) {
    const TensorEntry& e = *matched[k];
    Matrix& dst = params.items[k].second->value;
    const std::string raw(payload.substr(e.offset, e.bytes()));
    std::size_t pos = 0;
    for (double& v : dst.data) {
      if (e.dtype == TensorDtype::float64)
        v = std::bit_cast<double>(detail::get_le<std::uint64_t>(raw, pos));
      else
        v = std::bit_cast<float>(detail::get_le<std::uint32_t>(raw, pos));
    }
  }
  return h;
}

}  // namespace mbrain
