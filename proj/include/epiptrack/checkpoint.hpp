#pragma once

// Binary checkpoint: "EPIP", u32 version, u32 JSON length, JSON bytes,
// u32 array count, then per array u32 name length, name, u32 rank, u32 dims,
// f32 data. All integers and floats little-endian.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "epiptrack/nn.hpp"

namespace epiptrack {

inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct NamedArray {
  ag::Shape shape;
  std::vector<float> data;
};

struct Checkpoint {
  nlohmann::json config;
  std::map<std::string, NamedArray> arrays;
};

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline void put_f32(std::string& out, float f) { put_u32(out, std::bit_cast<std::uint32_t>(f)); }

struct Reader {
  const std::string& buf;
  std::size_t pos = 0;

  void need(std::size_t n) const {
    if (pos + n > buf.size()) throw CheckpointError("checkpoint truncated at byte " + std::to_string(pos));
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
    pos += 4;
    return v;
  }
  float f32() { return std::bit_cast<float>(u32()); }
  std::string bytes(std::size_t n) {
    need(n);
    std::string s = buf.substr(pos, n);
    pos += n;
    return s;
  }
};

}  // namespace detail

inline std::string serialize_checkpoint(const Checkpoint& ck) {
  std::string out = "EPIP";
  detail::put_u32(out, kCheckpointVersion);
  const std::string js = ck.config.dump();
  detail::put_u32(out, static_cast<std::uint32_t>(js.size()));
  out += js;
  detail::put_u32(out, static_cast<std::uint32_t>(ck.arrays.size()));
  for (const auto& [name, arr] : ck.arrays) {
    if (ag::numel(arr.shape) != arr.data.size())
      throw CheckpointError("checkpoint array '" + name + "' has inconsistent shape");
    detail::put_u32(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    detail::put_u32(out, static_cast<std::uint32_t>(arr.shape.size()));
    for (auto d : arr.shape) detail::put_u32(out, static_cast<std::uint32_t>(d));
    for (float f : arr.data) detail::put_f32(out, f);
  }
  return out;
}

inline Checkpoint deserialize_checkpoint(const std::string& buf) {
  detail::Reader r{buf};
  if (r.bytes(4) != "EPIP") throw CheckpointError("not a checkpoint (bad magic)");
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion)
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  Checkpoint ck;
  ck.config = nlohmann::json::parse(r.bytes(r.u32()));
  const std::uint32_t count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = r.bytes(r.u32());
    NamedArray arr;
    const std::uint32_t rank = r.u32();
    for (std::uint32_t k = 0; k < rank; ++k) arr.shape.push_back(r.u32());
    const std::size_t n = ag::numel(arr.shape);
    r.need(4 * n);
    arr.data.resize(n);
    for (auto& f : arr.data) f = r.f32();
    ck.arrays.emplace(std::move(name), std::move(arr));
  }
  if (r.pos != buf.size()) throw CheckpointError("trailing bytes after checkpoint arrays");
  return ck;
}

inline void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const std::string bytes = serialize_checkpoint(ck);
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw CheckpointError("cannot write " + tmp.string());
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  }
  std::filesystem::rename(tmp, path);
}

inline Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("cannot open checkpoint " + path.string());
  std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return deserialize_checkpoint(buf);
}

inline NamedArray to_array(const Tensor& t) {
  NamedArray a;
  a.shape = t.shape();
  a.data.reserve(t.numel());
  for (double v : t.data()) a.data.push_back(static_cast<float>(v));
  return a;
}

inline void store_params(Checkpoint& ck, const nn::ParamList& params, const std::string& prefix = "") {
  for (const auto& p : params) ck.arrays[prefix + p.name] = to_array(p.tensor);
}

/// Copies arrays into matching parameters; every parameter must be present
/// with its exact shape.
inline void load_params(const Checkpoint& ck, nn::ParamList params, const std::string& prefix = "") {
  for (auto& p : params) {
    auto it = ck.arrays.find(prefix + p.name);
    if (it == ck.arrays.end()) throw CheckpointError("checkpoint is missing array '" + prefix + p.name + "'");
    if (it->second.shape != p.tensor.shape())
      throw CheckpointError("shape mismatch for '" + p.name + "': checkpoint " + ag::shape_str(it->second.shape) +
                            ", model " + ag::shape_str(p.tensor.shape()));
    auto dst = p.tensor.mutable_data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = it->second.data[i];
  }
}

}  // namespace epiptrack
