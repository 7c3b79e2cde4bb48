#pragma once

// Checkpoint file format: "DGAL" magic, version, JSON metadata, then a named
// table of little-endian float32 tensors. Save -> load -> save is
// byte-identical (tensor order is preserved verbatim).

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "dgal/tensor.hpp"

namespace dgal {

constexpr std::uint32_t kCheckpointVersion = 1;

struct NamedTensor {
  std::string name;
  Shape shape;
  std::vector<float> data;
};

struct Checkpoint {
  std::uint32_t version = kCheckpointVersion;
  nlohmann::json metadata = nlohmann::json::object();
  std::vector<NamedTensor> tensors;

  const NamedTensor& find(const std::string& name) const {
    for (auto& t : tensors)
      if (t.name == name) return t;
    throw std::out_of_range("checkpoint: no tensor named '" + name + "'");
  }

  bool has(const std::string& name) const {
    for (auto& t : tensors)
      if (t.name == name) return true;
    return false;
  }
};

namespace detail {

inline void put_u32(std::ostream& f, std::uint32_t v) {
  char b[4] = {char(v & 0xff), char((v >> 8) & 0xff), char((v >> 16) & 0xff), char(v >> 24)};
  f.write(b, 4);
}

inline std::uint32_t get_u32(std::istream& f) {
  unsigned char b[4];
  f.read(reinterpret_cast<char*>(b), 4);
  if (!f) throw std::runtime_error("checkpoint: truncated file");
  return std::uint32_t(b[0]) | (std::uint32_t(b[1]) << 8) | (std::uint32_t(b[2]) << 16) |
         (std::uint32_t(b[3]) << 24);
}

inline void put_f32(std::ostream& f, float v) {
  std::uint32_t u;
  static_assert(sizeof(u) == sizeof(v));
  std::memcpy(&u, &v, 4);
  put_u32(f, u);
}

inline float get_f32(std::istream& f) {
  std::uint32_t u = get_u32(f);
  float v;
  std::memcpy(&v, &u, 4);
  return v;
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("save_checkpoint: cannot open '" + path + "'");
  f.write("DGAL", 4);
  detail::put_u32(f, ckpt.version);
  std::string meta = ckpt.metadata.dump();
  detail::put_u32(f, std::uint32_t(meta.size()));
  f.write(meta.data(), std::streamsize(meta.size()));
  detail::put_u32(f, std::uint32_t(ckpt.tensors.size()));
  for (auto& t : ckpt.tensors) {
    std::int64_t n = 1;
    for (int e : t.shape) n *= e;
    if (n != std::int64_t(t.data.size()))
      throw std::invalid_argument("save_checkpoint: shape/data mismatch for '" + t.name + "'");
    detail::put_u32(f, std::uint32_t(t.name.size()));
    f.write(t.name.data(), std::streamsize(t.name.size()));
    detail::put_u32(f, 0);  // dtype tag: f32
    detail::put_u32(f, std::uint32_t(t.shape.size()));
    for (int e : t.shape) detail::put_u32(f, std::uint32_t(e));
    for (float v : t.data) detail::put_f32(f, v);
  }
  if (!f) throw std::runtime_error("save_checkpoint: short write to '" + path + "'");
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("load_checkpoint: cannot open '" + path + "'");
  char magic[4];
  f.read(magic, 4);
  if (!f || std::string(magic, 4) != "DGAL")
    throw std::runtime_error("load_checkpoint: bad magic in '" + path + "'");
  Checkpoint ckpt;
  ckpt.version = detail::get_u32(f);
  if (ckpt.version != kCheckpointVersion)
    throw std::runtime_error("load_checkpoint: unsupported version " +
                             std::to_string(ckpt.version));
  std::uint32_t mlen = detail::get_u32(f);
  std::string meta(mlen, '\0');
  f.read(meta.data(), mlen);
  if (!f) throw std::runtime_error("load_checkpoint: truncated metadata");
  ckpt.metadata = nlohmann::json::parse(meta);
  std::uint32_t count = detail::get_u32(f);
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensor t;
    std::uint32_t nlen = detail::get_u32(f);
    t.name.resize(nlen);
    f.read(t.name.data(), nlen);
    std::uint32_t dtype = detail::get_u32(f);
    if (dtype != 0)
      throw std::runtime_error("load_checkpoint: unknown dtype tag for '" + t.name + "'");
    std::uint32_t rank = detail::get_u32(f);
    std::int64_t n = 1;
    for (std::uint32_t r = 0; r < rank; ++r) {
      int e = int(detail::get_u32(f));
      t.shape.push_back(e);
      n *= e;
    }
    t.data.resize(size_t(n));
    for (auto& v : t.data) v = detail::get_f32(f);
    if (!f) throw std::runtime_error("load_checkpoint: truncated tensor '" + t.name + "'");
    ckpt.tensors.push_back(std::move(t));
  }
  return ckpt;
}

// Conversions between live parameter lists and checkpoint entries.
template <typename S>
NamedTensor to_named(const std::string& name, const Tensor<S>& t) {
  NamedTensor n;
  n.name = name;
  n.shape = t.shape();
  n.data.reserve(size_t(t.size()));
  for (auto v : t.values()) n.data.push_back(float(v));
  return n;
}

template <typename S>
void load_into(const NamedTensor& src, Tensor<S> dst) {
  if (src.shape != dst.shape())
    throw std::runtime_error("checkpoint: shape mismatch for '" + src.name + "': file " +
                             shape_str(src.shape) + " vs model " + shape_str(dst.shape()));
  for (std::int64_t i = 0; i < dst.size(); ++i) dst.data()[i] = S(src.data[size_t(i)]);
}

// FNV-1a over parameter names, shapes and f32 payloads; ties metric numbers
// and sampling manifests to one exact set of weights.
template <typename S>
std::string content_hash(const std::map<std::string, Tensor<S>>& params) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&](const void* data, size_t n) {
    const unsigned char* b = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < n; ++i) h = (h ^ b[i]) * 0x100000001b3ULL;
  };
  for (auto& [name, t] : params) {
    mix(name.data(), name.size());
    for (int dim : t.shape()) {
      std::uint32_t d = std::uint32_t(dim);
      mix(&d, 4);
    }
    for (std::int64_t i = 0; i < t.size(); ++i) {
      float v = float(t.values()[size_t(i)]);
      std::uint32_t bits;
      std::memcpy(&bits, &v, 4);
      mix(&bits, 4);
    }
  }
  std::ostringstream os;
  os << std::hex << h;
  return os.str();
}

}  // namespace dgal
