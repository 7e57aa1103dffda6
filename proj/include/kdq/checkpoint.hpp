// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "kdq/tensor.hpp"

namespace kdq {

// Little-endian primitive I/O. Explicit byte order keeps files portable.
namespace io {

inline void write_bytes(std::ostream& os, const void* p, size_t n) {
  os.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

template <typename T>
void write_le(std::ostream& os, T v) {
  static_assert(std::is_integral_v<T>);
  unsigned char buf[sizeof(T)];
  auto u = static_cast<std::make_unsigned_t<T>>(v);
  for (size_t i = 0; i < sizeof(T); ++i) buf[i] = static_cast<unsigned char>(u >> (8 * i));
  write_bytes(os, buf, sizeof(T));
}

inline void write_f32_le(std::ostream& os, float v) { write_le(os, std::bit_cast<uint32_t>(v)); }
inline void write_f64_le(std::ostream& os, double v) { write_le(os, std::bit_cast<uint64_t>(v)); }

template <typename T>
bool read_le(std::istream& is, T& v) {
  static_assert(std::is_integral_v<T>);
  unsigned char buf[sizeof(T)];
  if (!is.read(reinterpret_cast<char*>(buf), sizeof(T))) return false;
  std::make_unsigned_t<T> u = 0;
  for (size_t i = 0; i < sizeof(T); ++i) u |= std::make_unsigned_t<T>(buf[i]) << (8 * i);
  v = static_cast<T>(u);
  return true;
}

inline bool read_f32_le(std::istream& is, float& v) {
  uint32_t u;
  if (!read_le(is, u)) return false;
  v = std::bit_cast<float>(u);
  return true;
}

inline bool read_f64_le(std::istream& is, double& v) {
  uint64_t u;
  if (!read_le(is, u)) return false;
  v = std::bit_cast<double>(u);
  return true;
}

inline void write_string(std::ostream& os, const std::string& s) {
  write_le<uint32_t>(os, static_cast<uint32_t>(s.size()));
  write_bytes(os, s.data(), s.size());
}

inline bool read_string(std::istream& is, std::string& s, uint32_t max_len = 1u << 20) {
  uint32_t n;
  if (!read_le(is, n) || n > max_len) return false;
  s.resize(n);
  return static_cast<bool>(is.read(s.data(), n));
}

}  // namespace io

inline constexpr uint32_t kCheckpointVersion = 1;
inline constexpr char kCheckpointMagic[8] = {'K', 'D', 'Q', 'C', 'K', 'P', 'T', '\0'};

/**
 * Save named parameters: header (magic, version, config digest), then per
 * parameter its name, shape, and raw little-endian float32 data.
 */
inline void save_checkpoint(const std::filesystem::path& path, const std::vector<TensorPtr>& params,
                            uint64_t config_digest) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open checkpoint for writing: " + path.string());
  io::write_bytes(os, kCheckpointMagic, 8);
  io::write_le<uint32_t>(os, kCheckpointVersion);
  io::write_le<uint64_t>(os, config_digest);
  io::write_le<uint32_t>(os, static_cast<uint32_t>(params.size()));
  for (const auto& p : params) {
    io::write_string(os, p->name);
    io::write_le<uint8_t>(os, static_cast<uint8_t>(p->shape.size()));
    for (int d : p->shape) io::write_le<int32_t>(os, d);
    for (float v : p->data) io::write_f32_le(os, v);
  }
  if (!os) throw FormatError("short write on checkpoint: " + path.string());
}

struct CheckpointEntry {
  std::string name;
  std::vector<int> shape;
  std::vector<float> data;
};

struct Checkpoint {
  uint32_t version = 0;
  uint64_t config_digest = 0;
  std::vector<CheckpointEntry> entries;

  const CheckpointEntry* find(const std::string& name) const {
    for (const auto& e : entries)
      if (e.name == name) return &e;
    return nullptr;
  }
};

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open checkpoint: " + path.string());
  char magic[8];
  if (!is.read(magic, 8) || std::memcmp(magic, kCheckpointMagic, 8) != 0)
    throw FormatError("not a checkpoint file: " + path.string());
  Checkpoint ck;
  uint32_t n = 0;
  if (!io::read_le(is, ck.version) || ck.version != kCheckpointVersion)
    throw FormatError("unsupported checkpoint version in " + path.string());
  if (!io::read_le(is, ck.config_digest) || !io::read_le(is, n))
    throw FormatError("truncated checkpoint header: " + path.string());
  ck.entries.resize(n);
  for (auto& e : ck.entries) {
    uint8_t nd = 0;
    if (!io::read_string(is, e.name) || !io::read_le(is, nd))
      throw FormatError("truncated checkpoint entry: " + path.string());
    e.shape.resize(nd);
    for (auto& d : e.shape)
      if (!io::read_le(is, d)) throw FormatError("truncated shape: " + path.string());
    e.data.resize(static_cast<size_t>(numel_of(e.shape)));
    for (auto& v : e.data)
      if (!io::read_f32_le(is, v)) throw FormatError("truncated tensor data: " + path.string());
  }
  return ck;
}

/// Copy checkpoint entries into live parameters; names and shapes must match.
inline void load_into_params(const Checkpoint& ck, const std::vector<TensorPtr>& params) {
  for (const auto& p : params) {
    const CheckpointEntry* e = ck.find(p->name);
    if (!e) throw FormatError("checkpoint missing parameter '" + p->name + "'");
    if (e->shape != p->shape)
      throw FormatError("checkpoint shape mismatch for '" + p->name + "': " + shape_str(e->shape) +
                        " vs " + shape_str(p->shape));
    p->data = e->data;
  }
}

/// Content hash of any file (used for run-ledger provenance).
inline uint64_t file_content_hash(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot hash missing file: " + path.string());
  uint64_t h = 1469598103934665603ull;
  char buf[65536];
  while (is.read(buf, sizeof buf) || is.gcount() > 0)
    h = fnv1a64(buf, static_cast<size_t>(is.gcount()), h);
  return h;
}

}  // namespace kdq
