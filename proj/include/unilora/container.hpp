// Copyright 2026 The unilora Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Flat binary tensor container shared by base weights, adapters and voided
// bundles.
//
//   offset 0   8 bytes  magic "ULORABIN"
//   offset 8   u32      format version (1)
//   offset 12  u32      scalar width in bytes (4 = float, 8 = double)
//   offset 16  u64      manifest length in bytes
//   manifest:  u32 entry count
//              per entry: u32 name length, name bytes, u64 rows, u64 cols,
//                         u64 byte offset into the payload
//              u32 metadata length, metadata bytes (UTF-8 JSON)
//   payload:   raw little-endian scalars, entries in manifest order
//
// All integers are little-endian.

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "unilora/tensor.hpp"

namespace unilora {

static_assert(std::endian::native == std::endian::little, "container I/O assumes a little-endian host");

inline constexpr char kContainerMagic[8] = {'U', 'L', 'O', 'R', 'A', 'B', 'I', 'N'};
inline constexpr std::uint32_t kContainerVersion = 1;
inline constexpr std::size_t kContainerHeaderBytes = 16;

template <typename T>
struct TensorContainer {
  std::vector<std::pair<std::string, Matrix<T>>> tensors;
  nlohmann::json metadata = nlohmann::json::object();

  void add(std::string name, Matrix<T> m) { tensors.emplace_back(std::move(name), std::move(m)); }

  const Matrix<T>* find(std::string_view name) const {
    for (const auto& [n, m] : tensors) {
      if (n == name) return &m;
    }
    return nullptr;
  }

  const Matrix<T>& at(std::string_view name) const {
    if (const auto* m = find(name)) return *m;
    throw Error("container: missing tensor '" + std::string(name) + "'");
  }
};

namespace detail {

class ByteWriter {
 public:
  template <typename I>
  void put(I v) {
    const auto* p = reinterpret_cast<const std::byte*>(&v);
    out_.insert(out_.end(), p, p + sizeof(I));
  }
  void put_bytes(const void* data, std::size_t n) {
    const auto* p = static_cast<const std::byte*>(data);
    out_.insert(out_.end(), p, p + n);
  }
  void put_string(const std::string& s) {
    put(static_cast<std::uint32_t>(s.size()));
    put_bytes(s.data(), s.size());
  }
  std::vector<std::byte>& bytes() { return out_; }

 private:
  std::vector<std::byte> out_;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::byte> in) : in_(in) {}
  template <typename I>
  I get() {
    need(sizeof(I));
    I v;
    std::memcpy(&v, in_.data() + pos_, sizeof(I));
    pos_ += sizeof(I);
    return v;
  }
  std::string get_string() {
    const auto n = get<std::uint32_t>();
    need(n);
    std::string s(reinterpret_cast<const char*>(in_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  void need(std::size_t n) const {
    if (pos_ + n > in_.size()) throw Error("container: truncated input");
  }
  std::size_t pos() const { return pos_; }
  void seek(std::size_t p) { pos_ = p; }
  std::span<const std::byte> data() const { return in_; }

 private:
  std::span<const std::byte> in_;
  std::size_t pos_ = 0;
};

}  // namespace detail

template <typename T>
std::vector<std::byte> encode_container(const TensorContainer<T>& c) {
  detail::ByteWriter manifest;
  manifest.put(static_cast<std::uint32_t>(c.tensors.size()));
  std::uint64_t offset = 0;
  for (const auto& [name, m] : c.tensors) {
    manifest.put_string(name);
    manifest.put(static_cast<std::uint64_t>(m.rows()));
    manifest.put(static_cast<std::uint64_t>(m.cols()));
    manifest.put(offset);
    offset += m.byte_size();
  }
  manifest.put_string(c.metadata.dump());

  detail::ByteWriter w;
  w.put_bytes(kContainerMagic, sizeof(kContainerMagic));
  w.put(kContainerVersion);
  w.put(static_cast<std::uint32_t>(sizeof(T)));
  w.put(static_cast<std::uint64_t>(manifest.bytes().size()));
  w.put_bytes(manifest.bytes().data(), manifest.bytes().size());
  for (const auto& entry : c.tensors) w.put_bytes(entry.second.storage().data(), entry.second.byte_size());
  return std::move(w.bytes());
}

template <typename T>
TensorContainer<T> decode_container(std::span<const std::byte> bytes) {
  detail::ByteReader r(bytes);
  r.need(kContainerHeaderBytes);
  if (std::memcmp(bytes.data(), kContainerMagic, sizeof(kContainerMagic)) != 0) throw Error("container: bad magic");
  r.seek(sizeof(kContainerMagic));
  const auto version = r.get<std::uint32_t>();
  if (version != kContainerVersion) throw Error("container: unsupported version " + std::to_string(version));
  const auto width = r.get<std::uint32_t>();
  if (width != sizeof(T)) {
    throw Error("container: scalar width " + std::to_string(width) + " does not match requested precision");
  }
  const auto manifest_len = r.get<std::uint64_t>();
  const std::size_t manifest_start = r.pos();
  r.need(manifest_len);
  const std::size_t payload_start = manifest_start + manifest_len;

  TensorContainer<T> c;
  const auto count = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    auto name = r.get_string();
    const auto rows = r.get<std::uint64_t>();
    const auto cols = r.get<std::uint64_t>();
    const auto off = r.get<std::uint64_t>();
    const std::size_t nbytes = rows * cols * sizeof(T);
    if (payload_start + off + nbytes > bytes.size()) throw Error("container: payload for '" + name + "' truncated");
    std::vector<T> data(rows * cols);
    if (nbytes) std::memcpy(data.data(), bytes.data() + payload_start + off, nbytes);
    c.add(std::move(name), Matrix<T>(rows, cols, std::move(data)));
  }
  const auto meta = r.get_string();
  if (r.pos() != payload_start) throw Error("container: manifest length mismatch");
  c.metadata = meta.empty() ? nlohmann::json::object() : nlohmann::json::parse(meta);
  return c;
}

inline void write_bytes(const std::string& path, std::span<const std::byte> bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error("cannot open '" + path + "' for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw Error("write failed for '" + path + "'");
}

inline std::vector<std::byte> read_bytes(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("cannot open '" + path + "'");
  std::vector<char> raw((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  std::vector<std::byte> out(raw.size());
  if (!raw.empty()) std::memcpy(out.data(), raw.data(), raw.size());
  return out;
}

}  // namespace unilora
