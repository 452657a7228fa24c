#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "gfv/error.hpp"
#include "gfv/network.hpp"
#include "gfv/rng.hpp"

namespace gfv {

// Layout (all integers little-endian):
//   u32 tag length, tag bytes "gfv-ckpt/1"
//   u64 architecture fingerprint
//   u64 training seed
//   u32 tensor count
//   per tensor: u32 name length, name bytes, u8 kind (0 weight, 1 buffer),
//               u32 rank, u64 dims[rank], f64 values[prod(dims)]
//   u64 FNV-1a checksum of every preceding byte
inline constexpr std::string_view kCheckpointFormat = "gfv-ckpt/1";

namespace detail {

class ByteWriter {
 public:
  void u8(std::uint8_t v) { buf_.push_back(static_cast<char>(v)); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void str(std::string_view s) {
    u32(static_cast<std::uint32_t>(s.size()));
    buf_.append(s);
  }
  const std::string& bytes() const { return buf_; }

 private:
  std::string buf_;
};

class ByteReader {
 public:
  explicit ByteReader(std::string_view data) : data_(data) {}

  std::uint8_t u8() {
    need(1);
    return static_cast<std::uint8_t>(data_[pos_++]);
  }
  std::uint32_t u32() {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(u8()) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(u8()) << (8 * i);
    return v;
  }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string str() {
    const std::uint32_t n = u32();
    need(n);
    std::string s(data_.substr(pos_, n));
    pos_ += n;
    return s;
  }
  std::size_t pos() const { return pos_; }
  std::size_t remaining() const { return data_.size() - pos_; }

 private:
  void need(std::size_t n) const {
    if (data_.size() - pos_ < n) fail(ErrorCode::CorruptCheckpoint, "unexpected end of checkpoint data");
  }
  std::string_view data_;
  std::size_t pos_ = 0;
};

}  // namespace detail

template <typename T>
std::string encode_checkpoint(const SiameseParams<T>& p) {
  detail::ByteWriter w;
  w.str(kCheckpointFormat);
  w.u64(p.fingerprint());
  w.u64(p.seed);
  w.u32(static_cast<std::uint32_t>(p.layout.tensors.size()));
  for (const auto& t : p.layout.tensors) {
    w.str(t.name);
    w.u8(t.buffer ? 1 : 0);
    w.u32(static_cast<std::uint32_t>(t.shape.size()));
    for (auto d : t.shape) w.u64(d);
    for (T v : p.view(t)) w.f64(static_cast<double>(v));
  }
  std::string out = w.bytes();
  detail::ByteWriter tail;
  tail.u64(fnv1a64(out));
  return out + tail.bytes();
}

/// Decodes and verifies against the architecture the caller expects.
template <typename T>
SiameseParams<T> decode_checkpoint(std::string_view data, const ArchitectureConfig& arch) {
  if (data.size() < 8) fail(ErrorCode::CorruptCheckpoint, "checkpoint too short");
  const std::string_view body = data.substr(0, data.size() - 8);
  detail::ByteReader tail(data.substr(data.size() - 8));
  detail::ByteReader r(body);
  if (r.str() != kCheckpointFormat) fail(ErrorCode::CorruptCheckpoint, "unknown checkpoint format tag");
  const std::uint64_t fp = r.u64();
  if (fp != arch.fingerprint()) {
    fail(ErrorCode::FingerprintMismatch, "checkpoint was trained for a different architecture");
  }
  if (tail.u64() != fnv1a64(body)) fail(ErrorCode::CorruptCheckpoint, "checksum mismatch");

  SiameseParams<T> p;
  p.arch = arch;
  p.layout = ParamLayout::build(arch);
  p.seed = r.u64();
  p.weights.assign(p.layout.trainable, T(0));
  p.buffers.assign(p.layout.buffers, T(0));
  const std::uint32_t count = r.u32();
  if (count != p.layout.tensors.size()) fail(ErrorCode::CorruptCheckpoint, "tensor count mismatch");
  for (const auto& t : p.layout.tensors) {
    if (r.str() != t.name) fail(ErrorCode::CorruptCheckpoint, "unexpected tensor, wanted " + t.name);
    if ((r.u8() != 0) != t.buffer) fail(ErrorCode::CorruptCheckpoint, "tensor kind mismatch for " + t.name);
    const std::uint32_t rank = r.u32();
    if (rank != t.shape.size()) fail(ErrorCode::CorruptCheckpoint, "rank mismatch for " + t.name);
    for (auto d : t.shape)
      if (r.u64() != d) fail(ErrorCode::CorruptCheckpoint, "shape mismatch for " + t.name);
    auto dst = p.view(t);
    for (auto& v : dst) v = static_cast<T>(r.f64());
  }
  if (r.remaining() != 0) fail(ErrorCode::CorruptCheckpoint, "trailing bytes in checkpoint");
  for (const auto& c : p.layout.conv) {
    for (int ch = 0; ch < c.out_maps; ++ch) {
      if (!(p.buffers[c.running_var + static_cast<std::size_t>(ch)] >= T(0))) {
        fail(ErrorCode::CorruptCheckpoint, "negative running variance");
      }
    }
  }
  return p;
}

template <typename T>
void save_checkpoint(const SiameseParams<T>& p, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorCode::IoError, "cannot write " + path.string());
  const std::string bytes = encode_checkpoint(p);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) fail(ErrorCode::IoError, "write failed: " + path.string());
}

template <typename T = float>
SiameseParams<T> load_checkpoint(const std::filesystem::path& path, const ArchitectureConfig& arch) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::FileNotFound, path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  const std::string data = ss.str();
  return decode_checkpoint<T>(data, arch);
}

}  // namespace gfv
