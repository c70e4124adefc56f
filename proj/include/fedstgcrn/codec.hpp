// Binary parameter payloads.
//
// Layout, all integers and values little-endian:
//   "PBND" | u32 version | u8 element bytes | u32 tensor count
//   per tensor: u16 name length | name | u8 module | u8 rank | u32 extent * rank
//   values of every tensor in manifest order (IEEE-754, 4 or 8 bytes each)
// Everything before the values is the manifest; its length is
// manifest_encoded_size().
#pragma once

#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <span>
#include <string>
#include <vector>

#include "fedstgcrn/errors.hpp"
#include "fedstgcrn/params.hpp"

namespace fedstgcrn {

using Bytes = std::vector<std::uint8_t>;

namespace codec_detail {

inline void put_u8(Bytes& out, std::uint8_t v) { out.push_back(v); }

template <typename U>
void put_le(Bytes& out, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> buf) : buf_(buf) {}

  template <typename U>
  U le() {
    need(sizeof(U));
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(static_cast<U>(buf_[pos_ + i]) << (8 * i));
    pos_ += sizeof(U);
    return v;
  }

  std::string str(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(buf_.data() + pos_), n);
    pos_ += n;
    return s;
  }

  std::size_t position() const { return pos_; }
  std::size_t remaining() const { return buf_.size() - pos_; }

 private:
  void need(std::size_t n) const {
    if (buf_.size() - pos_ < n) {
      throw CodecError("truncated buffer: need " + std::to_string(n) + " bytes at offset " + std::to_string(pos_) +
                       ", have " + std::to_string(buf_.size() - pos_));
    }
  }

  std::span<const std::uint8_t> buf_;
  std::size_t pos_ = 0;
};

template <typename T>
void put_value(Bytes& out, T v) {
  if constexpr (sizeof(T) == 4) {
    put_le(out, std::bit_cast<std::uint32_t>(v));
  } else {
    put_le(out, std::bit_cast<std::uint64_t>(v));
  }
}

template <typename T>
T get_value(Reader& r) {
  if constexpr (sizeof(T) == 4) {
    return std::bit_cast<T>(r.le<std::uint32_t>());
  } else {
    return std::bit_cast<T>(r.le<std::uint64_t>());
  }
}

}  // namespace codec_detail

inline Bytes encode_manifest(const Manifest& m) {
  Bytes out;
  out.reserve(manifest_encoded_size(m));
  for (char c : manifest_layout::kMagic) out.push_back(static_cast<std::uint8_t>(c));
  codec_detail::put_le<std::uint32_t>(out, manifest_layout::kVersion);
  codec_detail::put_u8(out, static_cast<std::uint8_t>(m.dtype));
  codec_detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(m.tensors.size()));
  for (const auto& t : m.tensors) {
    if (t.name.size() > 0xFFFF) throw CodecError("tensor name too long: " + t.name.substr(0, 32) + "...");
    if (t.shape.size() > 0xFF) throw CodecError("tensor rank too large: " + t.name);
    codec_detail::put_le<std::uint16_t>(out, static_cast<std::uint16_t>(t.name.size()));
    out.insert(out.end(), t.name.begin(), t.name.end());
    codec_detail::put_u8(out, static_cast<std::uint8_t>(t.module));
    codec_detail::put_u8(out, static_cast<std::uint8_t>(t.shape.size()));
    for (auto extent : t.shape) codec_detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(extent));
  }
  return out;
}

inline Manifest decode_manifest(codec_detail::Reader& r) {
  const std::string magic = r.str(4);
  if (magic != std::string(manifest_layout::kMagic.begin(), manifest_layout::kMagic.end())) {
    throw CodecError("bad payload magic");
  }
  if (const auto version = r.le<std::uint32_t>(); version != manifest_layout::kVersion) {
    throw CodecError("unsupported payload version " + std::to_string(version));
  }
  Manifest m;
  const auto dt = r.le<std::uint8_t>();
  if (dt != 4 && dt != 8) throw CodecError("bad element size " + std::to_string(dt));
  m.dtype = static_cast<DType>(dt);
  const auto count = r.le<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    TensorSpec spec;
    spec.name = r.str(r.le<std::uint16_t>());
    const auto module = r.le<std::uint8_t>();
    if (module > 2) throw CodecError("bad module id " + std::to_string(module) + " for tensor '" + spec.name + "'");
    spec.module = static_cast<ModuleId>(module);
    const auto rank = r.le<std::uint8_t>();
    for (std::uint8_t k = 0; k < rank; ++k) spec.shape.push_back(r.le<std::uint32_t>());
    m.tensors.push_back(std::move(spec));
  }
  return m;
}

inline Manifest decode_manifest(std::span<const std::uint8_t> bytes) {
  codec_detail::Reader r(bytes);
  return decode_manifest(r);
}

// FNV-1a 64 over the encoded manifest, as 16 hex digits.
inline std::string manifest_digest(const Manifest& m) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (auto b : encode_manifest(m)) {
    h ^= b;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

template <typename T>
Bytes serialize_params(const ParamBundle<T>& bundle) {
  const Manifest m = bundle.manifest();
  Bytes out = encode_manifest(m);
  out.reserve(out.size() + m.numel() * sizeof(T));
  for (const auto& e : bundle.entries()) {
    for (T v : e.tensor.values()) codec_detail::put_value<T>(out, v);
  }
  return out;
}

// Decodes a payload and checks it against `expected` (ManifestError on any
// difference). Trailing bytes are rejected.
template <typename T>
ParamBundle<T> deserialize_params(std::span<const std::uint8_t> bytes, const Manifest& expected) {
  codec_detail::Reader r(bytes);
  const Manifest got = decode_manifest(r);
  if (got.dtype != dtype_of<T>()) {
    throw ManifestError("deserialize_params: payload holds " + std::to_string(dtype_bytes(got.dtype)) +
                        "-byte values, caller expects " + std::to_string(sizeof(T)));
  }
  require_same_manifest(expected, got, "deserialize_params");
  if (r.remaining() != got.numel() * sizeof(T)) {
    throw CodecError("deserialize_params: value section is " + std::to_string(r.remaining()) + " bytes, expected " +
                     std::to_string(got.numel() * sizeof(T)));
  }
  ParamBundle<T> bundle;
  for (const auto& spec : got.tensors) {
    std::vector<T> values(shape_numel(spec.shape));
    for (auto& v : values) v = codec_detail::get_value<T>(r);
    bundle.add(spec.name, spec.module, Tensor<T>(spec.shape, std::move(values), true));
  }
  return bundle;
}

// Decodes without an expected manifest (used when loading checkpoints whose
// layout is checked afterwards).
template <typename T>
ParamBundle<T> deserialize_params(std::span<const std::uint8_t> bytes) {
  return deserialize_params<T>(bytes, decode_manifest(bytes));
}

}  // namespace fedstgcrn
