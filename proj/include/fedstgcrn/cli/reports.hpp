// Report files and checkpoints. Numbers are written in shortest round-trip
// form so identical runs produce identical bytes.
#pragma once

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "fedstgcrn/codec.hpp"
#include "fedstgcrn/errors.hpp"
#include "fedstgcrn/training.hpp"

namespace fedstgcrn::cli {

inline std::string fmt_num(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

inline void write_file(const std::filesystem::path& path, const std::string& text) {
  std::error_code ec;
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path(), ec);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

inline Bytes read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  return Bytes(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

// Checkpoint file: "CKPT" | u32 version | f64 val_loss | u64 epoch | u64 round | parameter payload.
namespace checkpoint_layout {
inline constexpr std::uint32_t kVersion = 1;
inline constexpr std::size_t kHeader = 4 + 4 + 8 + 8 + 8;
}  // namespace checkpoint_layout

template <typename T>
Bytes encode_checkpoint(const Checkpoint<T>& ck) {
  Bytes out{'C', 'K', 'P', 'T'};
  codec_detail::put_le<std::uint32_t>(out, checkpoint_layout::kVersion);
  codec_detail::put_value<double>(out, ck.val_loss);
  codec_detail::put_le<std::uint64_t>(out, ck.epoch);
  codec_detail::put_le<std::uint64_t>(out, ck.round);
  const Bytes payload = serialize_params(ck.params);
  out.insert(out.end(), payload.begin(), payload.end());
  return out;
}

// Any damage is reported as a ManifestError: the file cannot be matched to
// the model it is supposed to hold.
template <typename T>
Checkpoint<T> decode_checkpoint(std::span<const std::uint8_t> bytes, const Manifest& expected) {
  try {
    codec_detail::Reader r(bytes);
    if (r.str(4) != "CKPT") throw CodecError("bad checkpoint magic");
    if (r.le<std::uint32_t>() != checkpoint_layout::kVersion) throw CodecError("unsupported checkpoint version");
    Checkpoint<T> ck;
    ck.val_loss = codec_detail::get_value<double>(r);
    ck.epoch = r.le<std::uint64_t>();
    ck.round = r.le<std::uint64_t>();
    ck.params = deserialize_params<T>(bytes.subspan(r.position()), expected);
    return ck;
  } catch (const CodecError& e) {
    throw ManifestError(std::string("checkpoint does not match the model: ") + e.what());
  }
}

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const Checkpoint<T>& ck) {
  const Bytes b = encode_checkpoint(ck);
  write_file(path, std::string(b.begin(), b.end()));
}

template <typename T>
Checkpoint<T> load_checkpoint(const std::filesystem::path& path, const Manifest& expected) {
  const Bytes b = read_file(path);
  try {
    return decode_checkpoint<T>(b, expected);
  } catch (const ManifestError& e) {
    throw ManifestError(path.string() + ": " + e.what());
  }
}

// Minimal CSV table builder.
class Table {
 public:
  explicit Table(std::vector<std::string> header) : columns_(header.size()) { row(header); }

  void row(const std::vector<std::string>& cells) {
    if (cells.size() != columns_) throw std::logic_error("Table: row width mismatch");
    for (std::size_t i = 0; i < cells.size(); ++i) {
      if (i) text_ += ',';
      text_ += cells[i];
    }
    text_ += '\n';
  }

  const std::string& str() const { return text_; }

 private:
  std::size_t columns_;
  std::string text_;
};

}  // namespace fedstgcrn::cli
