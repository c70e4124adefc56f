// Round protocol messages and their wire form.
//
// Frame: u32 big-endian body length, then the body:
//   header lines "key=value\n" from a fixed key set, an empty line, payload.
// Payloads are either an encoded manifest (HELLO) or a serialized parameter
// bundle (GLOBAL_PARAMS, LOCAL_PARAMS). Nothing else can travel: unknown
// header keys and payloads on payload-free types are rejected on decode.
#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "fedstgcrn/codec.hpp"
#include "fedstgcrn/errors.hpp"

namespace fedstgcrn {

enum class MessageType : std::uint8_t { Hello, GlobalParams, LocalParams, RoundDone, Shutdown };

inline std::string_view message_type_name(MessageType t) {
  switch (t) {
    case MessageType::Hello: return "HELLO";
    case MessageType::GlobalParams: return "GLOBAL_PARAMS";
    case MessageType::LocalParams: return "LOCAL_PARAMS";
    case MessageType::RoundDone: return "ROUND_DONE";
    case MessageType::Shutdown: return "SHUTDOWN";
  }
  return "?";
}

inline MessageType parse_message_type(std::string_view s) {
  for (auto t : {MessageType::Hello, MessageType::GlobalParams, MessageType::LocalParams, MessageType::RoundDone,
                 MessageType::Shutdown}) {
    if (message_type_name(t) == s) return t;
  }
  throw CodecError("unknown message type '" + std::string(s) + "'");
}

// What each type may carry besides the round number and sender.
inline bool carries_payload(MessageType t) {
  return t == MessageType::Hello || t == MessageType::GlobalParams || t == MessageType::LocalParams;
}

// The complete set of header keys a message can have.
inline constexpr std::array<std::string_view, 5> kHeaderKeys{"type", "round", "sender", "digest", "improved"};

struct Message {
  MessageType type = MessageType::Hello;
  std::uint64_t round = 0;
  std::string sender;
  std::string digest;             // manifest digest of the payload, if any
  std::optional<bool> improved;   // ROUND_DONE only
  Bytes payload;
};

namespace message_detail {

inline void check_sender(const std::string& s) {
  if (s.empty() || s.size() > 64) throw CodecError("message sender must have 1..64 characters");
  for (char c : s) {
    const bool ok = (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || (c >= '0' && c <= '9') || c == '_' ||
                    c == '-' || c == '.';
    if (!ok) throw CodecError("message sender '" + s + "' has a character outside [A-Za-z0-9_.-]");
  }
}

inline void check_shape(const Message& m) {
  check_sender(m.sender);
  if (!carries_payload(m.type) && !m.payload.empty()) {
    throw CodecError(std::string(message_type_name(m.type)) + " cannot carry a payload");
  }
  if (carries_payload(m.type) && m.payload.empty()) {
    throw CodecError(std::string(message_type_name(m.type)) + " requires a payload");
  }
  if (m.improved.has_value() != (m.type == MessageType::RoundDone)) {
    throw CodecError("the improved flag belongs to ROUND_DONE only");
  }
}

}  // namespace message_detail

// Body without the length prefix.
inline Bytes encode_message(const Message& m) {
  message_detail::check_shape(m);
  std::string header = "type=" + std::string(message_type_name(m.type)) + "\nround=" + std::to_string(m.round) +
                       "\nsender=" + m.sender + "\n";
  if (carries_payload(m.type)) header += "digest=" + manifest_digest(decode_manifest(m.payload)) + "\n";
  if (m.improved) header += std::string("improved=") + (*m.improved ? "1" : "0") + "\n";
  header += "\n";
  Bytes out(header.begin(), header.end());
  out.insert(out.end(), m.payload.begin(), m.payload.end());
  return out;
}

inline Message decode_message(std::span<const std::uint8_t> body) {
  const std::string_view text(reinterpret_cast<const char*>(body.data()), body.size());
  const auto end = text.find("\n\n");
  if (end == std::string_view::npos) throw CodecError("message header is not terminated");
  std::array<std::optional<std::string>, kHeaderKeys.size()> fields;
  std::size_t pos = 0;
  while (pos <= end) {
    const auto nl = text.find('\n', pos);
    const std::string_view line = text.substr(pos, nl - pos);
    pos = nl + 1;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) throw CodecError("malformed header line '" + std::string(line) + "'");
    const auto key = line.substr(0, eq);
    std::size_t k = 0;
    while (k < kHeaderKeys.size() && kHeaderKeys[k] != key) ++k;
    if (k == kHeaderKeys.size()) throw CodecError("header key '" + std::string(key) + "' is not allowed");
    if (fields[k]) throw CodecError("duplicate header key '" + std::string(key) + "'");
    fields[k] = std::string(line.substr(eq + 1));
  }
  auto required = [&](std::size_t k) -> const std::string& {
    if (!fields[k]) throw CodecError("missing header key '" + std::string(kHeaderKeys[k]) + "'");
    return *fields[k];
  };

  Message m;
  m.type = parse_message_type(required(0));
  const std::string& round = required(1);
  if (round.empty() || round.find_first_not_of("0123456789") != std::string::npos) {
    throw CodecError("bad round number '" + round + "'");
  }
  m.round = std::stoull(round);
  m.sender = required(2);
  if (fields[4]) {
    if (*fields[4] != "0" && *fields[4] != "1") throw CodecError("bad improved flag '" + *fields[4] + "'");
    m.improved = *fields[4] == "1";
  }
  m.payload.assign(body.begin() + static_cast<std::ptrdiff_t>(end + 2), body.end());
  message_detail::check_shape(m);
  if (carries_payload(m.type)) {
    m.digest = required(3);
    if (manifest_digest(decode_manifest(m.payload)) != m.digest) throw CodecError("payload does not match header digest");
  } else if (fields[3]) {
    throw CodecError(std::string(message_type_name(m.type)) + " cannot carry a digest");
  }
  return m;
}

// Length-prefixed frame.
inline Bytes encode_frame(const Message& m) {
  const Bytes body = encode_message(m);
  if (body.size() > 0xFFFFFFFFull) throw CodecError("message too large for a frame");
  const auto n = static_cast<std::uint32_t>(body.size());
  Bytes out(4 + body.size());
  for (int k = 0; k < 4; ++k) out[k] = static_cast<std::uint8_t>(n >> (24 - 8 * k));
  std::copy(body.begin(), body.end(), out.begin() + 4);
  return out;
}

inline std::uint32_t frame_length(std::span<const std::uint8_t, 4> prefix) {
  return (std::uint32_t{prefix[0]} << 24) | (std::uint32_t{prefix[1]} << 16) | (std::uint32_t{prefix[2]} << 8) |
         std::uint32_t{prefix[3]};
}

inline Message decode_frame(std::span<const std::uint8_t> frame) {
  if (frame.size() < 4) throw CodecError("frame shorter than its length prefix");
  const std::uint32_t n = frame_length(frame.first<4>());
  if (frame.size() - 4 != n) {
    throw CodecError("frame length prefix says " + std::to_string(n) + " bytes, got " + std::to_string(frame.size() - 4));
  }
  return decode_message(frame.subspan(4));
}

}  // namespace fedstgcrn
