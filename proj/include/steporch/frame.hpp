#pragma once

// Wire framing: 32-bit big-endian payload length, one type byte, payload.
// Payloads are capped at 1 MiB.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "steporch/errors.hpp"

namespace steporch {

enum class FrameType : std::uint8_t {
  AudioIn = 0x01,
  TextPartial = 0x02,
  AudioOut = 0x03,
  State = 0x04,
  ToolCall = 0x05,
  ToolResult = 0x06,
  Control = 0x07,
  Metrics = 0x08,
};

inline constexpr std::size_t kFrameHeaderBytes = 5;
inline constexpr std::size_t kMaxFramePayload = 1u << 20;

inline bool is_known_frame_type(std::uint8_t t) { return t >= 0x01 && t <= 0x08; }

inline const char* frame_type_name(std::uint8_t t) {
  switch (t) {
    case 0x01: return "AUDIO_IN";
    case 0x02: return "TEXT_PARTIAL";
    case 0x03: return "AUDIO_OUT";
    case 0x04: return "STATE";
    case 0x05: return "TOOL_CALL";
    case 0x06: return "TOOL_RESULT";
    case 0x07: return "CONTROL";
    case 0x08: return "METRICS";
  }
  return "UNKNOWN";
}

struct Frame {
  std::uint8_t type = 0;
  std::vector<std::uint8_t> payload;

  Frame() = default;
  Frame(std::uint8_t t, std::vector<std::uint8_t> p) : type(t), payload(std::move(p)) {}
  Frame(FrameType t, std::vector<std::uint8_t> p) : type(static_cast<std::uint8_t>(t)), payload(std::move(p)) {}
  Frame(FrameType t, std::string_view text)
      : type(static_cast<std::uint8_t>(t)), payload(text.begin(), text.end()) {}

  bool known() const { return is_known_frame_type(type); }
  FrameType kind() const { return static_cast<FrameType>(type); }
  std::string text() const { return {payload.begin(), payload.end()}; }
  bool operator==(const Frame&) const = default;
};

inline std::vector<std::uint8_t> encode_frame(std::uint8_t type, std::span<const std::uint8_t> payload) {
  if (payload.size() > kMaxFramePayload) {
    throw FrameError("frame: payload of " + std::to_string(payload.size()) + " bytes exceeds the 1 MiB cap");
  }
  const auto n = static_cast<std::uint32_t>(payload.size());
  std::vector<std::uint8_t> out;
  out.reserve(kFrameHeaderBytes + payload.size());
  out.push_back(static_cast<std::uint8_t>(n >> 24));
  out.push_back(static_cast<std::uint8_t>(n >> 16));
  out.push_back(static_cast<std::uint8_t>(n >> 8));
  out.push_back(static_cast<std::uint8_t>(n));
  out.push_back(type);
  out.insert(out.end(), payload.begin(), payload.end());
  return out;
}

inline std::vector<std::uint8_t> encode_frame(const Frame& f) { return encode_frame(f.type, f.payload); }

struct DecodeResult {
  std::optional<Frame> frame;  // empty: need more bytes
  std::size_t consumed = 0;
  std::size_t needed = 0;  // total bytes required when frame is empty
};

// Decodes one frame from the front of `bytes`. Unknown type codes decode
// normally; callers check Frame::known().
inline DecodeResult decode_frame(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < kFrameHeaderBytes) return {std::nullopt, 0, kFrameHeaderBytes};
  const std::size_t n = (std::size_t{bytes[0]} << 24) | (std::size_t{bytes[1]} << 16) |
                        (std::size_t{bytes[2]} << 8) | std::size_t{bytes[3]};
  if (n > kMaxFramePayload) {
    throw FrameError("frame: declared length " + std::to_string(n) + " exceeds the 1 MiB cap");
  }
  if (bytes.size() < kFrameHeaderBytes + n) return {std::nullopt, 0, kFrameHeaderBytes + n};
  Frame f(bytes[4], {bytes.begin() + kFrameHeaderBytes, bytes.begin() + static_cast<std::ptrdiff_t>(kFrameHeaderBytes + n)});
  return {std::move(f), kFrameHeaderBytes + n, 0};
}

// Incremental decoder over an arbitrary byte stream.
class FrameDecoder {
 public:
  std::vector<Frame> feed(std::span<const std::uint8_t> bytes) {
    buf_.insert(buf_.end(), bytes.begin(), bytes.end());
    std::vector<Frame> out;
    std::size_t off = 0;
    for (;;) {
      auto r = decode_frame(std::span<const std::uint8_t>(buf_).subspan(off));
      if (!r.frame) break;
      out.push_back(std::move(*r.frame));
      off += r.consumed;
    }
    buf_.erase(buf_.begin(), buf_.begin() + static_cast<std::ptrdiff_t>(off));
    return out;
  }

  std::size_t buffered() const noexcept { return buf_.size(); }

 private:
  std::vector<std::uint8_t> buf_;
};

}  // namespace steporch
