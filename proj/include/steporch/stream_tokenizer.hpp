#pragma once

// Streaming audio tokenizer: two parallel fixed-duration segmenters (one per
// codebook) aligned to the same 120 ms grid. Each segment yields exactly one
// interleave group, so emitted output is always a whole number of groups.
//
// The quantizers themselves are stand-ins: a token id is the salted FNV-1a-64
// hash of the segment's little-endian PCM bytes, reduced mod the codebook size.

#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <vector>

#include "steporch/errors.hpp"
#include "steporch/tokens.hpp"

namespace steporch {

inline constexpr std::uint32_t kSampleRateHz = 16000;

struct PcmFrame {
  std::vector<std::int16_t> samples;
  std::uint32_t sample_rate = kSampleRateHz;
  std::int64_t timestamp_ms = 0;

  std::int64_t duration_ms() const {
    return static_cast<std::int64_t>(samples.size()) * 1000 / sample_rate;
  }
};

struct SegmenterConfig {
  std::int64_t segment_ms = 120;
  std::size_t ling_per_segment = kLinguisticPerGroup;
  std::size_t sem_per_segment = kSemanticPerGroup;
  std::uint64_t salt_ling = 0x6c696e67;  // "ling"
  std::uint64_t salt_sem = 0x73656d;     // "sem"

  std::size_t samples_per_segment() const {
    return static_cast<std::size_t>(segment_ms) * kSampleRateHz / 1000;
  }

  void validate() const {
    if (segment_ms != 120) {
      throw ValidationError("segmenter: segment_ms must be 120, got " +
                            std::to_string(segment_ms));
    }
    if (ling_per_segment != kLinguisticPerGroup || sem_per_segment != kSemanticPerGroup) {
      throw ValidationError("segmenter: per-segment counts are fixed at 2 linguistic / 3 semantic");
    }
  }
};

inline constexpr std::uint64_t kFnvOffsetBasis = 0xcbf29ce484222325ULL;
inline constexpr std::uint64_t kFnvPrime = 0x100000001b3ULL;

inline std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes,
                             std::uint64_t state = kFnvOffsetBasis) {
  for (std::uint8_t b : bytes) {
    state ^= b;
    state *= kFnvPrime;
  }
  return state;
}

namespace detail {
inline std::uint64_t fnv1a64_le64(std::uint64_t state, std::uint64_t value) {
  for (int i = 0; i < 8; ++i) {
    state ^= static_cast<std::uint8_t>(value >> (8 * i));
    state *= kFnvPrime;
  }
  return state;
}
}  // namespace detail

// id = FNV-1a-64(salt_le64 || index_le64 || pcm_bytes) mod codebook_size.
inline std::uint32_t encode_segment(std::span<const std::uint8_t> pcm_bytes,
                                    std::uint32_t codebook_size, std::uint64_t salt,
                                    std::uint64_t index) {
  if (codebook_size != kLinguisticCodebookSize && codebook_size != kSemanticCodebookSize) {
    throw ValidationError("encode_segment: codebook size must be 1024 or 4096, got " +
                          std::to_string(codebook_size));
  }
  std::uint64_t h = detail::fnv1a64_le64(kFnvOffsetBasis, salt);
  h = detail::fnv1a64_le64(h, index);
  h = fnv1a64(pcm_bytes, h);
  return static_cast<std::uint32_t>(h % codebook_size);
}

inline std::vector<std::uint8_t> pcm_to_le_bytes(std::span<const std::int16_t> samples) {
  std::vector<std::uint8_t> out(samples.size() * 2);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto u = static_cast<std::uint16_t>(samples[i]);
    out[2 * i] = static_cast<std::uint8_t>(u & 0xff);
    out[2 * i + 1] = static_cast<std::uint8_t>(u >> 8);
  }
  return out;
}

inline std::vector<std::int16_t> le_bytes_to_pcm(std::span<const std::uint8_t> bytes) {
  if (bytes.size() % 2 != 0) {
    throw FormatError("PCM payload has odd byte count " + std::to_string(bytes.size()));
  }
  std::vector<std::int16_t> out(bytes.size() / 2);
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = static_cast<std::int16_t>(static_cast<std::uint16_t>(bytes[2 * i]) |
                                       (static_cast<std::uint16_t>(bytes[2 * i + 1]) << 8));
  }
  return out;
}

// One tokenizer per audio stream; push and flush must be serialized per stream.
class StreamTokenizer {
 public:
  explicit StreamTokenizer(SegmenterConfig config = {}) : config_(config) {
    config_.validate();
  }

  std::vector<AudioToken> push_pcm(const PcmFrame& frame) {
    if (flushed_) throw LifecycleError("stream tokenizer: push after flush");
    if (frame.sample_rate != kSampleRateHz) {
      throw FormatError("stream tokenizer: sample rate must be 16000 Hz, got " +
                        std::to_string(frame.sample_rate));
    }
    if (frame.samples.empty()) throw FormatError("stream tokenizer: empty PCM frame");
    if (have_timestamp_ && frame.timestamp_ms < last_timestamp_ms_) {
      throw FormatError("stream tokenizer: timestamp went backwards (" +
                        std::to_string(frame.timestamp_ms) + " < " +
                        std::to_string(last_timestamp_ms_) + ")");
    }
    have_timestamp_ = true;
    last_timestamp_ms_ = frame.timestamp_ms;

    buffer_.insert(buffer_.end(), frame.samples.begin(), frame.samples.end());
    std::vector<AudioToken> out;
    const std::size_t seg = config_.samples_per_segment();
    std::size_t consumed = 0;
    while (buffer_.size() - consumed >= seg) {
      emit_segment(std::span<const std::int16_t>(buffer_).subspan(consumed, seg), out);
      consumed += seg;
    }
    buffer_.erase(buffer_.begin(), buffer_.begin() + static_cast<std::ptrdiff_t>(consumed));
    return out;
  }

  // Zero-pads a partial final segment and emits its group; terminal afterwards.
  std::vector<AudioToken> flush() {
    if (flushed_) throw LifecycleError("stream tokenizer: double flush");
    flushed_ = true;
    std::vector<AudioToken> out;
    if (!buffer_.empty()) {
      buffer_.resize(config_.samples_per_segment(), 0);
      emit_segment(buffer_, out);
      buffer_.clear();
    }
    return out;
  }

  bool flushed() const noexcept { return flushed_; }
  std::size_t buffered_samples() const noexcept { return buffer_.size(); }
  std::uint64_t segments_emitted() const noexcept { return segment_index_; }
  const SegmenterConfig& config() const noexcept { return config_; }

 private:
  void emit_segment(std::span<const std::int16_t> segment, std::vector<AudioToken>& out) {
    const auto bytes = pcm_to_le_bytes(segment);
    const std::uint64_t k = segment_index_++;
    for (std::size_t j = 0; j < config_.ling_per_segment; ++j) {
      out.push_back(AudioToken::linguistic(encode_segment(
          bytes, kLinguisticCodebookSize, config_.salt_ling, k * config_.ling_per_segment + j)));
    }
    for (std::size_t j = 0; j < config_.sem_per_segment; ++j) {
      out.push_back(AudioToken::semantic(encode_segment(
          bytes, kSemanticCodebookSize, config_.salt_sem, k * config_.sem_per_segment + j)));
    }
  }

  SegmenterConfig config_;
  std::vector<std::int16_t> buffer_;
  std::uint64_t segment_index_ = 0;
  std::int64_t last_timestamp_ms_ = 0;
  bool have_timestamp_ = false;
  bool flushed_ = false;
};

// One-shot tokenization of a complete PCM buffer (push everything, then flush).
inline std::vector<AudioToken> tokenize_pcm(std::span<const std::int16_t> samples,
                                            SegmenterConfig config = {}) {
  StreamTokenizer tok(config);
  std::vector<AudioToken> out;
  if (!samples.empty()) {
    PcmFrame frame{{samples.begin(), samples.end()}, kSampleRateHz, 0};
    out = tok.push_pcm(frame);
  }
  auto tail = tok.flush();
  out.insert(out.end(), tail.begin(), tail.end());
  return out;
}

// --- WAV / raw PCM input -----------------------------------------------------

inline constexpr std::size_t kWavHeaderSize = 44;

namespace detail {
inline std::uint32_t read_le32(std::span<const std::uint8_t> b, std::size_t off) {
  return static_cast<std::uint32_t>(b[off]) | (static_cast<std::uint32_t>(b[off + 1]) << 8) |
         (static_cast<std::uint32_t>(b[off + 2]) << 16) |
         (static_cast<std::uint32_t>(b[off + 3]) << 24);
}
inline std::uint16_t read_le16(std::span<const std::uint8_t> b, std::size_t off) {
  return static_cast<std::uint16_t>(b[off] | (b[off + 1] << 8));
}
inline void put_le32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}
inline void put_le16(std::vector<std::uint8_t>& out, std::uint16_t v) {
  out.push_back(static_cast<std::uint8_t>(v & 0xff));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
}
}  // namespace detail

// Accepts a canonical 44-byte-header WAV (PCM, mono, 16-bit, 16 kHz) or raw
// little-endian s16 PCM. Header fields other than format/rate are ignored.
inline std::vector<std::int16_t> decode_pcm_bytes(std::span<const std::uint8_t> bytes) {
  const bool is_wav = bytes.size() >= kWavHeaderSize && std::memcmp(bytes.data(), "RIFF", 4) == 0 &&
                      std::memcmp(bytes.data() + 8, "WAVE", 4) == 0;
  if (!is_wav) return le_bytes_to_pcm(bytes);
  const auto format = detail::read_le16(bytes, 20);
  const auto channels = detail::read_le16(bytes, 22);
  const auto rate = detail::read_le32(bytes, 24);
  const auto bits = detail::read_le16(bytes, 34);
  if (format != 1 || bits != 16) {
    throw FormatError("WAV: only 16-bit integer PCM is supported (format " +
                      std::to_string(format) + ", " + std::to_string(bits) + " bits)");
  }
  if (channels != 1) throw FormatError("WAV: only mono is supported");
  if (rate != kSampleRateHz) {
    throw FormatError("WAV: sample rate must be 16000 Hz, got " + std::to_string(rate));
  }
  auto payload = bytes.subspan(kWavHeaderSize);
  if (payload.size() % 2 != 0) payload = payload.first(payload.size() - 1);
  return le_bytes_to_pcm(payload);
}

inline std::vector<std::uint8_t> encode_wav(std::span<const std::int16_t> samples) {
  std::vector<std::uint8_t> out;
  const auto data_bytes = static_cast<std::uint32_t>(samples.size() * 2);
  out.reserve(kWavHeaderSize + data_bytes);
  out.insert(out.end(), {'R', 'I', 'F', 'F'});
  detail::put_le32(out, 36 + data_bytes);
  out.insert(out.end(), {'W', 'A', 'V', 'E', 'f', 'm', 't', ' '});
  detail::put_le32(out, 16);
  detail::put_le16(out, 1);
  detail::put_le16(out, 1);
  detail::put_le32(out, kSampleRateHz);
  detail::put_le32(out, kSampleRateHz * 2);
  detail::put_le16(out, 2);
  detail::put_le16(out, 16);
  out.insert(out.end(), {'d', 'a', 't', 'a'});
  detail::put_le32(out, data_bytes);
  const auto pcm = pcm_to_le_bytes(samples);
  out.insert(out.end(), pcm.begin(), pcm.end());
  return out;
}

inline std::vector<std::uint8_t> read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw NotFoundError("cannot open '" + path + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline std::vector<std::int16_t> read_pcm_file(const std::string& path) {
  return decode_pcm_bytes(read_file_bytes(path));
}

}  // namespace steporch
