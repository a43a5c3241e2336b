#include "steporch/stream_tokenizer.hpp"

#include <gtest/gtest.h>

#include <random>

namespace steporch {
namespace {

// Independent reference: hash one concatenated buffer, byte by byte.
std::uint32_t reference_encode(const std::vector<std::int16_t>& pcm, std::uint32_t size,
                               std::uint64_t salt, std::uint64_t index) {
  std::vector<std::uint8_t> buf;
  for (int i = 0; i < 8; ++i) buf.push_back(static_cast<std::uint8_t>(salt >> (8 * i)));
  for (int i = 0; i < 8; ++i) buf.push_back(static_cast<std::uint8_t>(index >> (8 * i)));
  for (auto s : pcm) {
    buf.push_back(static_cast<std::uint8_t>(static_cast<std::uint16_t>(s) & 0xff));
    buf.push_back(static_cast<std::uint8_t>(static_cast<std::uint16_t>(s) >> 8));
  }
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (auto b : buf) {
    h ^= b;
    h *= 0x100000001b3ULL;
  }
  return static_cast<std::uint32_t>(h % size);
}

std::vector<std::int16_t> random_pcm(std::mt19937_64& rng, std::size_t n) {
  std::vector<std::int16_t> out(n);
  for (auto& s : out) s = static_cast<std::int16_t>(static_cast<std::int64_t>(rng() % 65536) - 32768);
  return out;
}

PcmFrame frame_of(std::vector<std::int16_t> samples, std::int64_t ts = 0) {
  return PcmFrame{std::move(samples), kSampleRateHz, ts};
}

TEST(Fnv1a64Test, KnownVectors) {
  const std::string a = "a";
  const std::string foobar = "foobar";
  EXPECT_EQ(fnv1a64({}), 0xcbf29ce484222325ULL);
  EXPECT_EQ(fnv1a64({reinterpret_cast<const std::uint8_t*>(a.data()), a.size()}), 0xaf63dc4c8601ec8cULL);
  EXPECT_EQ(fnv1a64({reinterpret_cast<const std::uint8_t*>(foobar.data()), foobar.size()}),
            0x85944171f73967e8ULL);
}

// Goldens computed by tests/oracles/fnv_oracle.py.
TEST(EncodeSegmentTest, GoldenValues) {
  const std::vector<std::uint8_t> zero(3840, 0);
  EXPECT_EQ(encode_segment(zero, 1024, 0, 0), 101u);
  EXPECT_EQ(encode_segment(zero, 4096, 0, 0), 101u);
  EXPECT_EQ(encode_segment(zero, 1024, 0, 1), 580u);

  std::vector<std::int16_t> ramp(1920);
  for (int i = 0; i < 1920; ++i) ramp[i] = static_cast<std::int16_t>((i * 37) % 65536 - 32768);
  EXPECT_EQ(encode_segment(pcm_to_le_bytes(ramp), 4096, 0x5EED, 7), 134u);
}

TEST(EncodeSegmentTest, DeterministicAndIndexSensitive) {
  std::mt19937_64 rng(7);
  int differing = 0;
  for (int i = 0; i < 200; ++i) {
    const auto bytes = pcm_to_le_bytes(random_pcm(rng, 1920));
    EXPECT_EQ(encode_segment(bytes, 4096, 3, 0), encode_segment(bytes, 4096, 3, 0));
    differing += encode_segment(bytes, 4096, 3, 0) != encode_segment(bytes, 4096, 3, 1);
  }
  // Collisions within a 4096 codebook are rare; allow a handful.
  EXPECT_GE(differing, 195);
}

TEST(EncodeSegmentTest, RejectsOtherCodebookSizes) {
  EXPECT_THROW(encode_segment({}, 2048, 0, 0), ValidationError);
}

TEST(StreamTokenizerTest, BelowOneSegmentEmitsNothing) {
  StreamTokenizer tok;
  EXPECT_TRUE(tok.push_pcm(frame_of(std::vector<std::int16_t>(1600, 5))).empty());
  EXPECT_EQ(tok.buffered_samples(), 1600u);
}

TEST(StreamTokenizerTest, TwelveHundredMsYieldsFiftyTokens) {
  std::mt19937_64 rng(1);
  StreamTokenizer tok;
  const auto out = tok.push_pcm(frame_of(random_pcm(rng, 19200)));
  ASSERT_EQ(out.size(), 50u);
  const auto split = deinterleave(out);
  EXPECT_EQ(split.linguistic.size(), 20u);
  EXPECT_EQ(split.semantic.size(), 30u);
  EXPECT_TRUE(tok.flush().empty());
}

TEST(StreamTokenizerTest, MatchesReferenceCodec) {
  std::mt19937_64 rng(99);
  const auto pcm = random_pcm(rng, 1920 * 3);
  const SegmenterConfig cfg;
  const auto out = tokenize_pcm(pcm, cfg);
  ASSERT_EQ(out.size(), 15u);
  for (std::size_t k = 0; k < 3; ++k) {
    const std::vector<std::int16_t> seg(pcm.begin() + 1920 * k, pcm.begin() + 1920 * (k + 1));
    EXPECT_EQ(out[5 * k + 0].id(), reference_encode(seg, 1024, cfg.salt_ling, 2 * k));
    EXPECT_EQ(out[5 * k + 1].id(), reference_encode(seg, 1024, cfg.salt_ling, 2 * k + 1));
    for (std::size_t j = 0; j < 3; ++j) {
      EXPECT_EQ(out[5 * k + 2 + j].id(), reference_encode(seg, 4096, cfg.salt_sem, 3 * k + j));
    }
  }
}

TEST(StreamTokenizerTest, FlushPadsPartialSegment) {
  StreamTokenizer tok;
  EXPECT_TRUE(tok.push_pcm(frame_of(std::vector<std::int16_t>(960, 1000))).empty());
  const auto out = tok.flush();
  // Goldens from tests/oracles/fnv_oracle.py with the default salts.
  const std::vector<AudioToken> want{AudioToken::linguistic(717), AudioToken::linguistic(684),
                                     AudioToken::semantic(180), AudioToken::semantic(213),
                                     AudioToken::semantic(2294)};
  EXPECT_EQ(out, want);
}

TEST(StreamTokenizerTest, LifecycleAndFormatErrors) {
  StreamTokenizer tok;
  EXPECT_TRUE(tok.flush().empty());
  EXPECT_THROW(tok.flush(), LifecycleError);
  EXPECT_THROW(tok.push_pcm(frame_of({1, 2, 3})), LifecycleError);

  StreamTokenizer other;
  PcmFrame wrong_rate{{1, 2, 3}, 8000, 0};
  EXPECT_THROW(other.push_pcm(wrong_rate), FormatError);
  EXPECT_THROW(other.push_pcm(frame_of({})), FormatError);
  other.push_pcm(frame_of({1}, 100));
  EXPECT_THROW(other.push_pcm(frame_of({1}, 50)), FormatError);
}

TEST(StreamTokenizerProperty, ChunkingDoesNotChangeOutput) {
  std::mt19937_64 rng(4242);
  for (int stream = 0; stream < 20; ++stream) {
    const auto pcm = random_pcm(rng, 1000 + rng() % 60000);
    const auto batch = tokenize_pcm(pcm);
    for (int trial = 0; trial < 5; ++trial) {
      StreamTokenizer tok;
      std::vector<AudioToken> streamed;
      std::size_t pos = 0;
      std::int64_t ts = 0;
      while (pos < pcm.size()) {
        const std::size_t n = std::min<std::size_t>(pcm.size() - pos, 1 + rng() % 5000);
        auto out = tok.push_pcm(frame_of({pcm.begin() + pos, pcm.begin() + pos + n}, ts));
        ASSERT_EQ(out.size() % kGroupSize, 0u);
        streamed.insert(streamed.end(), out.begin(), out.end());
        pos += n;
        ts += static_cast<std::int64_t>(n) / 16;
      }
      auto tail = tok.flush();
      streamed.insert(streamed.end(), tail.begin(), tail.end());
      ASSERT_EQ(streamed, batch);
    }
  }
}

TEST(WavTest, CanonicalHeaderRoundTrip) {
  std::vector<std::int16_t> pcm{0, 1, -1, 32767, -32768};
  const auto wav = encode_wav(pcm);
  EXPECT_EQ(wav.size(), 44u + 10u);
  EXPECT_EQ(decode_pcm_bytes(wav), pcm);
  // Raw payload without a header decodes as PCM.
  EXPECT_EQ(decode_pcm_bytes(pcm_to_le_bytes(pcm)), pcm);
}

TEST(WavTest, RejectsWrongRateOrFormat) {
  auto wav = encode_wav(std::vector<std::int16_t>(10, 0));
  wav[24] = 0x44;  // 8000 Hz little-endian is 0x1F40
  wav[25] = 0xAC;
  EXPECT_THROW(decode_pcm_bytes(wav), FormatError);
  auto stereo = encode_wav(std::vector<std::int16_t>(10, 0));
  stereo[22] = 2;
  EXPECT_THROW(decode_pcm_bytes(stereo), FormatError);
}

}  // namespace
}  // namespace steporch
