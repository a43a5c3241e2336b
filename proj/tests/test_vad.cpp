#include "steporch/vad.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <random>

namespace steporch {
namespace {

constexpr std::size_t kFrame = 320;

std::vector<VadEvent> run_timeline(const std::vector<std::pair<bool, std::int64_t>>& spans,
                                   VadConfig cfg = {}) {
  EnergyVad vad(cfg);
  std::vector<VadEvent> out;
  std::int64_t t = 0;
  for (auto [voiced, ms] : spans) {
    for (std::int64_t f = 0; f < ms / cfg.frame_ms; ++f) {
      PcmFrame frame{std::vector<std::int16_t>(kFrame, voiced ? 8000 : 0), kSampleRateHz, t};
      auto ev = vad.push_frame(frame);
      out.insert(out.end(), ev.begin(), ev.end());
      t += cfg.frame_ms;
    }
  }
  return out;
}

using K = VadEventKind;

TEST(VadTest, SilenceOnlyHasNoEvents) { EXPECT_TRUE(run_timeline({{false, 1000}}).empty()); }

TEST(VadTest, ToneThenLongSilence) {
  const std::vector<VadEvent> want{{K::SpeechStart, 0}, {K::PauseDetected, 1200}, {K::EndOfSpeech, 1700}};
  EXPECT_EQ(run_timeline({{true, 1000}, {false, 800}}), want);
}

TEST(VadTest, ShortGapResumes) {
  const std::vector<VadEvent> want{{K::SpeechStart, 0},     {K::PauseDetected, 1200},
                                   {K::SpeechResume, 1300}, {K::PauseDetected, 2500},
                                   {K::EndOfSpeech, 3000}};
  EXPECT_EQ(run_timeline({{true, 1000}, {false, 300}, {true, 1000}, {false, 800}}), want);
}

TEST(VadTest, GapShorterThanPauseIsIgnored) {
  const std::vector<VadEvent> want{{K::SpeechStart, 0}, {K::PauseDetected, 2300}, {K::EndOfSpeech, 2800}};
  EXPECT_EQ(run_timeline({{true, 1000}, {false, 180}, {true, 920}, {false, 700}}), want);
}

TEST(VadTest, WrongFrameSizeIsFormatError) {
  EnergyVad vad;
  EXPECT_THROW(vad.push_frame(PcmFrame{std::vector<std::int16_t>(319, 0), kSampleRateHz, 0}), FormatError);
  EXPECT_THROW(vad.push_frame(PcmFrame{std::vector<std::int16_t>(160, 0), 8000, 0}), FormatError);
}

TEST(VadConfigTest, RejectsBadThresholds) {
  VadConfig c;
  c.pause_threshold_ms = 700;
  EXPECT_THROW(c.validate(), ValidationError);
  c = {};
  c.end_threshold_ms = 710;
  EXPECT_THROW(c.validate(), ValidationError);
  c = {};
  c.energy_threshold = 0.0;
  EXPECT_THROW(c.validate(), ValidationError);
}

TEST(FrameEnergyTest, Cases) {
  EXPECT_DOUBLE_EQ(frame_energy(std::vector<std::int16_t>(kFrame, 0)), 0.0);
  EXPECT_NEAR(frame_energy(std::vector<std::int16_t>(kFrame, 32767)), 1.0, 1e-4);
  std::vector<std::int16_t> square(kFrame);
  for (std::size_t i = 0; i < kFrame; ++i) square[i] = (i / 8) % 2 ? 16384 : -16384;
  EXPECT_NEAR(frame_energy(square), 0.25, 1e-4);
  EXPECT_THROW(frame_energy(std::span<const std::int16_t>{}), FormatError);
}

// Checks SpeechStart (PauseDetected SpeechResume)* PauseDetected EndOfSpeech
// per utterance, allowing the final utterance to be unterminated.
void expect_grammar(const std::vector<VadEvent>& ev, const VadConfig& cfg) {
  enum { Idle, Speaking, Paused } st = Idle;
  std::int64_t last_pause = -1;
  for (const auto& e : ev) {
    switch (e.kind) {
      case K::SpeechStart:
        ASSERT_EQ(st, Idle);
        st = Speaking;
        break;
      case K::PauseDetected:
        ASSERT_EQ(st, Speaking);
        st = Paused;
        last_pause = e.at_ms;
        break;
      case K::SpeechResume:
        ASSERT_EQ(st, Paused);
        st = Speaking;
        break;
      case K::EndOfSpeech:
        ASSERT_EQ(st, Paused);
        ASSERT_EQ(e.at_ms - last_pause, cfg.confirm_gap_ms());
        st = Idle;
        break;
    }
  }
}

TEST(VadProperty, GrammarAndTimestampLawOnRandomTimelines) {
  std::mt19937_64 rng(555);
  const VadConfig cfg;
  ASSERT_EQ(cfg.confirm_gap_ms(), 500);
  int ends = 0;
  for (int iter = 0; iter < 500; ++iter) {
    std::vector<std::pair<bool, std::int64_t>> spans;
    bool voiced = rng() % 2;
    for (int i = 0, n = 1 + static_cast<int>(rng() % 12); i < n; ++i) {
      spans.emplace_back(voiced, 20 * static_cast<std::int64_t>(1 + rng() % 60));
      voiced = !voiced;
    }
    const auto ev = run_timeline(spans, cfg);
    expect_grammar(ev, cfg);
    for (const auto& e : ev) ends += e.kind == K::EndOfSpeech;
  }
  EXPECT_GT(ends, 50);
}

TEST(VadProperty, NoisySamplesStillObeyGrammar) {
  std::mt19937_64 rng(9);
  std::normal_distribution<double> noise(0.0, 1.0);
  VadConfig cfg;
  EnergyVad vad(cfg);
  std::vector<VadEvent> ev;
  for (int f = 0; f < 3000; ++f) {
    const double amp = (f / 40) % 3 == 0 ? 3000.0 : 200.0;
    std::vector<std::int16_t> s(kFrame);
    for (auto& x : s) x = static_cast<std::int16_t>(std::clamp(amp * noise(rng), -32768.0, 32767.0));
    auto out = vad.push_frame(PcmFrame{std::move(s), kSampleRateHz, 20LL * f});
    ev.insert(ev.end(), out.begin(), out.end());
  }
  expect_grammar(ev, cfg);
}

}  // namespace
}  // namespace steporch
