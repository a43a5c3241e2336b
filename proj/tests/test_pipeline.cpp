#include "steporch/pipeline.hpp"

#include <gtest/gtest.h>

#include <cmath>

namespace steporch {
namespace {

struct Recorder : PipelineObserver {
  std::vector<std::string> trace;
  std::vector<ControllerState> states{ControllerState::Silence};
  std::vector<std::pair<SpecId, std::int64_t>> audio;
  std::vector<std::string> errors;
  std::vector<std::pair<CallId, std::int64_t>> tool_results;

  void on_trace(const std::string& line) override { trace.push_back(line); }
  void on_state(ControllerState s, std::int64_t) override { states.push_back(s); }
  void on_audio_out(SpecId spec, const AudioChunk&, std::int64_t at) override { audio.emplace_back(spec, at); }
  void on_backend_error(const std::string& what, std::int64_t) override { errors.push_back(what); }
  void on_tool_result(CallId id, const std::string&, bool, std::int64_t at) override {
    tool_results.emplace_back(id, at);
  }
};

std::vector<std::int16_t> tone(std::int64_t ms) {
  std::vector<std::int16_t> pcm(static_cast<std::size_t>(ms) * 16);
  for (std::size_t i = 0; i < pcm.size(); ++i) {
    pcm[i] = static_cast<std::int16_t>(std::lround(8000.0 * std::sin(2.0 * 3.14159265358979 * 440.0 * i / 16000.0)));
  }
  return pcm;
}

struct Harness {
  Recorder rec;
  std::shared_ptr<ScriptedToolExecutor> tools = std::make_shared<ScriptedToolExecutor>();
  std::unique_ptr<DuplexPipeline> pipe;

  explicit Harness(std::vector<std::string> responses, std::int64_t chat_first = 500, bool speculate = true,
                   std::int64_t tts_first = 100) {
    PipelineConfig cfg;
    cfg.controller.speculation_enabled = speculate;
    PipelineBackends b;
    b.chat = std::make_shared<ScriptedChatBackend>(std::move(responses), LatencyModel{chat_first, 20, 0, 0});
    b.asr = std::make_shared<ScriptedAsrBackend>(std::vector<std::string>{"what is the weather"},
                                                 LatencyModel{150, 0, 0, 0});
    b.tts = std::make_shared<MockTtsBackend>(LatencyModel{tts_first, 40, 0, 0});
    b.tools = tools;
    pipe = std::make_unique<DuplexPipeline>(cfg, b, &rec);
  }

  void speak(std::int64_t ms) { pipe->push_pcm(tone(ms)); }
  void silence(std::int64_t ms) { pipe->push_silence(ms); }

  std::int64_t trace_time(const std::string& kind) const {
    for (const auto& l : rec.trace) {
      if (l.find("\t" + kind + "\t") != std::string::npos) return std::stoll(l);
    }
    return -1;
  }
};

using S = ControllerState;

TEST(PipelineTest, SinglePauseTurnWalksAllStates) {
  Harness h({"Sunny and warm."});
  h.speak(1000);
  h.silence(800);
  h.pipe->drain();
  const std::vector<S> want{S::Silence, S::UserSpeaking, S::UserPaused, S::BotReplying, S::Silence};
  EXPECT_EQ(h.rec.states, want);
  EXPECT_EQ(h.trace_time("VadPauseDetected"), 1200);
  EXPECT_EQ(h.trace_time("VadEndOfSpeech"), 1700);
  ASSERT_FALSE(h.rec.audio.empty());
  EXPECT_EQ(h.rec.audio.front().second, 1800);
  EXPECT_TRUE(h.pipe->idle());
}

TEST(PipelineTest, SpeculationSavesTheConfirmGap) {
  for (std::int64_t first : {0, 300, 500, 800}) {
    Harness on({"Sunny and warm."}, first, true);
    Harness off({"Sunny and warm."}, first, false);
    for (auto* h : {&on, &off}) {
      h->speak(1000);
      h->silence(800);
      h->pipe->drain();
    }
    const auto lat_on = on.rec.audio.front().second - on.trace_time("VadEndOfSpeech");
    const auto lat_off = off.rec.audio.front().second - off.trace_time("VadEndOfSpeech");
    EXPECT_EQ(lat_on, std::max<std::int64_t>(0, first - 500) + 100) << first;
    EXPECT_EQ(lat_off, first + 100) << first;
    EXPECT_EQ(lat_off - lat_on, std::min<std::int64_t>(first, 500)) << first;
  }
}

TEST(PipelineTest, TranscriptReplacesAudio) {
  Harness h({"ok"});
  h.speak(1000);
  h.silence(800);
  h.pipe->drain();
  const auto turns = h.pipe->controller().history().turns();
  ASSERT_EQ(turns.size(), 2u);
  EXPECT_EQ(turns[0].role, Role::User);
  EXPECT_FALSE(turns[0].audio.has_value());
  // 14 segments of 120 ms complete before end of speech at 1700 ms.
  EXPECT_EQ(estimate_tokens(turns[0].text), compacted_token_target(70));
  EXPECT_EQ(turns[1].text, "ok");
}

TEST(PipelineTest, BargeInTruncatesReply) {
  Harness h({std::string(800, 'a')}, 100);
  h.speak(1000);
  h.silence(800);
  h.speak(400);
  h.silence(800);
  h.pipe->drain();
  EXPECT_EQ(h.trace_time("AbortPlayback"), 1800);
  const auto turns = h.pipe->controller().history().turns();
  ASSERT_GE(turns.size(), 3u);
  EXPECT_EQ(turns[1].role, Role::Assistant);
  EXPECT_TRUE(turns[1].truncated);
  EXPECT_GT(turns[1].text.size(), 0u);
  EXPECT_LT(turns[1].text.size(), 800u);
  // No audio from the aborted reply after the cut beyond one in-flight chunk.
  int late = 0;
  for (auto [spec, at] : h.rec.audio) late += spec == 1 && at > 1800;
  EXPECT_LE(late, 1);
  EXPECT_EQ(h.pipe->state(), S::Silence);
}

TEST(PipelineTest, ToolLatencyDoesNotDelayPreMarkerAudio) {
  std::vector<std::int64_t> first_audio;
  for (std::int64_t latency : {0, 500, 2000, 10000}) {
    Harness h({"Let me check the weather.<tool_call>weather{\"city\":\"HK\"}</tool_call> One moment."});
    h.tools->add_global({"weather", latency, "{\"temp_c\":25}"});
    h.speak(1000);
    h.silence(800);
    h.pipe->drain();
    ASSERT_EQ(h.rec.tool_results.size(), 1u);
    EXPECT_GE(h.rec.tool_results[0].second, 1700 + latency);
    ASSERT_FALSE(h.rec.audio.empty());
    first_audio.push_back(h.rec.audio.front().second);
    const auto turns = h.pipe->controller().history().turns();
    EXPECT_EQ(std::count_if(turns.begin(), turns.end(), [](const Turn& t) { return t.role == Role::Tool; }), 1);
  }
  for (auto t : first_audio) EXPECT_EQ(t, first_audio.front());
}

TEST(PipelineTest, ReplayIsDeterministic) {
  auto run = [] {
    Harness h({"one two three four", "five six"});
    h.speak(600);
    h.silence(300);
    h.speak(500);
    h.silence(900);
    h.pipe->drain();
    h.speak(800);
    h.silence(900);
    h.pipe->drain();
    return h.rec.trace;
  };
  const auto a = run();
  EXPECT_EQ(a, run());
  std::int64_t prev = 0;
  for (const auto& line : a) {
    const auto t = std::stoll(line);
    EXPECT_GE(t, prev);
    prev = t;
  }
}

class FailingChat : public ChatBackend {
 public:
  BackendStream<std::string> generate(const ChatRequest&, std::int64_t) override {
    throw BackendError("connection refused", true);
  }
};

TEST(PipelineTest, ChatFailureKeepsSessionAlive) {
  Recorder rec;
  PipelineBackends b;
  b.chat = std::make_shared<FailingChat>();
  b.asr = std::make_shared<ScriptedAsrBackend>(std::vector<std::string>{}, LatencyModel{});
  b.tts = std::make_shared<MockTtsBackend>(LatencyModel{});
  b.tools = std::make_shared<ScriptedToolExecutor>();
  DuplexPipeline pipe({}, b, &rec);
  pipe.push_pcm(tone(1000));
  pipe.push_silence(800);
  pipe.drain();
  ASSERT_EQ(rec.errors.size(), 1u);
  EXPECT_EQ(pipe.state(), S::Silence);
}

TEST(PipelineTest, RequiresAllBackends) {
  EXPECT_THROW(DuplexPipeline({}, PipelineBackends{}), ValidationError);
}

}  // namespace
}  // namespace steporch
