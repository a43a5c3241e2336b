#include "steporch/gateway.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <future>
#include <numbers>

#include "steporch/stream_tokenizer.hpp"

namespace steporch {
namespace {

const std::vector<std::string> kSinglePauseStates{"Silence", "UserSpeaking", "UserPaused", "BotReplying",
                                                  "Silence"};

std::vector<std::int16_t> tone_then_silence(std::int64_t tone_ms, std::int64_t silence_ms) {
  std::vector<std::int16_t> pcm(static_cast<std::size_t>(tone_ms + silence_ms) * 16, 0);
  for (std::size_t i = 0; i < static_cast<std::size_t>(tone_ms) * 16; ++i) {
    pcm[i] = static_cast<std::int16_t>(std::lround(8000.0 * std::sin(2.0 * std::numbers::pi * 330.0 * i / 16000.0)));
  }
  return pcm;
}

std::vector<std::int16_t> fixture_pcm() {
  return read_pcm_file(std::string(STEPORCH_SOURCE_DIR) + "/fixtures/tone_1s_silence_800ms.wav");
}

std::vector<std::string> states(const std::vector<Frame>& frames) {
  std::vector<std::string> out;
  for (const auto& f : frames) {
    if (f.kind() == FrameType::State) out.push_back(f.text());
  }
  return out;
}

std::size_t count(const std::vector<Frame>& frames, FrameType t) {
  return static_cast<std::size_t>(std::count_if(frames.begin(), frames.end(), [t](const Frame& f) { return f.kind() == t; }));
}

Frame end_frame() { return json_frame(FrameType::Control, {{"op", "end"}}); }

std::vector<Frame> chunked_audio(std::span<const std::int16_t> pcm, std::size_t samples) {
  std::vector<Frame> out;
  for (std::size_t off = 0; off < pcm.size(); off += samples) {
    out.push_back(audio_in_frame(pcm.subspan(off, std::min(samples, pcm.size() - off))));
  }
  return out;
}

std::vector<Frame> run_offline(const SessionConfig& cfg, const std::vector<Frame>& input) {
  CollectingSink sink;
  GatewaySession s(cfg, sink);
  for (const auto& f : input) {
    if (s.handle(f) == GatewaySession::Verdict::Close) break;
  }
  return sink.frames;
}

TEST(GatewayFixture, WavMatchesGeneratedTone) { EXPECT_EQ(fixture_pcm(), tone_then_silence(1000, 800)); }

TEST(GatewaySession, SinglePauseStateSequence) {
  auto input = chunked_audio(fixture_pcm(), 320);
  input.push_back(end_frame());
  const auto out = run_offline({}, input);
  EXPECT_EQ(states(out), kSinglePauseStates);
  EXPECT_GT(count(out, FrameType::TextPartial), 0u);
  EXPECT_GT(count(out, FrameType::AudioOut), 0u);
  const auto& last = out.back();
  ASSERT_EQ(last.kind(), FrameType::Control);
  EXPECT_EQ(nlohmann::json::parse(last.text())["op"], "end_ack");
}

TEST(GatewaySession, LatencyMetricAndAudioHeader) {
  auto input = chunked_audio(fixture_pcm(), 1600);
  input.push_back(end_frame());
  const auto out = run_offline({}, input);
  std::optional<nlohmann::json> latency;
  std::optional<AudioOutPayload> first_audio;
  for (const auto& f : out) {
    if (f.kind() == FrameType::Metrics && !latency) latency = nlohmann::json::parse(f.text());
    if (f.kind() == FrameType::AudioOut && !first_audio) first_audio = parse_audio_out(f);
  }
  ASSERT_TRUE(latency && first_audio);
  // End of speech at 1700 ms; chat finished speculatively, TTS adds 100 ms.
  EXPECT_EQ((*latency)["type"], "latency");
  EXPECT_EQ((*latency)["end_of_speech_ms"], 1700);
  EXPECT_EQ((*latency)["latency_ms"], 100);
  EXPECT_EQ(first_audio->at_ms, 1800);
  EXPECT_EQ(first_audio->chunk_index, 0u);
  EXPECT_EQ(first_audio->pcm.size(), static_cast<std::size_t>(kAudioChunkMs) * 16);
}

TEST(GatewaySession, OutputIndependentOfInputChunking) {
  const auto pcm = fixture_pcm();
  std::vector<Frame> reference;
  for (std::size_t chunk : {std::size_t{1}, std::size_t{320}, std::size_t{777}, pcm.size()}) {
    auto input = chunked_audio(pcm, chunk);
    input.push_back(end_frame());
    const auto out = run_offline({}, input);
    if (reference.empty()) {
      reference = out;
    } else {
      EXPECT_EQ(out, reference) << chunk;
    }
  }
}

TEST(GatewaySession, DeterministicPerSeed) {
  SessionConfig cfg;
  cfg.latency.chat.jitter_ms = 300;
  auto input = chunked_audio(tone_then_silence(1000, 800), 640);
  const auto more = chunked_audio(tone_then_silence(600, 900), 640);
  input.insert(input.end(), more.begin(), more.end());
  input.push_back(end_frame());
  cfg.seed = 1;
  const auto a = run_offline(cfg, input);
  EXPECT_EQ(run_offline(cfg, input), a);
  cfg.seed = 2;
  EXPECT_NE(run_offline(cfg, input), a);
}

TEST(GatewaySession, ConfigureReseedsBeforeAudio) {
  SessionConfig cfg;
  cfg.latency.chat.jitter_ms = 300;
  auto input = chunked_audio(tone_then_silence(1000, 800), 640);
  input.push_back(end_frame());
  cfg.seed = 9;
  const auto direct = run_offline(cfg, input);
  cfg.seed = 0;
  input.insert(input.begin(), json_frame(FrameType::Control, {{"op", "configure"}, {"seed", 9}}));
  EXPECT_EQ(run_offline(cfg, input), direct);
}

TEST(GatewaySession, AdvanceMovesTheClock) {
  CollectingSink sink;
  GatewaySession s({}, sink);
  EXPECT_EQ(s.handle(json_frame(FrameType::Control, {{"op", "advance"}, {"ms", 250}})),
            GatewaySession::Verdict::Continue);
  EXPECT_EQ(s.pipeline().now(), 250);
  // Audio sent afterwards starts at the clock.
  s.handle(audio_in_frame(tone_then_silence(1000, 800)));
  s.handle(end_frame());
  EXPECT_EQ(states(sink.frames), kSinglePauseStates);
}

struct MalformedCase {
  const char* name;
  Frame frame;
};

TEST(GatewaySession, MalformedFramesErrorThenClose) {
  const std::vector<MalformedCase> cases{
      {"unknown type", Frame(std::uint8_t{0x33}, std::vector<std::uint8_t>{})},
      {"server-only type", Frame(FrameType::State, "Silence")},
      {"odd audio bytes", Frame(FrameType::AudioIn, std::vector<std::uint8_t>{1, 2, 3})},
      {"bad json", Frame(FrameType::Control, "{op:")},
      {"no op", Frame(FrameType::Control, "{}")},
      {"unknown op", Frame(FrameType::Control, R"({"op":"dance"})")},
      {"bad advance", Frame(FrameType::Control, R"({"op":"advance","ms":-5})")},
  };
  for (const auto& c : cases) {
    CollectingSink sink;
    GatewaySession s({}, sink);
    EXPECT_EQ(s.handle(c.frame), GatewaySession::Verdict::Close) << c.name;
    EXPECT_TRUE(s.closed());
    ASSERT_EQ(sink.frames.size(), 2u) << c.name;  // initial STATE, then the error
    EXPECT_EQ(nlohmann::json::parse(sink.frames.back().text())["op"], "error") << c.name;
    EXPECT_EQ(s.handle(audio_in_frame(std::vector<std::int16_t>(320))), GatewaySession::Verdict::Close);
    EXPECT_EQ(sink.frames.size(), 2u);
  }
}

TEST(GatewaySession, ConfigureAfterAudioRejected) {
  CollectingSink sink;
  GatewaySession s({}, sink);
  s.handle(audio_in_frame(std::vector<std::int16_t>(320)));
  EXPECT_EQ(s.handle(json_frame(FrameType::Control, {{"op", "configure"}, {"seed", 3}})),
            GatewaySession::Verdict::Close);
}

class FailingChat : public ChatBackend {
 public:
  BackendStream<std::string> generate(const ChatRequest&, std::int64_t) override {
    throw BackendError("chat service unavailable", true);
  }
};

TEST(GatewaySession, BackendFailureReportedAndSessionContinues) {
  CollectingSink sink;
  GatewaySession s({}, sink, [](const SessionConfig& c) {
    auto b = make_session_backends(c);
    b.chat = std::make_shared<FailingChat>();
    return b;
  });
  for (const auto& f : chunked_audio(tone_then_silence(1000, 800), 640)) {
    ASSERT_EQ(s.handle(f), GatewaySession::Verdict::Continue);
  }
  for (const auto& f : chunked_audio(tone_then_silence(500, 800), 640)) {
    ASSERT_EQ(s.handle(f), GatewaySession::Verdict::Continue);
  }
  EXPECT_EQ(s.handle(end_frame()), GatewaySession::Verdict::Ended);
  std::size_t errors = 0;
  for (const auto& f : sink.frames) {
    if (f.kind() != FrameType::Metrics) continue;
    const auto j = nlohmann::json::parse(f.text());
    if (j["type"] == "error") {
      ++errors;
      EXPECT_NE(j["message"].get<std::string>().find("unavailable"), std::string::npos);
    }
  }
  EXPECT_GE(errors, 2u);
  EXPECT_EQ(nlohmann::json::parse(sink.frames.back().text())["op"], "end_ack");
}

// --- outbound window --------------------------------------------------------

Frame audio(std::uint32_t i) { return audio_out_frame(i, AudioChunk{i, kAudioChunkMs, {}}); }

TEST(OutboundQueue, DropsOldestAudioAndReports) {
  OutboundQueue q;
  q.push(Frame(FrameType::State, "BotReplying"));
  for (std::uint32_t i = 0; i < 200; ++i) {
    q.push(audio(i));
    ASSERT_LE(q.size(), kOutboundWindow);
  }
  EXPECT_EQ(q.peak(), kOutboundWindow);
  EXPECT_EQ(q.total_drops(), 200u + 1u - kOutboundWindow);
  q.close();

  auto first = q.pop();
  ASSERT_TRUE(first);
  ASSERT_EQ(first->kind(), FrameType::Metrics);
  const auto j = nlohmann::json::parse(first->text());
  EXPECT_EQ(j["type"], "drop");
  EXPECT_EQ(j["dropped"], 137);
  EXPECT_EQ(q.pop()->text(), "BotReplying");  // never evicted
  for (std::uint32_t i = 137; i < 200; ++i) EXPECT_EQ(parse_audio_out(*q.pop()).chunk_index, i);
  EXPECT_FALSE(q.pop());
}

TEST(OutboundQueue, NonAudioBlocksProducerInsteadOfDropping) {
  OutboundQueue q(4);
  for (int i = 0; i < 4; ++i) q.push(Frame(FrameType::TextPartial, std::to_string(i)));
  auto producer = std::async(std::launch::async, [&] { q.push(Frame(FrameType::TextPartial, "4")); });
  EXPECT_EQ(producer.wait_for(std::chrono::milliseconds(100)), std::future_status::timeout);
  EXPECT_EQ(q.pop()->text(), "0");
  producer.get();
  EXPECT_EQ(q.total_drops(), 0u);
  for (int i = 1; i <= 4; ++i) EXPECT_EQ(q.pop()->text(), std::to_string(i));
}

TEST(OutboundQueue, DropRecordPrecedesNextFrame) {
  OutboundQueue q(2);
  auto drop_count = [](const Frame& f) {
    EXPECT_EQ(f.kind(), FrameType::Metrics);
    return nlohmann::json::parse(f.text())["dropped"].get<int>();
  };
  q.push(audio(0));
  q.push(audio(1));
  q.push(audio(2));  // evicts 0
  EXPECT_EQ(drop_count(*q.pop()), 1);
  EXPECT_EQ(parse_audio_out(*q.pop()).chunk_index, 1u);
  q.push(audio(3));
  q.push(audio(4));  // evicts 2
  EXPECT_EQ(drop_count(*q.pop()), 1);
  EXPECT_EQ(parse_audio_out(*q.pop()).chunk_index, 3u);
  EXPECT_EQ(parse_audio_out(*q.pop()).chunk_index, 4u);
  EXPECT_EQ(q.total_drops(), 2u);
}

// --- over TCP ---------------------------------------------------------------

std::vector<Frame> talk(std::uint16_t port, const std::vector<Frame>& input) {
  GatewayClient c("127.0.0.1", port);
  for (const auto& f : input) EXPECT_TRUE(c.send(f));
  std::vector<Frame> out;
  while (auto f = c.recv()) {
    out.push_back(*f);
    if (f->kind() == FrameType::Control) break;
  }
  return out;
}

TEST(GatewayServer, LoopbackSinglePause) {
  GatewayServer server({});
  server.start(0);
  ASSERT_NE(server.port(), 0);
  auto input = chunked_audio(fixture_pcm(), 320);
  input.push_back(end_frame());
  const auto out = talk(server.port(), input);
  EXPECT_EQ(states(out), kSinglePauseStates);
  ASSERT_FALSE(out.empty());
  EXPECT_EQ(nlohmann::json::parse(out.back().text())["op"], "end_ack");
  // Same frames as the transport-free session.
  EXPECT_EQ(out, run_offline({}, input));
  server.stop();
}

TEST(GatewayServer, ConcurrentSessionsAreIsolated) {
  SessionConfig cfg;
  cfg.latency.chat.jitter_ms = 300;
  GatewayServer server(cfg);
  server.start(0);
  auto make_input = [](std::uint64_t seed) {
    std::vector<Frame> in{json_frame(FrameType::Control, {{"op", "configure"}, {"seed", seed}})};
    for (int turn = 0; turn < 3; ++turn) {
      auto a = chunked_audio(tone_then_silence(800 + 200 * turn, 900), 480);
      in.insert(in.end(), a.begin(), a.end());
      in.push_back(json_frame(FrameType::Control, {{"op", "advance"}, {"ms", 5000}}));  // let the reply play out
    }
    in.push_back(end_frame());
    return in;
  };
  const auto in_a = make_input(11), in_b = make_input(22);
  auto fa = std::async(std::launch::async, [&] { return talk(server.port(), in_a); });
  auto fb = std::async(std::launch::async, [&] { return talk(server.port(), in_b); });
  const auto out_a = fa.get(), out_b = fb.get();
  EXPECT_EQ(out_a, run_offline(cfg, in_a));
  EXPECT_EQ(out_b, run_offline(cfg, in_b));
  EXPECT_NE(out_a, out_b);
  const std::vector<std::string> three_turns{"Silence",     "UserSpeaking", "UserPaused", "BotReplying",
                                             "Silence",     "UserSpeaking", "UserPaused", "BotReplying",
                                             "Silence",     "UserSpeaking", "UserPaused", "BotReplying",
                                             "Silence"};
  EXPECT_EQ(states(out_a), three_turns);
  EXPECT_EQ(states(out_b), three_turns);
  server.stop();
  EXPECT_EQ(server.sessions_served(), 2u);
}

TEST(GatewayServer, AudioAfterEndClosesWithError) {
  GatewayServer server({});
  server.start(0);
  GatewayClient c("127.0.0.1", server.port());
  c.send(audio_in_frame(tone_then_silence(200, 0)));
  c.send(end_frame());
  std::optional<Frame> f;
  while ((f = c.recv()) && f->kind() != FrameType::Control) {
  }
  ASSERT_TRUE(f);
  EXPECT_EQ(nlohmann::json::parse(f->text())["op"], "end_ack");
  c.send(audio_in_frame(tone_then_silence(20, 0)));
  f = c.recv();
  ASSERT_TRUE(f);
  const auto j = nlohmann::json::parse(f->text());
  EXPECT_EQ(j["op"], "error");
  EXPECT_EQ(j["message"], "AUDIO_IN after end");
  EXPECT_FALSE(c.recv(2000));
  EXPECT_TRUE(c.saw_eof());
  server.stop();
}

TEST(GatewayServer, OversizeDeclaredLengthClosesWithError) {
  GatewayServer server({});
  server.start(0);
  // Frame has no way to carry an oversize length, so the header goes out raw.
  const std::vector<std::uint8_t> evil{0x7f, 0xff, 0xff, 0xff, 0x01};
  int fd = ::socket(AF_INET, SOCK_STREAM, 0);
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_port = htons(server.port());
  ::inet_pton(AF_INET, "127.0.0.1", &addr.sin_addr);
  ASSERT_EQ(::connect(fd, reinterpret_cast<sockaddr*>(&addr), sizeof addr), 0);
  ASSERT_TRUE(net::send_all(fd, evil));
  FrameDecoder dec;
  std::vector<Frame> got;
  std::uint8_t buf[4096];
  for (;;) {
    const long n = net::recv_some(fd, buf, sizeof buf, 3000);
    if (n <= 0) break;
    for (auto& fr : dec.feed({buf, static_cast<std::size_t>(n)})) got.push_back(fr);
  }
  ::close(fd);
  ASSERT_EQ(got.size(), 2u);
  EXPECT_EQ(got[0].text(), "Silence");
  EXPECT_EQ(nlohmann::json::parse(got[1].text())["op"], "error");
  server.stop();
}

TEST(GatewayServer, StopWithOpenClients) {
  GatewayServer server({});
  server.start(0);
  GatewayClient a("127.0.0.1", server.port());
  GatewayClient b("127.0.0.1", server.port());
  ASSERT_TRUE(a.recv());
  ASSERT_TRUE(b.recv());
  server.stop();
  EXPECT_FALSE(a.recv(2000));
  EXPECT_FALSE(server.running());
}

}  // namespace
}  // namespace steporch
