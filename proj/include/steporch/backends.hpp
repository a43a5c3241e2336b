#pragma once

// Backend interfaces (chat, ASR, TTS, tools) and deterministic scripted mocks.
//
// Backends never sleep. They describe when each output unit becomes
// available, and the pipeline delivers those units as timestamped events on
// its clock. Cancellation is expressed on BackendStream: once cancelled at t,
// at most one further unit (the one in flight) is delivered, then the stream
// ends with a Cancelled marker.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <numbers>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "steporch/context.hpp"
#include "steporch/controller.hpp"
#include "steporch/errors.hpp"
#include "steporch/tokens.hpp"
#include "steporch/tool_router.hpp"

namespace steporch {

inline constexpr std::size_t kChatChunkCodePoints = 8;
inline constexpr std::int64_t kTtsTokensPerChunk = 4;
inline constexpr std::int64_t kAudioChunkMs = 320;
inline constexpr std::int64_t kAsrCompactionRatio = 14;

struct LatencyModel {
  std::int64_t first_token_ms = 0;
  std::int64_t per_unit_ms = 0;
  std::int64_t jitter_ms = 0;  // first-unit latency drawn uniformly from [first, first + jitter]
  std::uint64_t seed = 0;

  void validate(const std::string& who) const {
    if (first_token_ms < 0 || per_unit_ms < 0 || jitter_ms < 0) {
      throw ValidationError(who + ": latencies must be non-negative");
    }
  }

  // Reproducible for a given (seed, request index).
  std::int64_t first_unit_latency(std::uint64_t request_index) const {
    if (jitter_ms == 0) return first_token_ms;
    std::mt19937_64 gen(seed ^ (0x9E3779B97F4A7C15ULL * (request_index + 1)));
    return first_token_ms + static_cast<std::int64_t>(gen() % static_cast<std::uint64_t>(jitter_ms + 1));
  }
};

template <class Payload>
struct TimedUnit {
  std::int64_t available_at_ms = 0;
  Payload payload{};
};

template <class Payload>
class BackendStream {
 public:
  void push(TimedUnit<Payload> unit) {
    if (!units_.empty() && unit.available_at_ms < units_.back().available_at_ms) {
      throw InvariantViolation("backend stream: unit availability must be non-decreasing");
    }
    units_.push_back(std::move(unit));
  }

  // No further units will be produced; `at_ms` is when the stream reports done.
  void close(std::int64_t at_ms) { done_at_ms_ = at_ms; }

  void cancel(std::int64_t at_ms) {
    if (cancelled_at_) return;
    cancelled_at_ = at_ms;
    std::size_t delivered = 0;
    while (delivered < units_.size() && units_[delivered].available_at_ms <= at_ms) ++delivered;
    if (delivered > 0 && delivered < units_.size()) {
      limit_ = delivered + 1;
      marker_at_ = units_[delivered].available_at_ms;
    } else {
      limit_ = delivered;
      marker_at_ = at_ms;
    }
  }

  bool admitted(std::size_t index) const { return index < units_.size() && index < limit_; }
  bool cancelled() const noexcept { return cancelled_at_.has_value(); }
  std::optional<std::int64_t> cancelled_marker_at() const noexcept {
    return cancelled_at_ ? std::optional<std::int64_t>(marker_at_) : std::nullopt;
  }
  std::optional<std::int64_t> done_at() const noexcept { return done_at_ms_; }

  std::span<const TimedUnit<Payload>> planned() const noexcept { return units_; }
  std::size_t size() const noexcept { return units_.size(); }
  const TimedUnit<Payload>& operator[](std::size_t i) const { return units_[i]; }

  std::vector<TimedUnit<Payload>> delivered() const {
    std::vector<TimedUnit<Payload>> out;
    for (std::size_t i = 0; i < units_.size() && admitted(i); ++i) out.push_back(units_[i]);
    return out;
  }

 private:
  std::vector<TimedUnit<Payload>> units_;
  std::optional<std::int64_t> done_at_ms_;
  std::optional<std::int64_t> cancelled_at_;
  std::int64_t marker_at_ = 0;
  std::size_t limit_ = static_cast<std::size_t>(-1);
};

// Splits text into pieces of at most `n` code points.
inline std::vector<std::string> chunk_code_points(std::string_view text, std::size_t n) {
  std::vector<std::string> out;
  std::string cur;
  std::size_t count = 0;
  for (std::size_t i = 0; i < text.size(); ++i) {
    const auto c = static_cast<unsigned char>(text[i]);
    if ((c & 0xC0) != 0x80) {
      if (count == n) {
        out.push_back(std::move(cur));
        cur.clear();
        count = 0;
      }
      ++count;
    }
    cur.push_back(text[i]);
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

// --- chat -------------------------------------------------------------------

struct ChatRequest {
  std::shared_ptr<const PromptSnapshot> prompt;
  SpecId spec_id = 0;
  std::size_t turn_index = 0;
  std::uint64_t request_index = 0;
};

class ChatBackend {
 public:
  virtual ~ChatBackend() = default;
  // Units carry absolute availability times on the caller's clock.
  virtual BackendStream<std::string> generate(const ChatRequest& request, std::int64_t start_ms) = 0;
};

// Emits the scripted response for the request's turn, 8 code points per
// chunk: first chunk after the first-unit latency, later chunks every
// per_unit_ms. Done is reported with the last chunk.
class ScriptedChatBackend : public ChatBackend {
 public:
  ScriptedChatBackend(std::vector<std::string> responses, LatencyModel latency)
      : responses_(std::move(responses)), latency_(latency) {
    latency_.validate("chat latency");
  }

  BackendStream<std::string> generate(const ChatRequest& request, std::int64_t start_ms) override {
    BackendStream<std::string> stream;
    const std::int64_t first = start_ms + latency_.first_unit_latency(request.request_index);
    std::int64_t t = first;
    for (auto& piece : chunk_code_points(response_for(request.turn_index), kChatChunkCodePoints)) {
      stream.push({t, std::move(piece)});
      t += latency_.per_unit_ms;
    }
    stream.close(stream.size() == 0 ? first : stream.planned().back().available_at_ms);
    return stream;
  }

  std::string response_for(std::size_t turn_index) const {
    if (turn_index < responses_.size()) return responses_[turn_index];
    return "Response " + std::to_string(turn_index + 1) + ".";
  }

 private:
  std::vector<std::string> responses_;
  LatencyModel latency_;
};

// --- ASR --------------------------------------------------------------------

struct AsrRequest {
  TurnId turn_id = 0;
  std::size_t turn_index = 0;
  std::vector<AudioToken> tokens;
  std::uint64_t request_index = 0;
};

struct AsrResult {
  std::int64_t latency_ms = 0;
  std::string text;
};

class AsrBackend {
 public:
  virtual ~AsrBackend() = default;
  virtual AsrResult transcribe(const AsrRequest& request) = 0;
};

inline std::int64_t compacted_token_target(std::size_t audio_tokens) {
  return (static_cast<std::int64_t>(audio_tokens) + kAsrCompactionRatio - 1) / kAsrCompactionRatio;
}

// Returns text whose estimate_tokens() equals `target`, built from the
// script: truncated to 4*target code points, or extended by cycling through
// the script (or '.', when the script is empty).
inline std::string fit_transcript(std::string_view script, std::int64_t target) {
  if (target <= 0) return {};
  const auto want = static_cast<std::size_t>(target * 4);
  std::vector<std::string_view> cps;
  for (std::size_t i = 0; i < script.size();) {
    std::size_t j = i + 1;
    while (j < script.size() && (static_cast<unsigned char>(script[j]) & 0xC0) == 0x80) ++j;
    cps.push_back(script.substr(i, j - i));
    i = j;
  }
  if (estimate_tokens(script) == target) return std::string(script);
  std::string out;
  if (cps.size() >= want) {
    for (std::size_t i = 0; i < want; ++i) out.append(cps[i]);
    return out;
  }
  out.assign(script);
  std::size_t have = cps.size();
  std::vector<std::string_view> filler;
  if (cps.empty()) {
    filler.push_back(".");
  } else {
    filler.push_back(" ");
    filler.insert(filler.end(), cps.begin(), cps.end());
  }
  for (std::size_t k = 0; have < want; ++k, ++have) out.append(filler[k % filler.size()]);
  return out;
}

// Transcript estimate is exactly ceil(|tokens| / 14) by construction.
class ScriptedAsrBackend : public AsrBackend {
 public:
  ScriptedAsrBackend(std::vector<std::string> transcripts, LatencyModel latency)
      : transcripts_(std::move(transcripts)), latency_(latency) {
    latency_.validate("asr latency");
  }

  AsrResult transcribe(const AsrRequest& request) override {
    AsrResult r;
    r.latency_ms = latency_.first_unit_latency(request.request_index);
    if (request.tokens.empty()) return r;
    const std::string script = request.turn_index < transcripts_.size()
                                   ? transcripts_[request.turn_index]
                                   : "user turn " + std::to_string(request.turn_index + 1);
    r.text = fit_transcript(script, compacted_token_target(request.tokens.size()));
    return r;
  }

 private:
  std::vector<std::string> transcripts_;
  LatencyModel latency_;
};

// --- TTS --------------------------------------------------------------------

struct AudioChunk {
  std::size_t index = 0;
  std::int64_t duration_ms = kAudioChunkMs;
  std::vector<std::int16_t> pcm;
};

struct TtsRequest {
  SpecId spec_id = 0;
  std::uint64_t request_index = 0;
};

class TtsSession {
 public:
  virtual ~TtsSession() = default;
  // Text arriving at `at_ms`; returns chunks newly scheduled by it.
  virtual std::vector<TimedUnit<AudioChunk>> push_text(std::string_view text, std::int64_t at_ms) = 0;
  // End of the text stream; returns any remaining chunks.
  virtual std::vector<TimedUnit<AudioChunk>> finish(std::int64_t at_ms) = 0;
};

class TtsBackend {
 public:
  virtual ~TtsBackend() = default;
  virtual std::unique_ptr<TtsSession> open(const TtsRequest& request) = 0;
};

// One chunk per 4 estimated text tokens (16 code points). Chunk k is started
// by the arrival of code point 16k and is ready at
//   max(arrival_k + first_token_ms, ready_{k-1} + per_unit_ms),
// i.e. first_token_ms + k * per_unit_ms after its text when the text arrives
// in one piece.
class MockTtsSession : public TtsSession {
 public:
  MockTtsSession(LatencyModel latency, std::uint64_t request_index, bool render_pcm)
      : latency_(latency), first_ms_(latency.first_unit_latency(request_index)), render_(render_pcm) {}

  std::vector<TimedUnit<AudioChunk>> push_text(std::string_view text, std::int64_t at_ms) override {
    std::vector<TimedUnit<AudioChunk>> out;
    code_points_ += utf8_code_points(text);
    const std::size_t per_chunk = static_cast<std::size_t>(kTtsTokensPerChunk * 4);
    while (next_chunk_ * per_chunk < code_points_) {
      std::int64_t ready = at_ms + first_ms_;
      if (last_ready_) ready = std::max(ready, *last_ready_ + latency_.per_unit_ms);
      last_ready_ = ready;
      AudioChunk chunk;
      chunk.index = next_chunk_++;
      if (render_) chunk.pcm = render_chunk(chunk.index);
      out.push_back({ready, std::move(chunk)});
    }
    return out;
  }

  std::vector<TimedUnit<AudioChunk>> finish(std::int64_t) override { return {}; }

  static std::vector<std::int16_t> render_chunk(std::size_t index) {
    constexpr std::size_t n = static_cast<std::size_t>(kAudioChunkMs) * 16;
    std::vector<std::int16_t> pcm(n);
    const double freq = 220.0 + 20.0 * static_cast<double>(index % 8);
    for (std::size_t i = 0; i < n; ++i) {
      pcm[i] = static_cast<std::int16_t>(
          std::lround(6000.0 * std::sin(2.0 * std::numbers::pi * freq * static_cast<double>(i) / 16000.0)));
    }
    return pcm;
  }

 private:
  LatencyModel latency_;
  std::int64_t first_ms_;
  bool render_;
  std::size_t code_points_ = 0;
  std::size_t next_chunk_ = 0;
  std::optional<std::int64_t> last_ready_;
};

class MockTtsBackend : public TtsBackend {
 public:
  explicit MockTtsBackend(LatencyModel latency, bool render_pcm = false)
      : latency_(latency), render_(render_pcm) {
    latency_.validate("tts latency");
  }

  std::unique_ptr<TtsSession> open(const TtsRequest& request) override {
    return std::make_unique<MockTtsSession>(latency_, request.request_index, render_);
  }

 private:
  LatencyModel latency_;
  bool render_;
};

// Runs a whole timed text stream through a TTS session.
inline BackendStream<AudioChunk> synthesize(TtsBackend& tts,
                                            std::span<const TimedUnit<std::string>> text,
                                            std::int64_t end_at_ms, TtsRequest request = {}) {
  auto session = tts.open(request);
  BackendStream<AudioChunk> stream;
  for (const auto& piece : text) {
    for (auto& c : session->push_text(piece.payload, piece.available_at_ms)) stream.push(std::move(c));
  }
  for (auto& c : session->finish(end_at_ms)) stream.push(std::move(c));
  stream.close(stream.size() == 0 ? end_at_ms : stream.planned().back().available_at_ms);
  return stream;
}

// --- tools ------------------------------------------------------------------

struct ToolRequest {
  ToolCallDirective directive;
  std::size_t turn_index = 0;
};

struct ToolOutcome {
  std::int64_t latency_ms = 0;
  std::string payload;  // result payload, or error code when is_error
  bool is_error = false;
};

class ToolExecutor {
 public:
  virtual ~ToolExecutor() = default;
  virtual ToolOutcome invoke(const ToolRequest& request) = 0;
};

struct ScriptedTool {
  std::string name;
  std::int64_t latency_ms = 0;
  std::string payload;
};

inline ToolOutcome apply_tool_timeout(ToolOutcome outcome, std::int64_t timeout_ms) {
  if (timeout_ms > 0 && outcome.latency_ms > timeout_ms) {
    return {timeout_ms, "timeout", true};
  }
  return outcome;
}

// Scripts are looked up for the request's turn first, then in the global
// table. Unknown tools yield an immediate "unknown_tool" error result.
class ScriptedToolExecutor : public ToolExecutor {
 public:
  explicit ScriptedToolExecutor(std::int64_t timeout_ms = 0) : timeout_ms_(timeout_ms) {}

  void add_global(ScriptedTool tool) { global_[tool.name] = std::move(tool); }
  void add_for_turn(std::size_t turn_index, ScriptedTool tool) {
    per_turn_[turn_index][tool.name] = std::move(tool);
  }

  ToolOutcome invoke(const ToolRequest& request) override {
    const ScriptedTool* script = nullptr;
    if (auto t = per_turn_.find(request.turn_index); t != per_turn_.end()) {
      if (auto it = t->second.find(request.directive.name); it != t->second.end()) script = &it->second;
    }
    if (!script) {
      if (auto it = global_.find(request.directive.name); it != global_.end()) script = &it->second;
    }
    if (!script) return {0, "unknown_tool", true};
    return apply_tool_timeout({script->latency_ms, script->payload, false}, timeout_ms_);
  }

 private:
  std::int64_t timeout_ms_;
  std::map<std::string, ScriptedTool> global_;
  std::map<std::size_t, std::map<std::string, ScriptedTool>> per_turn_;
};

}  // namespace steporch
