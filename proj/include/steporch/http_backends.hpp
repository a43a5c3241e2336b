#pragma once

// HTTP clients for externally hosted backends. Every endpoint takes and
// returns a JSON body; see README.md for the schemas. Calls are synchronous:
// whatever a call returns becomes available on the pipeline clock once the
// measured round trip has elapsed.

#include <chrono>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "steporch/backends.hpp"
#include "steporch/config.hpp"
#include "steporch/errors.hpp"

namespace steporch {

using WallClock = std::function<std::int64_t()>;

inline std::int64_t steady_ms() {
  return std::chrono::duration_cast<std::chrono::milliseconds>(
             std::chrono::steady_clock::now().time_since_epoch())
      .count();
}

class HttpEndpoint {
 public:
  HttpEndpoint(HttpSettings settings, WallClock clock = steady_ms)
      : settings_(std::move(settings)), clock_(std::move(clock)), client_(settings_.base_url) {
    if (!client_.is_valid()) throw ValidationError("http: invalid base_url \"" + settings_.base_url + "\"");
    const auto t = std::chrono::milliseconds(settings_.timeout_ms);
    client_.set_connection_timeout(t);
    client_.set_read_timeout(t);
    client_.set_write_timeout(t);
    if (!settings_.bearer_token.empty()) client_.set_bearer_token_auth(settings_.bearer_token);
  }

  struct Reply {
    nlohmann::json body;
    std::int64_t elapsed_ms = 0;
  };

  Reply post(const std::string& path, const nlohmann::json& body) {
    const auto start = clock_();
    auto res = client_.Post(path, body.dump(), "application/json");
    const auto elapsed = clock_() - start;
    if (!res) {
      const bool timeout = res.error() == httplib::Error::Read || res.error() == httplib::Error::ConnectionTimeout;
      throw BackendError(path + ": " + (timeout ? std::string("timeout") : httplib::to_string(res.error())), true);
    }
    if (res->status >= 400) {
      throw BackendError(path + ": HTTP " + std::to_string(res->status), res->status >= 500);
    }
    try {
      return {nlohmann::json::parse(res->body), elapsed};
    } catch (const nlohmann::json::parse_error&) {
      throw BackendError(path + ": response is not JSON", false);
    }
  }

 private:
  HttpSettings settings_;
  WallClock clock_;
  httplib::Client client_;
};

inline nlohmann::json prompt_json(const PromptSnapshot& p) {
  auto turns = nlohmann::json::array();
  for (const auto& t : p.turns()) {
    turns.push_back({{"turn_id", t.turn_id}, {"role", to_string(t.role)}, {"text", t.text}, {"truncated", t.truncated}});
  }
  std::vector<std::uint32_t> audio;
  for (const auto& tok : p.live_audio().tokens()) audio.push_back(unified_id(tok).value);
  return {{"turns", turns}, {"live_audio_tokens", audio}, {"token_estimate", p.token_estimate()}};
}

template <class T>
T required(const nlohmann::json& j, const char* key, const std::string& where) {
  if (!j.is_object() || !j.contains(key)) throw BackendError(where + ": response lacks \"" + key + "\"", false);
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw BackendError(where + ": \"" + key + "\" has the wrong type", false);
  }
}

class HttpChatBackend : public ChatBackend {
 public:
  explicit HttpChatBackend(std::shared_ptr<HttpEndpoint> ep) : ep_(std::move(ep)) {}

  BackendStream<std::string> generate(const ChatRequest& request, std::int64_t start_ms) override {
    nlohmann::json body{{"spec_id", request.spec_id}, {"turn_index", request.turn_index}};
    body["prompt"] = request.prompt ? prompt_json(*request.prompt) : nlohmann::json::object();
    const auto reply = ep_->post("/v1/chat", body);
    const auto text = required<std::string>(reply.body, "text", "/v1/chat");
    BackendStream<std::string> stream;
    const std::int64_t at = start_ms + reply.elapsed_ms;
    for (auto& piece : chunk_code_points(text, kChatChunkCodePoints)) stream.push({at, std::move(piece)});
    stream.close(at);
    return stream;
  }

 private:
  std::shared_ptr<HttpEndpoint> ep_;
};

class HttpAsrBackend : public AsrBackend {
 public:
  explicit HttpAsrBackend(std::shared_ptr<HttpEndpoint> ep) : ep_(std::move(ep)) {}

  AsrResult transcribe(const AsrRequest& request) override {
    std::vector<std::uint32_t> ids;
    for (const auto& t : request.tokens) ids.push_back(unified_id(t).value);
    const auto reply = ep_->post("/v1/asr", {{"turn_id", request.turn_id}, {"tokens", ids}});
    return {reply.elapsed_ms, required<std::string>(reply.body, "text", "/v1/asr")};
  }

 private:
  std::shared_ptr<HttpEndpoint> ep_;
};

class HttpTtsSession : public TtsSession {
 public:
  HttpTtsSession(std::shared_ptr<HttpEndpoint> ep, SpecId spec) : ep_(std::move(ep)), spec_(spec) {}

  std::vector<TimedUnit<AudioChunk>> push_text(std::string_view text, std::int64_t at_ms) override {
    if (text.empty()) return {};
    const auto reply = ep_->post("/v1/tts", {{"spec_id", spec_}, {"text", std::string(text)}});
    std::vector<TimedUnit<AudioChunk>> out;
    for (const auto& c : required<nlohmann::json>(reply.body, "chunks", "/v1/tts")) {
      AudioChunk chunk;
      chunk.index = next_index_++;
      chunk.duration_ms = c.value("duration_ms", kAudioChunkMs);
      if (c.contains("pcm")) chunk.pcm = c["pcm"].get<std::vector<std::int16_t>>();
      out.push_back({at_ms + reply.elapsed_ms, std::move(chunk)});
    }
    return out;
  }

  std::vector<TimedUnit<AudioChunk>> finish(std::int64_t) override { return {}; }

 private:
  std::shared_ptr<HttpEndpoint> ep_;
  SpecId spec_;
  std::size_t next_index_ = 0;
};

class HttpTtsBackend : public TtsBackend {
 public:
  explicit HttpTtsBackend(std::shared_ptr<HttpEndpoint> ep) : ep_(std::move(ep)) {}
  std::unique_ptr<TtsSession> open(const TtsRequest& request) override {
    return std::make_unique<HttpTtsSession>(ep_, request.spec_id);
  }

 private:
  std::shared_ptr<HttpEndpoint> ep_;
};

// Transport failures come back as error results so the conversation goes on.
class HttpToolExecutor : public ToolExecutor {
 public:
  HttpToolExecutor(std::shared_ptr<HttpEndpoint> ep, std::int64_t timeout_ms)
      : ep_(std::move(ep)), timeout_ms_(timeout_ms) {}

  ToolOutcome invoke(const ToolRequest& request) override {
    const auto& d = request.directive;
    try {
      const auto reply = ep_->post("/v1/tool", {{"call_id", d.call_id}, {"name", d.name}, {"args", d.args}});
      ToolOutcome out{reply.elapsed_ms, {}, reply.body.value("is_error", false)};
      const auto& p = required<nlohmann::json>(reply.body, "payload", "/v1/tool");
      out.payload = p.is_string() ? p.get<std::string>() : p.dump();
      return apply_tool_timeout(out, timeout_ms_);
    } catch (const BackendError& e) {
      const std::string what = e.what();
      if (what.find("timeout") != std::string::npos) return {timeout_ms_, "timeout", true};
      return {0, "backend_error: " + what, true};
    }
  }

 private:
  std::shared_ptr<HttpEndpoint> ep_;
  std::int64_t timeout_ms_;
};

}  // namespace steporch
