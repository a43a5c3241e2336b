#pragma once

// Session configuration and its JSON form. A config file holds the sections
// {vad, backends, budget, sim}; every key is optional and unknown keys are
// rejected so typos surface as validation errors.
//
//   {
//     "vad":      {"frame_ms": 20, "energy_threshold": 0.001,
//                  "pause_threshold_ms": 200, "end_threshold_ms": 700},
//     "backends": {"mode": "mock",
//                  "chat": {"first_token_ms": 500, "per_unit_ms": 20, "jitter_ms": 0, "seed": 0},
//                  "asr":  {...}, "tts": {...}, "tool_timeout_ms": 5000,
//                  "http": {"base_url": "http://127.0.0.1:8000", "bearer_token": "", "timeout_ms": 5000}},
//     "budget":   4096,
//     "sim":      {"seed": 0, "speculation": true, "system_prompt": ""}
//   }

#include <cstdint>
#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "steporch/backends.hpp"
#include "steporch/errors.hpp"
#include "steporch/vad.hpp"

namespace steporch {

struct BackendLatencies {
  LatencyModel chat{500, 20, 0, 0};
  LatencyModel asr{150, 0, 0, 0};
  LatencyModel tts{100, 40, 0, 0};
  std::int64_t tool_timeout_ms = 5000;

  // Folds a run seed into every model so seeded jitter varies per run.
  BackendLatencies reseeded(std::uint64_t seed) const {
    BackendLatencies out = *this;
    out.chat.seed ^= seed;
    out.asr.seed ^= seed;
    out.tts.seed ^= seed;
    return out;
  }
};

struct HttpSettings {
  std::string base_url = "http://127.0.0.1:8000";
  std::string bearer_token;
  std::int64_t timeout_ms = 5000;
};

struct SessionConfig {
  VadConfig vad;
  BackendLatencies latency;
  std::string backend_mode = "mock";  // mock | http
  HttpSettings http;
  std::int64_t budget = 4096;
  std::uint64_t seed = 0;
  bool speculation = true;
  std::string system_prompt;

  void validate() const {
    vad.validate();
    latency.chat.validate("backends.chat");
    latency.asr.validate("backends.asr");
    latency.tts.validate("backends.tts");
    if (latency.tool_timeout_ms < 0) throw ValidationError("backends.tool_timeout_ms must be >= 0");
    if (backend_mode != "mock" && backend_mode != "http") {
      throw ValidationError("backends.mode must be \"mock\" or \"http\", got \"" + backend_mode + "\"");
    }
    if (http.timeout_ms <= 0) throw ValidationError("backends.http.timeout_ms must be positive");
    if (budget <= 0) throw ValidationError("budget must be positive");
  }
};

namespace detail {

inline void check_keys(const nlohmann::json& obj, const std::string& where,
                       std::initializer_list<const char*> allowed) {
  if (!obj.is_object()) throw ValidationError(where + ": expected an object");
  const std::set<std::string> ok(allowed.begin(), allowed.end());
  for (const auto& [key, _] : obj.items()) {
    if (!ok.contains(key)) throw ValidationError(where + ": unknown key \"" + key + "\"");
  }
}

template <class T>
void read_field(const nlohmann::json& obj, const char* key, T& out, const std::string& where) {
  if (!obj.contains(key)) return;
  try {
    out = obj.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ValidationError(where + "." + key + ": wrong type");
  }
}

inline LatencyModel parse_latency(const nlohmann::json& j, LatencyModel base, const std::string& where) {
  check_keys(j, where, {"first_token_ms", "per_unit_ms", "jitter_ms", "seed"});
  read_field(j, "first_token_ms", base.first_token_ms, where);
  read_field(j, "per_unit_ms", base.per_unit_ms, where);
  read_field(j, "jitter_ms", base.jitter_ms, where);
  read_field(j, "seed", base.seed, where);
  return base;
}

inline nlohmann::json latency_json(const LatencyModel& m) {
  return {{"first_token_ms", m.first_token_ms},
          {"per_unit_ms", m.per_unit_ms},
          {"jitter_ms", m.jitter_ms},
          {"seed", m.seed}};
}

}  // namespace detail

inline VadConfig parse_vad_config(const nlohmann::json& j, VadConfig base = {}) {
  detail::check_keys(j, "vad", {"frame_ms", "energy_threshold", "pause_threshold_ms", "end_threshold_ms"});
  detail::read_field(j, "frame_ms", base.frame_ms, "vad");
  detail::read_field(j, "energy_threshold", base.energy_threshold, "vad");
  detail::read_field(j, "pause_threshold_ms", base.pause_threshold_ms, "vad");
  detail::read_field(j, "end_threshold_ms", base.end_threshold_ms, "vad");
  base.validate();
  return base;
}

inline nlohmann::json vad_config_json(const VadConfig& v) {
  return {{"frame_ms", v.frame_ms},
          {"energy_threshold", v.energy_threshold},
          {"pause_threshold_ms", v.pause_threshold_ms},
          {"end_threshold_ms", v.end_threshold_ms}};
}

inline BackendLatencies parse_latencies(const nlohmann::json& j, BackendLatencies base,
                                        const std::string& where) {
  if (j.contains("chat")) base.chat = detail::parse_latency(j["chat"], base.chat, where + ".chat");
  if (j.contains("asr")) base.asr = detail::parse_latency(j["asr"], base.asr, where + ".asr");
  if (j.contains("tts")) base.tts = detail::parse_latency(j["tts"], base.tts, where + ".tts");
  detail::read_field(j, "tool_timeout_ms", base.tool_timeout_ms, where);
  return base;
}

inline SessionConfig parse_session_config(const nlohmann::json& j) {
  SessionConfig c;
  detail::check_keys(j, "config", {"vad", "backends", "budget", "sim"});
  if (j.contains("vad")) c.vad = parse_vad_config(j["vad"]);
  if (j.contains("backends")) {
    const auto& b = j["backends"];
    detail::check_keys(b, "backends", {"mode", "chat", "asr", "tts", "tool_timeout_ms", "http"});
    detail::read_field(b, "mode", c.backend_mode, "backends");
    c.latency = parse_latencies(b, c.latency, "backends");
    if (b.contains("http")) {
      const auto& h = b["http"];
      detail::check_keys(h, "backends.http", {"base_url", "bearer_token", "timeout_ms"});
      detail::read_field(h, "base_url", c.http.base_url, "backends.http");
      detail::read_field(h, "bearer_token", c.http.bearer_token, "backends.http");
      detail::read_field(h, "timeout_ms", c.http.timeout_ms, "backends.http");
    }
  }
  detail::read_field(j, "budget", c.budget, "config");
  if (j.contains("sim")) {
    const auto& s = j["sim"];
    detail::check_keys(s, "sim", {"seed", "speculation", "system_prompt"});
    detail::read_field(s, "seed", c.seed, "sim");
    detail::read_field(s, "speculation", c.speculation, "sim");
    detail::read_field(s, "system_prompt", c.system_prompt, "sim");
  }
  c.validate();
  return c;
}

inline nlohmann::json session_config_json(const SessionConfig& c) {
  return {{"vad", vad_config_json(c.vad)},
          {"backends",
           {{"mode", c.backend_mode},
            {"chat", detail::latency_json(c.latency.chat)},
            {"asr", detail::latency_json(c.latency.asr)},
            {"tts", detail::latency_json(c.latency.tts)},
            {"tool_timeout_ms", c.latency.tool_timeout_ms},
            {"http",
             {{"base_url", c.http.base_url},
              {"bearer_token", c.http.bearer_token},
              {"timeout_ms", c.http.timeout_ms}}}}},
          {"budget", c.budget},
          {"sim", {{"seed", c.seed}, {"speculation", c.speculation}, {"system_prompt", c.system_prompt}}}};
}

inline nlohmann::json parse_json_text(const std::string& text, const std::string& source) {
  try {
    return nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(source + ": invalid JSON: " + e.what());
  }
}

inline nlohmann::json read_json_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw NotFoundError("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_json_text(ss.str(), path);
}

inline constexpr const char* kConfigEnvVar = "STEP_ORCH_CONFIG";

// STEP_ORCH_CONFIG, when set and non-empty, wins over the path given on the
// command line. With neither, defaults apply.
inline std::string resolve_config_path(const std::string& cli_path) {
  if (const char* env = std::getenv(kConfigEnvVar); env && *env) return env;
  return cli_path;
}

inline SessionConfig load_session_config(const std::string& cli_path) {
  const std::string path = resolve_config_path(cli_path);
  if (path.empty()) return SessionConfig{};
  return parse_session_config(read_json_file(path));
}

}  // namespace steporch
