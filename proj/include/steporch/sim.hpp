#pragma once

// Discrete-event simulation of scripted conversations through the full
// pipeline on a virtual clock. The simulated user is reactive: each turn
// starts once the controller is back in Silence.

#include <cmath>
#include <cstdint>
#include <iomanip>
#include <map>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "steporch/config.hpp"
#include "steporch/errors.hpp"
#include "steporch/pipeline.hpp"

namespace steporch {

struct SpeechSegment {
  std::int64_t speech_ms = 0;
  std::int64_t trailing_silence_ms = 0;
};

struct ScenarioTurn {
  std::vector<SpeechSegment> speech_segments;
  std::string transcript;
  std::optional<std::string> scripted_response;
  std::vector<ScriptedTool> tool_calls;
};

struct Scenario {
  std::vector<ScenarioTurn> turns;
  VadConfig vad;
  BackendLatencies latency;
  std::int64_t budget = 4096;
  std::string system_prompt;

  std::vector<std::string> violations() const {
    std::vector<std::string> out;
    try {
      vad.validate();
    } catch (const ValidationError& e) {
      out.push_back(e.what());
      return out;
    }
    for (const auto* m : {&latency.chat, &latency.asr, &latency.tts}) {
      if (m->first_token_ms < 0 || m->per_unit_ms < 0 || m->jitter_ms < 0) {
        out.push_back("backend latencies must be non-negative");
        break;
      }
    }
    if (budget <= 0) out.push_back("budget must be positive");
    if (turns.empty()) out.push_back("scenario has no turns");
    const auto f = vad.frame_ms;
    for (std::size_t t = 0; t < turns.size(); ++t) {
      const std::string where = "turns[" + std::to_string(t) + "]";
      const auto& segs = turns[t].speech_segments;
      if (segs.empty()) out.push_back(where + ": no speech segments");
      for (std::size_t s = 0; s < segs.size(); ++s) {
        const std::string seg = where + ".speech_segments[" + std::to_string(s) + "]";
        const bool last = s + 1 == segs.size();
        if (segs[s].speech_ms <= 0) out.push_back(seg + ": speech_ms must be positive");
        if (segs[s].trailing_silence_ms < 0) out.push_back(seg + ": trailing_silence_ms must be >= 0");
        if (segs[s].speech_ms % f != 0 || segs[s].trailing_silence_ms % f != 0) {
          out.push_back(seg + ": durations must be multiples of frame_ms (" + std::to_string(f) + ")");
        }
        if (last && segs[s].trailing_silence_ms < vad.end_threshold_ms) {
          out.push_back(seg + ": last trailing_silence_ms " + std::to_string(segs[s].trailing_silence_ms) +
                        " is below end_threshold_ms " + std::to_string(vad.end_threshold_ms));
        }
        if (!last && segs[s].trailing_silence_ms >= vad.end_threshold_ms) {
          out.push_back(seg + ": a non-final gap of " + std::to_string(segs[s].trailing_silence_ms) +
                        " ms would end the turn early");
        }
      }
      for (const auto& tool : turns[t].tool_calls) {
        if (tool.name.empty()) out.push_back(where + ": tool script with empty name");
        if (tool.latency_ms < 0) out.push_back(where + ": tool latency must be >= 0");
      }
    }
    return out;
  }

  void validate() const {
    const auto v = violations();
    if (v.empty()) return;
    std::string msg = "invalid scenario: ";
    for (std::size_t i = 0; i < v.size(); ++i) msg += (i ? "; " : "") + v[i];
    throw ValidationError(msg);
  }
};

inline nlohmann::json scenario_to_json(const Scenario& s) {
  auto turns = nlohmann::json::array();
  for (const auto& t : s.turns) {
    auto segs = nlohmann::json::array();
    for (const auto& g : t.speech_segments) {
      segs.push_back({{"speech_ms", g.speech_ms}, {"trailing_silence_ms", g.trailing_silence_ms}});
    }
    nlohmann::json turn{{"speech_segments", segs}, {"transcript", t.transcript}};
    if (t.scripted_response) turn["scripted_response"] = *t.scripted_response;
    if (!t.tool_calls.empty()) {
      auto tools = nlohmann::json::array();
      for (const auto& tool : t.tool_calls) {
        tools.push_back({{"name", tool.name}, {"latency_ms", tool.latency_ms}, {"payload", tool.payload}});
      }
      turn["tool_calls"] = tools;
    }
    turns.push_back(std::move(turn));
  }
  return {{"vad", vad_config_json(s.vad)},
          {"backends",
           {{"chat", detail::latency_json(s.latency.chat)},
            {"asr", detail::latency_json(s.latency.asr)},
            {"tts", detail::latency_json(s.latency.tts)},
            {"tool_timeout_ms", s.latency.tool_timeout_ms}}},
          {"budget", s.budget},
          {"system_prompt", s.system_prompt},
          {"turns", turns}};
}

inline Scenario scenario_from_json(const nlohmann::json& j) {
  Scenario s;
  detail::check_keys(j, "scenario", {"vad", "backends", "budget", "system_prompt", "turns"});
  // VAD values are range-checked by validate(), so they are read raw here.
  if (j.contains("vad")) {
    const auto& v = j["vad"];
    detail::check_keys(v, "vad", {"frame_ms", "energy_threshold", "pause_threshold_ms", "end_threshold_ms"});
    detail::read_field(v, "frame_ms", s.vad.frame_ms, "vad");
    detail::read_field(v, "energy_threshold", s.vad.energy_threshold, "vad");
    detail::read_field(v, "pause_threshold_ms", s.vad.pause_threshold_ms, "vad");
    detail::read_field(v, "end_threshold_ms", s.vad.end_threshold_ms, "vad");
  }
  if (j.contains("backends")) {
    detail::check_keys(j["backends"], "backends", {"chat", "asr", "tts", "tool_timeout_ms"});
    s.latency = parse_latencies(j["backends"], s.latency, "backends");
  }
  detail::read_field(j, "budget", s.budget, "scenario");
  detail::read_field(j, "system_prompt", s.system_prompt, "scenario");
  if (!j.contains("turns") || !j["turns"].is_array()) throw ValidationError("scenario: \"turns\" array is required");
  for (std::size_t i = 0; i < j["turns"].size(); ++i) {
    const auto& tj = j["turns"][i];
    const std::string where = "turns[" + std::to_string(i) + "]";
    detail::check_keys(tj, where, {"speech_segments", "transcript", "scripted_response", "tool_calls"});
    ScenarioTurn t;
    if (!tj.contains("speech_segments") || !tj["speech_segments"].is_array()) {
      throw ValidationError(where + ": \"speech_segments\" array is required");
    }
    for (const auto& g : tj["speech_segments"]) {
      detail::check_keys(g, where + ".speech_segments", {"speech_ms", "trailing_silence_ms"});
      SpeechSegment seg;
      detail::read_field(g, "speech_ms", seg.speech_ms, where);
      detail::read_field(g, "trailing_silence_ms", seg.trailing_silence_ms, where);
      t.speech_segments.push_back(seg);
    }
    detail::read_field(tj, "transcript", t.transcript, where);
    if (tj.contains("scripted_response")) {
      std::string r;
      detail::read_field(tj, "scripted_response", r, where);
      t.scripted_response = std::move(r);
    }
    if (tj.contains("tool_calls")) {
      for (const auto& tc : tj["tool_calls"]) {
        detail::check_keys(tc, where + ".tool_calls", {"name", "latency_ms", "payload"});
        ScriptedTool tool;
        detail::read_field(tc, "name", tool.name, where);
        detail::read_field(tc, "latency_ms", tool.latency_ms, where);
        if (tc.contains("payload")) {
          tool.payload = tc["payload"].is_string() ? tc["payload"].get<std::string>() : tc["payload"].dump();
        }
        t.tool_calls.push_back(std::move(tool));
      }
    }
    s.turns.push_back(std::move(t));
  }
  s.validate();
  return s;
}

inline Scenario load_scenario(const std::string& path) { return scenario_from_json(read_json_file(path)); }

inline std::uint64_t scenario_fingerprint(const Scenario& s) {
  const std::string text = scenario_to_json(s).dump();
  return fnv1a64({reinterpret_cast<const std::uint8_t*>(text.data()), text.size()});
}

// --- report -----------------------------------------------------------------

inline constexpr const char* kReproductionNote =
    "Latency and commit-rate figures are produced by construction from the configured VAD thresholds, "
    "backend latency models and pause process on a virtual clock; they are not measurements of real traffic.";

struct TurnReport {
  std::size_t turn_id = 0;  // 1-based scenario turn
  std::int64_t end_of_speech_ms = 0;
  std::optional<std::int64_t> first_audio_ms;
  std::optional<std::int64_t> latency_ms;  // end of speech to first audio chunk
  std::size_t speculations = 0;
  std::size_t committed = 0;
  std::size_t cancelled = 0;
  std::size_t audio_tokens = 0;          // tokens sent for transcription
  std::int64_t transcript_tokens = 0;    // estimate of the stored transcript
  std::int64_t history_tokens = 0;       // whole history after the turn
  std::int64_t user_text_tokens = 0;     // all user turns as stored text
  std::int64_t user_audio_tokens = 0;    // all user turns had they stayed audio
  std::optional<std::int64_t> latency_reduction_ms;
};

struct SimulationReport {
  bool speculation_enabled = true;
  std::uint64_t seed = 0;
  std::uint64_t scenario_fingerprint = 0;
  std::vector<TurnReport> turns;
  std::size_t speculations_issued = 0;
  std::size_t speculations_committed = 0;
  std::size_t speculations_cancelled = 0;
  double commit_rate = 0.0;
  std::optional<double> mean_latency_ms;
  std::optional<double> mean_latency_reduction_ms;
  std::vector<std::string> trace;

  nlohmann::json to_json() const {
    auto opt = [](const auto& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
    auto turns_j = nlohmann::json::array();
    for (const auto& t : turns) {
      turns_j.push_back({{"turn_id", t.turn_id},
                         {"end_of_speech_ms", t.end_of_speech_ms},
                         {"first_audio_ms", opt(t.first_audio_ms)},
                         {"response_latency_ms", opt(t.latency_ms)},
                         {"latency_reduction_ms", opt(t.latency_reduction_ms)},
                         {"speculations", t.speculations},
                         {"committed", t.committed},
                         {"cancelled", t.cancelled},
                         {"audio_tokens", t.audio_tokens},
                         {"transcript_tokens", t.transcript_tokens},
                         {"context_tokens", t.history_tokens},
                         {"user_text_tokens", t.user_text_tokens},
                         {"user_audio_tokens", t.user_audio_tokens}});
    }
    std::ostringstream fp;
    fp << std::hex << std::setw(16) << std::setfill('0') << scenario_fingerprint;
    return {{"speculation_enabled", speculation_enabled},
            {"seed", seed},
            {"scenario_fingerprint", fp.str()},
            {"speculations_issued", speculations_issued},
            {"speculations_committed", speculations_committed},
            {"speculations_cancelled", speculations_cancelled},
            {"commit_rate", commit_rate},
            {"mean_latency_ms", opt(mean_latency_ms)},
            {"mean_latency_reduction_ms", opt(mean_latency_reduction_ms)},
            {"note", kReproductionNote},
            {"turns", turns_j}};
  }

  std::string to_csv() const {
    std::ostringstream out;
    out << "turn_id,latency_ms,speculations,committed\n";
    for (const auto& t : turns) {
      out << t.turn_id << ',';
      if (t.latency_ms) out << *t.latency_ms;
      out << ',' << t.speculations << ',' << t.committed << '\n';
    }
    return out.str();
  }
};

// --- run --------------------------------------------------------------------

namespace detail {

class SimRecorder : public PipelineObserver {
 public:
  bool keep_trace = true;
  std::vector<std::string> trace;
  std::vector<std::int64_t> end_of_speech;        // per committed turn
  std::vector<SpecId> committed_spec;             // per committed turn
  std::map<SpecId, std::int64_t> first_audio;
  std::map<TurnId, std::size_t> transcription_tokens;
  std::vector<TurnId> transcription_order;

  void on_trace(const std::string& line) override {
    if (keep_trace) trace.push_back(line);
  }
  void on_event(const ControllerEvent& ev) override {
    if (ev.kind == EventKind::VadEndOfSpeech) end_of_speech.push_back(ev.at_ms);
  }
  void on_action(const Action& a) override {
    if (a.kind == ActionKind::CommitSpeculation) committed_spec.push_back(a.spec_id);
    if (a.kind == ActionKind::RequestTranscription) {
      transcription_tokens[a.turn_id] = a.tokens.size();
      transcription_order.push_back(a.turn_id);
    }
  }
  void on_audio_out(SpecId spec, const AudioChunk&, std::int64_t at) override {
    first_audio.try_emplace(spec, at);
  }
};

inline std::vector<std::int16_t> speech_pcm(std::int64_t ms) {
  std::vector<std::int16_t> pcm(static_cast<std::size_t>(ms) * 16);
  for (std::size_t i = 0; i < pcm.size(); ++i) {
    pcm[i] = static_cast<std::int16_t>(
        std::lround(8000.0 * std::sin(2.0 * std::numbers::pi * 330.0 * static_cast<double>(i) / 16000.0)));
  }
  return pcm;
}

}  // namespace detail

struct RunOptions {
  bool keep_trace = true;
};

inline SimulationReport run(const Scenario& scenario, bool speculation_enabled, std::uint64_t seed,
                            RunOptions options = {}) {
  scenario.validate();
  const BackendLatencies lat = scenario.latency.reseeded(seed);

  std::vector<std::string> responses, transcripts;
  auto tools = std::make_shared<ScriptedToolExecutor>(lat.tool_timeout_ms);
  for (std::size_t i = 0; i < scenario.turns.size(); ++i) {
    const auto& t = scenario.turns[i];
    responses.push_back(t.scripted_response.value_or("Response " + std::to_string(i + 1) + "."));
    transcripts.push_back(t.transcript);
    for (const auto& tool : t.tool_calls) tools->add_for_turn(i, tool);
  }
  PipelineBackends backends{std::make_shared<ScriptedChatBackend>(responses, lat.chat),
                            std::make_shared<ScriptedAsrBackend>(transcripts, lat.asr),
                            std::make_shared<MockTtsBackend>(lat.tts), tools};
  PipelineConfig cfg;
  cfg.vad = scenario.vad;
  cfg.controller = {speculation_enabled, scenario.budget, scenario.system_prompt};

  detail::SimRecorder rec;
  rec.keep_trace = options.keep_trace;
  DuplexPipeline pipe(cfg, backends, &rec);

  SimulationReport report;
  report.speculation_enabled = speculation_enabled;
  report.seed = seed;
  report.scenario_fingerprint = scenario_fingerprint(scenario);

  std::int64_t user_audio_total = 0;
  std::map<std::int64_t, std::vector<std::int16_t>> speech_cache;
  for (std::size_t i = 0; i < scenario.turns.size(); ++i) {
    for (const auto& seg : scenario.turns[i].speech_segments) {
      auto& pcm = speech_cache[seg.speech_ms];
      if (pcm.empty()) pcm = detail::speech_pcm(seg.speech_ms);
      pipe.push_pcm(pcm);
      pipe.push_silence(seg.trailing_silence_ms);
    }
    pipe.drain();
    if (pipe.state() != ControllerState::Silence || rec.committed_spec.size() != i + 1) {
      throw InvariantViolation("sim: turn " + std::to_string(i + 1) + " did not complete (state " +
                               to_string(pipe.state()) + ")");
    }

    TurnReport tr;
    tr.turn_id = i + 1;
    tr.end_of_speech_ms = rec.end_of_speech[i];
    const SpecId spec = rec.committed_spec[i];
    if (auto it = rec.first_audio.find(spec); it != rec.first_audio.end()) {
      tr.first_audio_ms = it->second;
      tr.latency_ms = it->second - tr.end_of_speech_ms;
    }
    for (const auto& e : pipe.controller().ledger().entries()) {
      if (e.turn_index != i) continue;
      ++tr.speculations;
      tr.committed += e.status == SpecStatus::Committed;
      tr.cancelled += e.status == SpecStatus::Cancelled;
    }
    const auto& history = pipe.controller().history();
    if (rec.transcription_order.size() > i) {
      const TurnId id = rec.transcription_order[i];
      tr.audio_tokens = rec.transcription_tokens[id];
      if (const Turn* t = history.find(id)) tr.transcript_tokens = t->token_estimate();
    }
    user_audio_total += static_cast<std::int64_t>(tr.audio_tokens);
    tr.user_audio_tokens = user_audio_total;
    for (const auto& t : history.turns()) {
      if (t.role == Role::User) tr.user_text_tokens += t.token_estimate();
    }
    tr.history_tokens = history.total_estimate();
    report.turns.push_back(tr);
  }

  const auto& ledger = pipe.controller().ledger();
  report.speculations_issued = ledger.issued();
  report.speculations_committed = ledger.count(SpecStatus::Committed);
  report.speculations_cancelled = ledger.count(SpecStatus::Cancelled);
  report.commit_rate = report.speculations_issued == 0
                           ? 0.0
                           : static_cast<double>(report.speculations_committed) /
                                 static_cast<double>(report.speculations_issued);
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& t : report.turns) {
    if (t.latency_ms) {
      sum += static_cast<double>(*t.latency_ms);
      ++n;
    }
  }
  if (n > 0) report.mean_latency_ms = sum / static_cast<double>(n);
  report.trace = std::move(rec.trace);
  return report;
}

struct RunComparison {
  std::vector<std::int64_t> deltas_ms;  // baseline latency minus candidate latency, per turn
  double mean_reduction_ms = 0.0;
};

inline RunComparison compare_runs(const SimulationReport& baseline, const SimulationReport& candidate) {
  if (baseline.scenario_fingerprint != candidate.scenario_fingerprint || baseline.seed != candidate.seed) {
    throw ComparisonError("compare: reports come from different scenarios or seeds");
  }
  if (baseline.turns.size() != candidate.turns.size()) {
    throw ComparisonError("compare: turn counts differ (" + std::to_string(baseline.turns.size()) + " vs " +
                          std::to_string(candidate.turns.size()) + ")");
  }
  RunComparison out;
  std::int64_t total = 0;
  for (std::size_t i = 0; i < baseline.turns.size(); ++i) {
    const auto& a = baseline.turns[i];
    const auto& b = candidate.turns[i];
    if (!a.latency_ms || !b.latency_ms) {
      throw ComparisonError("compare: turn " + std::to_string(i + 1) + " produced no audio");
    }
    out.deltas_ms.push_back(*a.latency_ms - *b.latency_ms);
    total += out.deltas_ms.back();
  }
  if (!out.deltas_ms.empty()) {
    out.mean_reduction_ms = static_cast<double>(total) / static_cast<double>(out.deltas_ms.size());
  }
  return out;
}

// Runs the scenario as asked and again without speculation, and fills in
// the per-turn and mean reductions against that control.
inline SimulationReport run_with_control(const Scenario& scenario, bool speculation_enabled, std::uint64_t seed,
                                         RunOptions options = {}) {
  SimulationReport report = run(scenario, speculation_enabled, seed, options);
  const SimulationReport control = run(scenario, false, seed, RunOptions{false});
  const RunComparison cmp = compare_runs(control, report);
  for (std::size_t i = 0; i < report.turns.size(); ++i) report.turns[i].latency_reduction_ms = cmp.deltas_ms[i];
  report.mean_latency_reduction_ms = cmp.mean_reduction_ms;
  return report;
}

// --- scenario generator -----------------------------------------------------

struct PauseProcessParams {
  double resume_probability = 0.6;  // q
  std::int64_t min_gap_ms = 200;    // mid-turn gaps; must reach the pause threshold
  std::int64_t max_gap_ms = 680;    // and stay below the end threshold
  std::int64_t min_speech_ms = 300;
  std::int64_t max_speech_ms = 1500;
  std::int64_t final_silence_ms = 800;
  std::uint64_t seed = 0;
};

// Each turn has K pauses: K-1 resumes drawn as a geometric count (continue
// with probability q) and then the final pause, so E[K] = 1/(1-q).
inline Scenario generate_scenarios(const PauseProcessParams& p, std::size_t n_turns, Scenario base = {}) {
  if (!(p.resume_probability >= 0.0 && p.resume_probability < 1.0)) {
    throw ParameterError("generator: resume probability must lie in [0, 1)");
  }
  if (n_turns == 0) throw ParameterError("generator: need at least one turn");
  const auto& vad = base.vad;
  vad.validate();
  const auto f = vad.frame_ms;
  if (p.min_gap_ms < vad.pause_threshold_ms || p.max_gap_ms >= vad.end_threshold_ms || p.min_gap_ms > p.max_gap_ms) {
    throw ParameterError("generator: gaps must lie in [pause_threshold_ms, end_threshold_ms)");
  }
  if (p.min_speech_ms <= 0 || p.min_speech_ms > p.max_speech_ms) {
    throw ParameterError("generator: speech bounds must satisfy 0 < min <= max");
  }
  for (auto v : {p.min_gap_ms, p.max_gap_ms, p.final_silence_ms}) {
    if (v % f != 0) throw ParameterError("generator: gap and silence bounds must be multiples of frame_ms");
  }
  if (p.final_silence_ms < vad.end_threshold_ms) {
    throw ParameterError("generator: final silence must reach end_threshold_ms");
  }
  std::mt19937_64 rng(p.seed);
  std::bernoulli_distribution resume(p.resume_probability);
  auto frames = [&](std::int64_t lo, std::int64_t hi) {
    std::uniform_int_distribution<std::int64_t> d((lo + f - 1) / f, hi / f);
    return d(rng) * f;
  };
  base.turns.clear();
  for (std::size_t i = 0; i < n_turns; ++i) {
    ScenarioTurn t;
    while (resume(rng)) t.speech_segments.push_back({frames(p.min_speech_ms, p.max_speech_ms),
                                                     frames(p.min_gap_ms, p.max_gap_ms)});
    t.speech_segments.push_back({frames(p.min_speech_ms, p.max_speech_ms), frames(p.final_silence_ms, p.final_silence_ms)});
    t.transcript = "user turn " + std::to_string(i + 1);
    base.turns.push_back(std::move(t));
  }
  base.validate();
  return base;
}

}  // namespace steporch
