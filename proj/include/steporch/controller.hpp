#pragma once

// The interaction controller: a four-state machine (Silence, UserSpeaking,
// UserPaused, BotReplying) that consumes one totally ordered event stream and
// emits Actions as its only side-effect channel.
//
// A detected pause launches a speculative generation over a prompt snapshot.
// Resumed speech cancels it; end of speech commits the latest one. At most
// one speculation is in flight at a time, so per user turn exactly one entry
// is committed and every earlier entry of that turn is cancelled.

#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "steporch/context.hpp"
#include "steporch/errors.hpp"
#include "steporch/tokens.hpp"
#include "steporch/tool_router.hpp"

namespace steporch {

enum class ControllerState { Silence, UserSpeaking, UserPaused, BotReplying };

inline const char* to_string(ControllerState s) {
  switch (s) {
    case ControllerState::Silence: return "Silence";
    case ControllerState::UserSpeaking: return "UserSpeaking";
    case ControllerState::UserPaused: return "UserPaused";
    case ControllerState::BotReplying: return "BotReplying";
  }
  return "?";
}

using SpecId = std::uint64_t;

enum class SpecStatus { InFlight, Cancelled, Committed };

inline const char* to_string(SpecStatus s) {
  switch (s) {
    case SpecStatus::InFlight: return "InFlight";
    case SpecStatus::Cancelled: return "Cancelled";
    case SpecStatus::Committed: return "Committed";
  }
  return "?";
}

struct LedgerEntry {
  SpecId spec_id = 0;
  std::int64_t issued_at_ms = 0;
  SpecStatus status = SpecStatus::InFlight;
  std::size_t turn_index = 0;
};

class SpeculationLedger {
 public:
  SpecId issue(std::int64_t at_ms, std::size_t turn_index) {
    const SpecId id = entries_.empty() ? 1 : entries_.back().spec_id + 1;
    entries_.push_back({id, at_ms, SpecStatus::InFlight, turn_index});
    return id;
  }

  void cancel(SpecId id) { transition(id, SpecStatus::Cancelled); }
  void commit(SpecId id) { transition(id, SpecStatus::Committed); }

  const LedgerEntry* find(SpecId id) const {
    if (id == 0 || id > entries_.size()) return nullptr;
    return &entries_[id - 1];
  }

  std::span<const LedgerEntry> entries() const noexcept { return entries_; }
  std::size_t issued() const noexcept { return entries_.size(); }
  std::size_t count(SpecStatus s) const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.status == s ? 1 : 0;
    return n;
  }

 private:
  void transition(SpecId id, SpecStatus to) {
    if (id == 0 || id > entries_.size()) {
      throw InvariantViolation("ledger: unknown spec_id " + std::to_string(id));
    }
    auto& e = entries_[id - 1];
    if (e.status != SpecStatus::InFlight) {
      throw InvariantViolation("ledger: spec_id " + std::to_string(id) + " is " +
                               to_string(e.status) + ", not InFlight");
    }
    e.status = to;
  }

  std::vector<LedgerEntry> entries_;
};

// --- events -----------------------------------------------------------------

enum class EventKind {
  VadSpeechStart,
  VadPauseDetected,
  VadSpeechResume,
  VadEndOfSpeech,
  BackendFirstToken,
  BackendTextChunk,
  BackendDone,
  BackendFailed,
  PlaybackFinished,
  ToolResult,
  UserAudio,
  AsrTranscript,
};

inline const char* to_string(EventKind k) {
  switch (k) {
    case EventKind::VadSpeechStart: return "VadSpeechStart";
    case EventKind::VadPauseDetected: return "VadPauseDetected";
    case EventKind::VadSpeechResume: return "VadSpeechResume";
    case EventKind::VadEndOfSpeech: return "VadEndOfSpeech";
    case EventKind::BackendFirstToken: return "BackendFirstToken";
    case EventKind::BackendTextChunk: return "BackendTextChunk";
    case EventKind::BackendDone: return "BackendDone";
    case EventKind::BackendFailed: return "BackendFailed";
    case EventKind::PlaybackFinished: return "PlaybackFinished";
    case EventKind::ToolResult: return "ToolResult";
    case EventKind::UserAudio: return "UserAudio";
    case EventKind::AsrTranscript: return "AsrTranscript";
  }
  return "?";
}

struct ControllerEvent {
  EventKind kind = EventKind::VadSpeechStart;
  std::int64_t at_ms = 0;
  SpecId spec_id = 0;
  std::string text;  // chunk text, tool payload, transcript or failure reason
  CallId call_id = 0;
  bool is_error = false;  // ToolResult carries an error payload
  TurnId turn_id = 0;
  std::vector<AudioToken> tokens;

  static ControllerEvent make(EventKind k, std::int64_t at, SpecId id = 0, std::string text = {}) {
    ControllerEvent e;
    e.kind = k;
    e.at_ms = at;
    e.spec_id = id;
    e.text = std::move(text);
    return e;
  }
  static ControllerEvent vad(EventKind k, std::int64_t at) { return make(k, at); }
  static ControllerEvent first_token(SpecId id, std::int64_t at) {
    return make(EventKind::BackendFirstToken, at, id);
  }
  static ControllerEvent text_chunk(SpecId id, std::string text, std::int64_t at) {
    return make(EventKind::BackendTextChunk, at, id, std::move(text));
  }
  static ControllerEvent done(SpecId id, std::int64_t at) { return make(EventKind::BackendDone, at, id); }
  static ControllerEvent failed(SpecId id, std::string reason, std::int64_t at) {
    return make(EventKind::BackendFailed, at, id, std::move(reason));
  }
  static ControllerEvent playback_finished(std::int64_t at) {
    return make(EventKind::PlaybackFinished, at);
  }
  static ControllerEvent tool_result(CallId id, std::string payload, bool error, std::int64_t at) {
    ControllerEvent e = make(EventKind::ToolResult, at);
    e.call_id = id;
    e.text = std::move(payload);
    e.is_error = error;
    return e;
  }
  static ControllerEvent user_audio(std::vector<AudioToken> tokens, std::int64_t at) {
    ControllerEvent e = make(EventKind::UserAudio, at);
    e.tokens = std::move(tokens);
    return e;
  }
  static ControllerEvent transcript(TurnId turn, std::string text, std::int64_t at) {
    ControllerEvent e = make(EventKind::AsrTranscript, at);
    e.turn_id = turn;
    e.text = std::move(text);
    return e;
  }
};

// --- actions ----------------------------------------------------------------

enum class ActionKind {
  StartSpeculation,
  CancelSpeculation,
  CommitSpeculation,
  AbortPlayback,
  ForwardTextToTts,
  FinishTts,
  DispatchTool,
  AppendHistory,
  RequestTranscription,
  Warning,
};

inline const char* to_string(ActionKind k) {
  switch (k) {
    case ActionKind::StartSpeculation: return "StartSpeculation";
    case ActionKind::CancelSpeculation: return "CancelSpeculation";
    case ActionKind::CommitSpeculation: return "CommitSpeculation";
    case ActionKind::AbortPlayback: return "AbortPlayback";
    case ActionKind::ForwardTextToTts: return "ForwardTextToTts";
    case ActionKind::FinishTts: return "FinishTts";
    case ActionKind::DispatchTool: return "DispatchTool";
    case ActionKind::AppendHistory: return "AppendHistory";
    case ActionKind::RequestTranscription: return "RequestTranscription";
    case ActionKind::Warning: return "Warning";
  }
  return "?";
}

struct Action {
  ActionKind kind = ActionKind::Warning;
  std::int64_t at_ms = 0;
  SpecId spec_id = 0;
  std::size_t turn_index = 0;                       // StartSpeculation, RequestTranscription
  std::shared_ptr<const PromptSnapshot> snapshot;   // StartSpeculation
  std::string text;                                 // ForwardTextToTts, AppendHistory, Warning
  ToolCallDirective tool;                           // DispatchTool
  Role role = Role::Assistant;                      // AppendHistory
  bool truncated = false;                           // AppendHistory
  TurnId turn_id = 0;                               // RequestTranscription
  std::vector<AudioToken> tokens;                   // RequestTranscription
};

// --- trace log --------------------------------------------------------------
// One line per record: <at_ms>\t<EVENT|ACTION>\t<kind>\t<details>

namespace detail {
inline std::string quoted(const std::string& s) { return nlohmann::json(s).dump(); }
}  // namespace detail

inline std::string format_event(const ControllerEvent& e) {
  std::ostringstream d;
  switch (e.kind) {
    case EventKind::BackendFirstToken:
    case EventKind::BackendDone:
      d << "spec_id=" << e.spec_id;
      break;
    case EventKind::BackendTextChunk:
      d << "spec_id=" << e.spec_id << " text=" << detail::quoted(e.text);
      break;
    case EventKind::BackendFailed:
      d << "spec_id=" << e.spec_id << " reason=" << detail::quoted(e.text);
      break;
    case EventKind::ToolResult:
      d << "call_id=" << e.call_id << " error=" << (e.is_error ? "true" : "false")
        << " payload=" << detail::quoted(e.text);
      break;
    case EventKind::UserAudio:
      d << "tokens=" << e.tokens.size();
      break;
    case EventKind::AsrTranscript:
      d << "turn_id=" << e.turn_id << " text=" << detail::quoted(e.text);
      break;
    default:
      d << "-";
  }
  return std::to_string(e.at_ms) + "\tEVENT\t" + to_string(e.kind) + "\t" + d.str();
}

inline std::string format_action(const Action& a) {
  std::ostringstream d;
  switch (a.kind) {
    case ActionKind::StartSpeculation:
      d << "spec_id=" << a.spec_id << " turns=" << a.snapshot->turns().size()
        << " audio_tokens=" << a.snapshot->live_audio().size()
        << " estimate=" << a.snapshot->token_estimate();
      break;
    case ActionKind::CancelSpeculation:
    case ActionKind::CommitSpeculation:
    case ActionKind::AbortPlayback:
    case ActionKind::FinishTts:
      d << "spec_id=" << a.spec_id;
      break;
    case ActionKind::ForwardTextToTts:
      d << "spec_id=" << a.spec_id << " text=" << detail::quoted(a.text);
      break;
    case ActionKind::DispatchTool:
      d << "call_id=" << a.tool.call_id << " name=" << a.tool.name
        << " args=" << detail::quoted(a.tool.args);
      break;
    case ActionKind::AppendHistory:
      d << "role=" << to_string(a.role) << " truncated=" << (a.truncated ? "true" : "false")
        << " text=" << detail::quoted(a.text);
      break;
    case ActionKind::RequestTranscription:
      d << "turn_id=" << a.turn_id << " tokens=" << a.tokens.size();
      break;
    case ActionKind::Warning:
      d << "reason=" << detail::quoted(a.text);
      break;
  }
  return std::to_string(a.at_ms) + "\tACTION\t" + to_string(a.kind) + "\t" + d.str();
}

// --- controller -------------------------------------------------------------

struct ControllerConfig {
  bool speculation_enabled = true;
  std::int64_t budget = 4096;
  std::string system_prompt;
};

class InteractionController {
 public:
  explicit InteractionController(ControllerConfig config = {}) : config_(std::move(config)) {
    if (config_.budget <= 0) throw ParameterError("controller: budget must be positive");
    if (!config_.system_prompt.empty()) history_.push_turn(Role::System, config_.system_prompt);
  }

  std::vector<Action> handle_event(const ControllerEvent& ev) {
    if (ev.at_ms < last_at_ms_) {
      throw ProtocolError(std::string("controller: event ") + to_string(ev.kind) + " at " +
                          std::to_string(ev.at_ms) + " ms precedes last consumed time " +
                          std::to_string(last_at_ms_) + " ms");
    }
    last_at_ms_ = ev.at_ms;
    std::vector<Action> out;
    switch (ev.kind) {
      case EventKind::VadSpeechStart: on_speech_start(ev, out); break;
      case EventKind::VadPauseDetected: on_pause(ev, out); break;
      case EventKind::VadSpeechResume: on_resume(ev, out); break;
      case EventKind::VadEndOfSpeech: on_end_of_speech(ev, out); break;
      case EventKind::BackendFirstToken:
      case EventKind::BackendTextChunk:
      case EventKind::BackendDone:
      case EventKind::BackendFailed: on_backend(ev, out); break;
      case EventKind::PlaybackFinished: on_playback_finished(ev, out); break;
      case EventKind::ToolResult: on_tool_result(ev, out); break;
      case EventKind::UserAudio: on_user_audio(ev); break;
      case EventKind::AsrTranscript: on_transcript(ev, out); break;
    }
    return out;
  }

  ControllerState state() const noexcept { return state_; }
  const SpeculationLedger& ledger() const noexcept { return ledger_; }
  const ConversationHistory& history() const noexcept { return history_; }
  const ControllerConfig& config() const noexcept { return config_; }
  // Index of the user turn currently being (or next to be) spoken.
  std::size_t turn_index() const noexcept { return turn_index_; }
  std::optional<SpecId> in_flight() const noexcept { return in_flight_; }
  std::optional<SpecId> replying() const noexcept {
    return reply_ ? std::optional<SpecId>(reply_->spec_id) : std::nullopt;
  }

 private:
  struct Response {
    SpecId spec_id = 0;
    std::string buffered;  // raw text received before commit
    std::string spoken;    // text forwarded to TTS
    bool done = false;
    bool finished = false;  // router flushed and TTS told the text is complete
    std::unique_ptr<StreamingToolRouter> router;
  };

  [[noreturn]] void protocol_error(const ControllerEvent& ev) const {
    throw ProtocolError(std::string("controller: event ") + to_string(ev.kind) +
                        " is invalid in state " + to_string(state_));
  }

  Action make(ActionKind k, std::int64_t at, SpecId id = 0) const {
    Action a;
    a.kind = k;
    a.at_ms = at;
    a.spec_id = id;
    return a;
  }

  void warn(std::vector<Action>& out, std::int64_t at, std::string reason) const {
    Action a = make(ActionKind::Warning, at);
    a.text = std::move(reason);
    out.push_back(std::move(a));
  }

  void start_speculation(std::int64_t at, std::vector<Action>& out) {
    auto snapshot = std::make_shared<const PromptSnapshot>(history_.snapshot_prompt(config_.budget));
    const SpecId id = ledger_.issue(at, turn_index_);
    in_flight_ = id;
    pending_.emplace();
    pending_->spec_id = id;
    Action a = make(ActionKind::StartSpeculation, at, id);
    a.turn_index = turn_index_;
    a.snapshot = std::move(snapshot);
    out.push_back(std::move(a));
  }

  void on_speech_start(const ControllerEvent& ev, std::vector<Action>& out) {
    if (state_ == ControllerState::BotReplying) {
      barge_in(ev.at_ms, out);
    } else if (state_ != ControllerState::Silence) {
      protocol_error(ev);
    }
    state_ = ControllerState::UserSpeaking;
  }

  void barge_in(std::int64_t at, std::vector<Action>& out) {
    if (!reply_) return;
    out.push_back(make(ActionKind::AbortPlayback, at, reply_->spec_id));
    for (auto& [call, info] : tool_calls_) {
      if (info.spec_id == reply_->spec_id) info.discarded = true;
    }
    append_assistant(at, reply_->spoken, /*truncated=*/true, out);
    reply_.reset();
  }

  void on_pause(const ControllerEvent& ev, std::vector<Action>& out) {
    if (state_ != ControllerState::UserSpeaking) protocol_error(ev);
    state_ = ControllerState::UserPaused;
    if (config_.speculation_enabled) start_speculation(ev.at_ms, out);
  }

  void on_resume(const ControllerEvent& ev, std::vector<Action>& out) {
    if (state_ != ControllerState::UserPaused) protocol_error(ev);
    state_ = ControllerState::UserSpeaking;
    if (in_flight_) {
      ledger_.cancel(*in_flight_);
      out.push_back(make(ActionKind::CancelSpeculation, ev.at_ms, *in_flight_));
      in_flight_.reset();
      pending_.reset();
    }
  }

  void on_end_of_speech(const ControllerEvent& ev, std::vector<Action>& out) {
    if (state_ != ControllerState::UserPaused) protocol_error(ev);
    if (!config_.speculation_enabled) start_speculation(ev.at_ms, out);
    state_ = ControllerState::BotReplying;

    const SpecId id = *in_flight_;
    ledger_.commit(id);
    out.push_back(make(ActionKind::CommitSpeculation, ev.at_ms, id));
    in_flight_.reset();

    if (const auto open = history_.open_user_turn()) {
      const Turn* turn = history_.find(*open);
      if (turn && turn->audio && !turn->audio->empty()) {
        Action a = make(ActionKind::RequestTranscription, ev.at_ms);
        a.turn_id = *open;
        a.turn_index = turn_index_;
        a.tokens.assign(turn->audio->tokens().begin(), turn->audio->tokens().end());
        out.push_back(std::move(a));
      }
    }
    history_.close_user_turn();
    ++turn_index_;

    reply_ = std::move(pending_);
    pending_.reset();
    reply_->router = std::make_unique<StreamingToolRouter>(next_call_id_);
    if (!reply_->buffered.empty()) {
      route(ev.at_ms, reply_->buffered, out);
      reply_->buffered.clear();
    }
    if (reply_->done) finish_reply(ev.at_ms, out);
  }

  void route(std::int64_t at, const std::string& text, std::vector<Action>& out) {
    RoutedText routed = reply_->router->feed(text);
    emit_routed(at, routed, out);
  }

  void emit_routed(std::int64_t at, RoutedText& routed, std::vector<Action>& out) {
    next_call_id_ = reply_->router->next_call_id();
    for (auto& piece : routed.pieces) {
      if (piece.directive) {
        Action a = make(ActionKind::DispatchTool, at, reply_->spec_id);
        a.tool = *piece.directive;
        tool_calls_[a.tool.call_id] = {reply_->spec_id, false};
        out.push_back(std::move(a));
      } else {
        Action a = make(ActionKind::ForwardTextToTts, at, reply_->spec_id);
        a.text = piece.text;
        reply_->spoken += piece.text;
        out.push_back(std::move(a));
      }
    }
    for (auto& m : routed.malformed) warn(out, at, "malformed directive: " + m);
  }

  void finish_reply(std::int64_t at, std::vector<Action>& out) {
    RoutedText tail = reply_->router->finish();
    emit_routed(at, tail, out);
    reply_->finished = true;
    out.push_back(make(ActionKind::FinishTts, at, reply_->spec_id));
  }

  void on_backend(const ControllerEvent& ev, std::vector<Action>& out) {
    Response* r = nullptr;
    if (pending_ && pending_->spec_id == ev.spec_id) r = &*pending_;
    if (reply_ && reply_->spec_id == ev.spec_id && !reply_->finished) r = &*reply_;
    if (!r) {
      warn(out, ev.at_ms,
           std::string("stale ") + to_string(ev.kind) + " for spec_id=" + std::to_string(ev.spec_id));
      return;
    }
    const bool committed = r == (reply_ ? &*reply_ : nullptr);
    switch (ev.kind) {
      case EventKind::BackendFirstToken:
        break;
      case EventKind::BackendTextChunk:
        if (committed) {
          route(ev.at_ms, ev.text, out);
        } else {
          r->buffered += ev.text;
        }
        break;
      case EventKind::BackendFailed:
        warn(out, ev.at_ms, "backend failure for spec_id=" + std::to_string(ev.spec_id) + ": " + ev.text);
        [[fallthrough]];
      case EventKind::BackendDone:
        r->done = true;
        if (committed) finish_reply(ev.at_ms, out);
        break;
      default:
        break;
    }
  }

  void on_playback_finished(const ControllerEvent& ev, std::vector<Action>& out) {
    if (state_ != ControllerState::BotReplying) protocol_error(ev);
    if (reply_) {
      append_assistant(ev.at_ms, reply_->spoken, !reply_->finished, out);
      reply_.reset();
    }
    state_ = ControllerState::Silence;
  }

  void on_tool_result(const ControllerEvent& ev, std::vector<Action>& out) {
    auto it = tool_calls_.find(ev.call_id);
    if (it == tool_calls_.end()) {
      warn(out, ev.at_ms, "tool result for unknown call_id=" + std::to_string(ev.call_id));
      return;
    }
    const bool discarded = it->second.discarded;
    tool_calls_.erase(it);
    if (discarded) {
      warn(out, ev.at_ms,
           "discarded tool result for call_id=" + std::to_string(ev.call_id) + " (response aborted)");
      return;
    }
    Action a = make(ActionKind::AppendHistory, ev.at_ms);
    a.role = Role::Tool;
    a.text = ev.is_error ? "error: " + ev.text : ev.text;
    history_.push_turn(Role::Tool, a.text);
    out.push_back(std::move(a));
  }

  void on_user_audio(const ControllerEvent& ev) {
    if (state_ != ControllerState::UserSpeaking && state_ != ControllerState::UserPaused) return;
    if (ev.tokens.empty()) return;
    history_.append_user_audio(ev.tokens);
  }

  void on_transcript(const ControllerEvent& ev, std::vector<Action>& out) {
    if (!history_.find(ev.turn_id)) {
      warn(out, ev.at_ms, "transcript for unknown turn_id=" + std::to_string(ev.turn_id));
      return;
    }
    if (history_.apply_transcript(ev.turn_id, ev.text) == ApplyStatus::AlreadyText) {
      warn(out, ev.at_ms, "transcript already applied for turn_id=" + std::to_string(ev.turn_id));
    }
  }

  void append_assistant(std::int64_t at, const std::string& text, bool truncated,
                        std::vector<Action>& out) {
    Action a = make(ActionKind::AppendHistory, at);
    a.role = Role::Assistant;
    a.text = text;
    a.truncated = truncated;
    history_.push_turn(Role::Assistant, text, truncated);
    out.push_back(std::move(a));
  }

  struct ToolCallInfo {
    SpecId spec_id = 0;
    bool discarded = false;
  };

  ControllerConfig config_;
  ControllerState state_ = ControllerState::Silence;
  std::int64_t last_at_ms_ = 0;
  SpeculationLedger ledger_;
  ConversationHistory history_;
  std::optional<SpecId> in_flight_;
  std::optional<Response> pending_;
  std::optional<Response> reply_;
  std::map<CallId, ToolCallInfo> tool_calls_;
  CallId next_call_id_ = 1;
  std::size_t turn_index_ = 0;
};

}  // namespace steporch
