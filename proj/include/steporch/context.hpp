#pragma once

// Conversation history kept as text. Only the live user turn may carry audio
// tokens; once its transcript lands the audio is dropped. Prompt snapshots are
// built from the history under a token budget, evicting oldest turns first
// with the system turn pinned.

#include <algorithm>
#include <cstdint>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "steporch/errors.hpp"
#include "steporch/tokens.hpp"

namespace steporch {

// ceil(code points / 4). Counts UTF-8 lead bytes, so malformed input degrades
// to a byte-based estimate rather than failing.
inline std::int64_t estimate_tokens(std::string_view text) {
  std::int64_t code_points = 0;
  for (unsigned char c : text) {
    if ((c & 0xC0) != 0x80) ++code_points;
  }
  return (code_points + 3) / 4;
}

inline std::size_t utf8_code_points(std::string_view text) {
  std::size_t n = 0;
  for (unsigned char c : text) {
    if ((c & 0xC0) != 0x80) ++n;
  }
  return n;
}

enum class Role { User, Assistant, System, Tool };

inline const char* to_string(Role r) {
  switch (r) {
    case Role::User: return "user";
    case Role::Assistant: return "assistant";
    case Role::System: return "system";
    case Role::Tool: return "tool";
  }
  return "?";
}

using TurnId = std::uint64_t;

struct Turn {
  TurnId turn_id = 0;
  Role role = Role::User;
  std::string text;
  std::optional<InterleavedSequence> audio;
  bool truncated = false;

  std::size_t audio_token_count() const { return audio ? audio->size() : 0; }
  std::int64_t token_estimate() const {
    return estimate_tokens(text) + static_cast<std::int64_t>(audio_token_count());
  }
};

struct RenderedTurn {
  TurnId turn_id = 0;
  Role role = Role::User;
  std::string text;
  std::size_t audio_token_count = 0;
  bool truncated = false;
  bool operator==(const RenderedTurn&) const = default;
};

// Immutable once built; safe to hand to concurrent backend calls.
class PromptSnapshot {
 public:
  PromptSnapshot() = default;
  PromptSnapshot(std::vector<RenderedTurn> turns, InterleavedSequence live_audio,
                 std::int64_t token_estimate, std::int64_t budget)
      : turns_(std::move(turns)),
        live_audio_(std::move(live_audio)),
        token_estimate_(token_estimate),
        budget_(budget) {}

  std::span<const RenderedTurn> turns() const noexcept { return turns_; }
  const InterleavedSequence& live_audio() const noexcept { return live_audio_; }
  std::int64_t token_estimate() const noexcept { return token_estimate_; }
  std::int64_t budget() const noexcept { return budget_; }

  bool operator==(const PromptSnapshot&) const = default;

 private:
  std::vector<RenderedTurn> turns_;
  InterleavedSequence live_audio_;
  std::int64_t token_estimate_ = 0;
  std::int64_t budget_ = 0;
};

enum class ApplyStatus { Applied, AlreadyText };

class ConversationHistory {
 public:
  // Appends to the open user turn, opening one if needed. Opening a new user
  // turn drops the audio of an earlier turn whose transcript is still pending
  // (the ASR request already holds a copy); the earlier turn stays
  // text-pending until apply_transcript lands.
  TurnId append_user_audio(std::span<const AudioToken> tokens) {
    auto chunk = InterleavedSequence::from_tokens({tokens.begin(), tokens.end()});
    if (!open_user_turn_) {
      for (auto& t : turns_) {
        if (!t.audio) continue;
        if (!pending_.contains(t.turn_id)) {
          throw InvariantViolation("history: turn " + std::to_string(t.turn_id) +
                                   " still holds audio without a pending transcription");
        }
        t.audio.reset();
      }
      Turn turn;
      turn.turn_id = next_id_++;
      turn.role = Role::User;
      turn.audio = InterleavedSequence{};
      turns_.push_back(std::move(turn));
      open_user_turn_ = turns_.back().turn_id;
    }
    Turn& turn = turns_.back();
    if (!turn.audio) turn.audio = InterleavedSequence{};
    turn.audio->append(chunk);
    pending_.insert(turn.turn_id);
    return turn.turn_id;
  }

  void close_user_turn() { open_user_turn_.reset(); }
  std::optional<TurnId> open_user_turn() const noexcept { return open_user_turn_; }

  ApplyStatus apply_transcript(TurnId id, std::string text) {
    Turn* turn = find_mutable(id);
    if (!turn) throw NotFoundError("history: no turn with id " + std::to_string(id));
    if (!pending_.contains(id)) return ApplyStatus::AlreadyText;
    turn->text = std::move(text);
    turn->audio.reset();
    pending_.erase(id);
    return ApplyStatus::Applied;
  }

  TurnId push_turn(Role role, std::string text, bool truncated = false) {
    Turn t;
    t.role = role;
    t.text = std::move(text);
    t.truncated = truncated;
    return push_turn(std::move(t));
  }

  // Generic insertion (imports, fixtures). Assigns a fresh id; closes any
  // open user turn.
  TurnId push_turn(Turn turn) {
    if (turn.audio && turn.role != Role::User) {
      throw InvariantViolation(std::string("history: ") + to_string(turn.role) +
                               " turns never carry audio");
    }
    if (turn.audio && audio_turn_count() > 0) {
      throw InvariantViolation("history: another turn already carries audio");
    }
    open_user_turn_.reset();
    turn.turn_id = next_id_++;
    turns_.push_back(std::move(turn));
    return turns_.back().turn_id;
  }

  PromptSnapshot snapshot_prompt(std::int64_t budget) const {
    if (budget <= 0) throw ParameterError("snapshot: budget must be positive");
    const Turn* system = nullptr;
    for (const auto& t : turns_) {
      if (t.role == Role::System) {
        system = &t;
        break;
      }
    }
    const Turn* live = nullptr;
    for (const auto& t : turns_) {
      if (t.audio) live = &t;
    }
    std::int64_t used = (system ? system->token_estimate() : 0) +
                        (live ? live->token_estimate() : 0);
    if (used > budget) {
      throw OverBudgetError("snapshot: system + live turn need " + std::to_string(used) +
                            " tokens, budget is " + std::to_string(budget));
    }
    std::vector<const Turn*> picked;
    for (auto it = turns_.rbegin(); it != turns_.rend(); ++it) {
      if (&*it == system || &*it == live) continue;
      const auto cost = it->token_estimate();
      if (used + cost > budget) break;
      used += cost;
      picked.push_back(&*it);
    }
    if (system) picked.push_back(system);
    if (live) picked.push_back(live);
    std::sort(picked.begin(), picked.end(),
              [](const Turn* a, const Turn* b) { return a->turn_id < b->turn_id; });

    std::vector<RenderedTurn> rendered;
    rendered.reserve(picked.size());
    for (const Turn* t : picked) {
      rendered.push_back({t->turn_id, t->role, t->text, t->audio_token_count(), t->truncated});
    }
    return PromptSnapshot(std::move(rendered), live ? *live->audio : InterleavedSequence{},
                          used, budget);
  }

  std::span<const Turn> turns() const noexcept { return turns_; }
  const std::set<TurnId>& pending_transcriptions() const noexcept { return pending_; }
  bool is_pending(TurnId id) const { return pending_.contains(id); }

  const Turn* find(TurnId id) const {
    for (const auto& t : turns_) {
      if (t.turn_id == id) return &t;
    }
    return nullptr;
  }

  std::size_t audio_turn_count() const {
    return static_cast<std::size_t>(
        std::count_if(turns_.begin(), turns_.end(), [](const Turn& t) { return t.audio.has_value(); }));
  }

  std::int64_t total_estimate() const {
    std::int64_t total = 0;
    for (const auto& t : turns_) total += t.token_estimate();
    return total;
  }

  nlohmann::json to_json() const {
    auto arr = nlohmann::json::array();
    for (const auto& t : turns_) {
      arr.push_back({{"turn_id", t.turn_id},
                     {"role", to_string(t.role)},
                     {"text", t.text},
                     {"audio_token_count", t.audio_token_count()},
                     {"truncated", t.truncated}});
    }
    return arr;
  }

 private:
  Turn* find_mutable(TurnId id) {
    for (auto& t : turns_) {
      if (t.turn_id == id) return &t;
    }
    return nullptr;
  }

  std::vector<Turn> turns_;
  std::set<TurnId> pending_;
  std::optional<TurnId> open_user_turn_;
  TurnId next_id_ = 1;
};

}  // namespace steporch
