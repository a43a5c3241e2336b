#pragma once

// The full duplex pipeline for one session: PCM in, VAD and streaming
// tokenizer in parallel, the interaction controller, and the backends. All
// work is ordered on one EventLoop; the clock is media time (advanced by
// pushed audio) and can be run forward explicitly with advance_to/drain.
//
// The same code serves the simulator and the live gateway.

#include <cstdint>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "steporch/backends.hpp"
#include "steporch/controller.hpp"
#include "steporch/errors.hpp"
#include "steporch/event_loop.hpp"
#include "steporch/stream_tokenizer.hpp"
#include "steporch/vad.hpp"

namespace steporch {

struct PipelineConfig {
  VadConfig vad;
  SegmenterConfig segmenter;
  ControllerConfig controller;
};

struct PipelineBackends {
  std::shared_ptr<ChatBackend> chat;
  std::shared_ptr<AsrBackend> asr;
  std::shared_ptr<TtsBackend> tts;
  std::shared_ptr<ToolExecutor> tools;
};

// Output hooks. Every method defaults to a no-op.
class PipelineObserver {
 public:
  virtual ~PipelineObserver() = default;
  virtual void on_trace(const std::string& /*line*/) {}
  virtual void on_event(const ControllerEvent& /*event*/) {}
  virtual void on_action(const Action& /*action*/) {}
  virtual void on_state(ControllerState /*state*/, std::int64_t /*at_ms*/) {}
  virtual void on_text_partial(SpecId /*spec*/, const std::string& /*text*/, std::int64_t /*at_ms*/) {}
  virtual void on_audio_out(SpecId /*spec*/, const AudioChunk& /*chunk*/, std::int64_t /*at_ms*/) {}
  virtual void on_tool_call(const ToolCallDirective& /*call*/, std::int64_t /*at_ms*/) {}
  virtual void on_tool_result(CallId /*call*/, const std::string& /*payload*/, bool /*error*/,
                              std::int64_t /*at_ms*/) {}
  virtual void on_backend_error(const std::string& /*what*/, std::int64_t /*at_ms*/) {}
};

class DuplexPipeline {
 public:
  DuplexPipeline(PipelineConfig config, PipelineBackends backends, PipelineObserver* observer = nullptr)
      : config_(config),
        backends_(std::move(backends)),
        observer_(observer ? observer : &null_observer_),
        vad_(config.vad),
        tokenizer_(config.segmenter),
        controller_(config.controller) {
    if (!backends_.chat || !backends_.asr || !backends_.tts || !backends_.tools) {
      throw ValidationError("pipeline: all four backends are required");
    }
  }

  DuplexPipeline(const DuplexPipeline&) = delete;
  DuplexPipeline& operator=(const DuplexPipeline&) = delete;

  // Appends PCM at the current end of the media stream; processes every
  // complete VAD frame and everything scheduled up to the new media time.
  // Audio pushed after drain() ran the clock ahead starts at the clock.
  void push_pcm(std::span<const std::int16_t> samples) {
    if (pcm_remainder_.empty()) media_ms_ = std::max(media_ms_, loop_.now());
    pcm_remainder_.insert(pcm_remainder_.end(), samples.begin(), samples.end());
    const std::size_t n = config_.vad.samples_per_frame();
    std::size_t off = 0;
    while (pcm_remainder_.size() - off >= n) {
      PcmFrame frame{{pcm_remainder_.begin() + static_cast<std::ptrdiff_t>(off),
                      pcm_remainder_.begin() + static_cast<std::ptrdiff_t>(off + n)},
                     kSampleRateHz, media_ms_};
      push_frame(frame);
      off += n;
    }
    pcm_remainder_.erase(pcm_remainder_.begin(), pcm_remainder_.begin() + static_cast<std::ptrdiff_t>(off));
  }

  void push_silence(std::int64_t duration_ms) {
    const std::vector<std::int16_t> frame(config_.vad.samples_per_frame(), 0);
    for (std::int64_t t = 0; t < duration_ms; t += config_.vad.frame_ms) push_pcm(frame);
  }

  // One VAD frame at media time frame.timestamp_ms.
  void push_frame(const PcmFrame& frame) {
    if (frame.timestamp_ms < media_ms_) {
      throw FormatError("pipeline: frame at " + std::to_string(frame.timestamp_ms) +
                        " ms overlaps media already consumed up to " + std::to_string(media_ms_) + " ms");
    }
    advance_to(frame.timestamp_ms);
    const auto vad_events = vad_.push_frame(frame);
    auto tokens = tokenizer_.push_pcm(frame);
    const std::int64_t end = frame.timestamp_ms + config_.vad.frame_ms;
    // Onsets are stamped at the frame start and so precede this frame's
    // tokens; silence-driven events follow them.
    if (!tokens.empty()) {
      post_event(end, ControllerEvent::user_audio(std::move(tokens), end));
    }
    for (const auto& v : vad_events) post_event(v.at_ms, ControllerEvent::vad(to_event_kind(v.kind), v.at_ms));
    media_ms_ = end;
    advance_to(end);
  }

  void advance_to(std::int64_t t) { loop_.run_until(t); }

  // Runs every scheduled task, moving the clock as far as needed.
  void drain(std::int64_t horizon_ms = INT64_MAX) { loop_.run_all(horizon_ms); }

  std::int64_t now() const noexcept { return loop_.now(); }
  std::int64_t media_ms() const noexcept { return media_ms_; }
  bool idle() const noexcept { return loop_.empty(); }
  ControllerState state() const noexcept { return controller_.state(); }
  const InteractionController& controller() const noexcept { return controller_; }
  const PipelineConfig& config() const noexcept { return config_; }

  // Delivers an externally produced controller event at the current time.
  void inject(ControllerEvent ev) {
    ev.at_ms = loop_.now();
    deliver(ev);
  }

 private:
  struct ChatState {
    BackendStream<std::string> stream;
  };
  struct ReplyState {
    std::unique_ptr<TtsSession> session;
    BackendStream<AudioChunk> audio;
    std::int64_t playback_end_ms = 0;
    std::size_t turn_index = 0;
    bool aborted = false;
  };

  static EventKind to_event_kind(VadEventKind k) {
    switch (k) {
      case VadEventKind::SpeechStart: return EventKind::VadSpeechStart;
      case VadEventKind::PauseDetected: return EventKind::VadPauseDetected;
      case VadEventKind::SpeechResume: return EventKind::VadSpeechResume;
      case VadEventKind::EndOfSpeech: return EventKind::VadEndOfSpeech;
    }
    return EventKind::VadSpeechStart;
  }

  void post_event(std::int64_t at, ControllerEvent ev) {
    loop_.post(at, [this, ev = std::move(ev)]() mutable {
      ev.at_ms = loop_.now();
      deliver(ev);
    });
  }

  void deliver(const ControllerEvent& ev) {
    observer_->on_event(ev);
    if (ev.kind != EventKind::UserAudio) observer_->on_trace(format_event(ev));
    const auto before = controller_.state();
    auto actions = controller_.handle_event(ev);
    if (controller_.state() != before) observer_->on_state(controller_.state(), ev.at_ms);
    for (const auto& a : actions) {
      observer_->on_trace(format_action(a));
      observer_->on_action(a);
      execute(a);
    }
  }

  void execute(const Action& a) {
    const std::int64_t now = loop_.now();
    switch (a.kind) {
      case ActionKind::StartSpeculation: start_chat(a, now); break;
      case ActionKind::CancelSpeculation:
        if (auto it = chats_.find(a.spec_id); it != chats_.end()) it->second.stream.cancel(now);
        break;
      case ActionKind::CommitSpeculation: {
        ReplyState reply;
        reply.session = backends_.tts->open({a.spec_id, tts_requests_++});
        reply.playback_end_ms = now;
        const auto* entry = controller_.ledger().find(a.spec_id);
        reply.turn_index = entry ? entry->turn_index : 0;
        replies_[a.spec_id] = std::move(reply);
        break;
      }
      case ActionKind::ForwardTextToTts: {
        observer_->on_text_partial(a.spec_id, a.text, now);
        auto it = replies_.find(a.spec_id);
        if (it == replies_.end()) break;
        schedule_audio(a.spec_id, it->second, tts_call([&] { return it->second.session->push_text(a.text, now); }));
        break;
      }
      case ActionKind::FinishTts: {
        auto it = replies_.find(a.spec_id);
        if (it == replies_.end()) break;
        auto& reply = it->second;
        schedule_audio(a.spec_id, reply, tts_call([&] { return reply.session->finish(now); }));
        reply.audio.close(now);
        const SpecId id = a.spec_id;
        loop_.post(std::max(now, reply.playback_end_ms), [this, id] {
          auto r = replies_.find(id);
          if (r == replies_.end() || r->second.aborted) return;
          replies_.erase(r);
          deliver(ControllerEvent::playback_finished(loop_.now()));
        });
        break;
      }
      case ActionKind::AbortPlayback: {
        if (auto it = replies_.find(a.spec_id); it != replies_.end()) {
          it->second.aborted = true;
          it->second.audio.cancel(now);
          // Drop the reply once its in-flight chunk (if any) has gone out.
          const SpecId id = a.spec_id;
          loop_.post(std::max(now, *it->second.audio.cancelled_marker_at()), [this, id] { replies_.erase(id); });
        }
        if (auto it = chats_.find(a.spec_id); it != chats_.end()) it->second.stream.cancel(now);
        break;
      }
      case ActionKind::DispatchTool: {
        observer_->on_tool_call(a.tool, now);
        std::size_t turn = 0;
        if (auto it = replies_.find(a.spec_id); it != replies_.end()) turn = it->second.turn_index;
        ToolOutcome outcome;
        try {
          outcome = backends_.tools->invoke({a.tool, turn});
        } catch (const BackendError& e) {
          outcome = {0, std::string("backend_error: ") + e.what(), true};
        }
        const CallId call = a.tool.call_id;
        loop_.post(now + std::max<std::int64_t>(0, outcome.latency_ms), [this, call, outcome] {
          observer_->on_tool_result(call, outcome.payload, outcome.is_error, loop_.now());
          deliver(ControllerEvent::tool_result(call, outcome.payload, outcome.is_error, loop_.now()));
        });
        break;
      }
      case ActionKind::RequestTranscription: {
        AsrRequest req{a.turn_id, a.turn_index, a.tokens, asr_requests_++};
        AsrResult result;
        try {
          result = backends_.asr->transcribe(req);
        } catch (const BackendError& e) {
          observer_->on_backend_error(std::string("asr: ") + e.what(), now);
          break;
        }
        post_event(now + std::max<std::int64_t>(0, result.latency_ms),
                   ControllerEvent::transcript(a.turn_id, std::move(result.text), 0));
        break;
      }
      case ActionKind::AppendHistory:
      case ActionKind::Warning:
        break;
    }
  }

  // A failed synthesis call loses that stretch of audio; the reply still
  // runs to completion so the conversation can continue.
  template <class F>
  std::vector<TimedUnit<AudioChunk>> tts_call(F&& f) {
    try {
      return f();
    } catch (const BackendError& e) {
      observer_->on_backend_error(std::string("tts: ") + e.what(), loop_.now());
      return {};
    }
  }

  void start_chat(const Action& a, std::int64_t now) {
    ChatRequest req{a.snapshot, a.spec_id, a.turn_index, chat_requests_++};
    BackendStream<std::string> stream;
    try {
      stream = backends_.chat->generate(req, now);
    } catch (const BackendError& e) {
      observer_->on_backend_error(std::string("chat: ") + e.what(), now);
      post_event(now, ControllerEvent::failed(a.spec_id, e.what(), 0));
      return;
    }
    auto& state = chats_[a.spec_id];
    state.stream = std::move(stream);
    const SpecId id = a.spec_id;
    if (state.stream.size() > 0) {
      loop_.post(state.stream[0].available_at_ms, [this, id] { deliver_chat_unit(id, 0); });
    } else {
      loop_.post(state.stream.done_at().value_or(now), [this, id] { deliver_chat_done(id); });
    }
  }

  void deliver_chat_unit(SpecId id, std::size_t index) {
    auto it = chats_.find(id);
    if (it == chats_.end()) return;
    if (!it->second.stream.admitted(index)) {
      chats_.erase(it);
      return;
    }
    const auto& stream = it->second.stream;
    const std::int64_t now = loop_.now();
    std::string text = stream[index].payload;
    const bool last = index + 1 >= stream.size();
    const std::int64_t next_at = last ? stream.done_at().value_or(now) : stream[index + 1].available_at_ms;
    if (last) {
      loop_.post(std::max(now, next_at), [this, id] { deliver_chat_done(id); });
    } else {
      loop_.post(next_at, [this, id, index] { deliver_chat_unit(id, index + 1); });
    }
    if (index == 0) deliver(ControllerEvent::first_token(id, now));
    deliver(ControllerEvent::text_chunk(id, std::move(text), now));
  }

  void deliver_chat_done(SpecId id) {
    auto it = chats_.find(id);
    if (it == chats_.end()) return;
    const bool cancelled = it->second.stream.cancelled();
    chats_.erase(it);
    if (!cancelled) deliver(ControllerEvent::done(id, loop_.now()));
  }

  void schedule_audio(SpecId id, ReplyState& reply, std::vector<TimedUnit<AudioChunk>> chunks) {
    for (auto& c : chunks) {
      const std::int64_t start = std::max(c.available_at_ms, reply.playback_end_ms);
      reply.playback_end_ms = start + c.payload.duration_ms;
      const std::size_t index = reply.audio.size();
      const std::int64_t at = c.available_at_ms;
      reply.audio.push(std::move(c));
      loop_.post(at, [this, id, index] {
        auto it = replies_.find(id);
        if (it == replies_.end() || !it->second.audio.admitted(index)) return;
        observer_->on_audio_out(id, it->second.audio[index].payload, loop_.now());
      });
    }
  }

  PipelineConfig config_;
  PipelineBackends backends_;
  PipelineObserver null_observer_;
  PipelineObserver* observer_;
  EventLoop loop_;
  EnergyVad vad_;
  StreamTokenizer tokenizer_;
  InteractionController controller_;
  std::vector<std::int16_t> pcm_remainder_;
  std::int64_t media_ms_ = 0;
  std::map<SpecId, ChatState> chats_;
  std::map<SpecId, ReplyState> replies_;
  std::uint64_t chat_requests_ = 0;
  std::uint64_t tts_requests_ = 0;
  std::uint64_t asr_requests_ = 0;
};

}  // namespace steporch
