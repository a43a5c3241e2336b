#pragma once

// Energy-based voice activity detection with two silence counters: a short
// pause threshold (speculation trigger) and a longer end-of-speech threshold.
//
// Per utterance the emitted events follow
//   SpeechStart (PauseDetected SpeechResume)* PauseDetected EndOfSpeech
// and an EndOfSpeech at t is always preceded by a PauseDetected at
// t - (end_threshold_ms - pause_threshold_ms).

#include <cstdint>
#include <string>
#include <vector>

#include "steporch/errors.hpp"
#include "steporch/stream_tokenizer.hpp"

namespace steporch {

struct VadConfig {
  std::int64_t frame_ms = 20;
  double energy_threshold = 1e-3;
  std::int64_t pause_threshold_ms = 200;
  std::int64_t end_threshold_ms = 700;

  std::size_t samples_per_frame() const {
    return static_cast<std::size_t>(frame_ms) * kSampleRateHz / 1000;
  }
  std::int64_t confirm_gap_ms() const { return end_threshold_ms - pause_threshold_ms; }

  void validate() const {
    if (frame_ms <= 0) throw ValidationError("vad: frame_ms must be positive");
    if (!(0 < pause_threshold_ms && pause_threshold_ms < end_threshold_ms)) {
      throw ValidationError("vad: need 0 < pause_threshold_ms < end_threshold_ms");
    }
    if (pause_threshold_ms % frame_ms != 0 || end_threshold_ms % frame_ms != 0) {
      throw ValidationError("vad: frame_ms must divide both thresholds");
    }
    if (!(energy_threshold > 0.0 && energy_threshold <= 1.0)) {
      throw ValidationError("vad: energy_threshold must be in (0, 1]");
    }
  }
};

enum class VadEventKind { SpeechStart, PauseDetected, SpeechResume, EndOfSpeech };

inline const char* to_string(VadEventKind k) {
  switch (k) {
    case VadEventKind::SpeechStart: return "SpeechStart";
    case VadEventKind::PauseDetected: return "PauseDetected";
    case VadEventKind::SpeechResume: return "SpeechResume";
    case VadEventKind::EndOfSpeech: return "EndOfSpeech";
  }
  return "?";
}

struct VadEvent {
  VadEventKind kind;
  std::int64_t at_ms;
  bool operator==(const VadEvent&) const = default;
};

// Mean of squared samples normalized to [-1, 1].
inline double frame_energy(std::span<const std::int16_t> samples) {
  if (samples.empty()) throw FormatError("frame_energy: empty frame");
  double acc = 0.0;
  for (std::int16_t s : samples) {
    const double x = static_cast<double>(s) / 32768.0;
    acc += x * x;
  }
  return acc / static_cast<double>(samples.size());
}

inline double frame_energy(const PcmFrame& frame) { return frame_energy(frame.samples); }

class EnergyVad {
 public:
  explicit EnergyVad(VadConfig config = {}) : config_(config) { config_.validate(); }

  // Speech-onset events carry the frame's start time; silence-driven events
  // carry the end time of the frame that completed the silence run.
  std::vector<VadEvent> push_frame(const PcmFrame& frame) {
    if (frame.sample_rate != kSampleRateHz || frame.samples.size() != config_.samples_per_frame()) {
      throw FormatError("vad: frame must hold exactly " + std::to_string(config_.frame_ms) +
                        " ms at 16 kHz (" + std::to_string(config_.samples_per_frame()) +
                        " samples), got " + std::to_string(frame.samples.size()));
    }
    std::vector<VadEvent> out;
    const bool voiced = frame_energy(frame) >= config_.energy_threshold;
    const std::int64_t frame_end = frame.timestamp_ms + config_.frame_ms;
    switch (phase_) {
      case Phase::Idle:
        if (voiced) {
          out.push_back({VadEventKind::SpeechStart, frame.timestamp_ms});
          phase_ = Phase::Speaking;
          silence_ms_ = 0;
        }
        break;
      case Phase::Speaking:
        if (voiced) {
          silence_ms_ = 0;
        } else {
          silence_ms_ += config_.frame_ms;
          if (silence_ms_ >= config_.pause_threshold_ms) {
            out.push_back({VadEventKind::PauseDetected, frame_end});
            phase_ = Phase::Paused;
          }
        }
        break;
      case Phase::Paused:
        if (voiced) {
          out.push_back({VadEventKind::SpeechResume, frame.timestamp_ms});
          phase_ = Phase::Speaking;
          silence_ms_ = 0;
        } else {
          silence_ms_ += config_.frame_ms;
          if (silence_ms_ >= config_.end_threshold_ms) {
            out.push_back({VadEventKind::EndOfSpeech, frame_end});
            phase_ = Phase::Idle;
            silence_ms_ = 0;
          }
        }
        break;
    }
    return out;
  }

  bool in_utterance() const noexcept { return phase_ != Phase::Idle; }
  const VadConfig& config() const noexcept { return config_; }

 private:
  enum class Phase { Idle, Speaking, Paused };
  VadConfig config_;
  Phase phase_ = Phase::Idle;
  std::int64_t silence_ms_ = 0;
};

}  // namespace steporch
