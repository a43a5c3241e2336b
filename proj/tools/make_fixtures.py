#!/usr/bin/env python3
"""Regenerates the files under fixtures/. Output is deterministic."""

import json
import math
import struct
import wave
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent / "fixtures"
RATE = 16000


def tone(ms, freq=330.0, amp=8000.0):
    n = ms * RATE // 1000
    # Round half away from zero, as std::lround does.
    return [int(math.copysign(math.floor(abs(v) + 0.5), v))
            for v in (amp * math.sin(2 * math.pi * freq * i / RATE) for i in range(n))]


def write_wav(name, samples):
    with wave.open(str(ROOT / name), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(RATE)
        w.writeframes(struct.pack("<%dh" % len(samples), *samples))


def write_json(name, obj):
    (ROOT / name).write_text(json.dumps(obj, indent=2) + "\n")


def main():
    ROOT.mkdir(exist_ok=True)
    write_wav("tone_1200ms.wav", tone(1200))
    write_wav("tone_1s_silence_800ms.wav", tone(1000) + [0] * (800 * RATE // 1000))

    write_json("single_pause.json", {
        "turns": [{
            "speech_segments": [{"speech_ms": 1000, "trailing_silence_ms": 800}],
            "transcript": "what is the weather in hong kong",
            "scripted_response": "It is sunny and twenty five degrees.",
        }],
    })

    write_json("hesitant_user.json", {
        "backends": {"chat": {"first_token_ms": 500, "per_unit_ms": 20}},
        "system_prompt": "You are a helpful voice assistant.",
        "turns": [
            {"speech_segments": [{"speech_ms": 600, "trailing_silence_ms": 300},
                                 {"speech_ms": 400, "trailing_silence_ms": 260},
                                 {"speech_ms": 500, "trailing_silence_ms": 800}],
             "transcript": "book a table for two tomorrow at seven"},
            {"speech_segments": [{"speech_ms": 900, "trailing_silence_ms": 800}],
             "transcript": "and what will the weather be",
             "scripted_response": "Let me check.<tool_call>weather{\"city\":\"HK\"}</tool_call> One moment.",
             "tool_calls": [{"name": "weather", "latency_ms": 2000,
                             "payload": {"temp_c": 25, "sky": "clear"}}]},
        ],
    })

    write_json("gateway_config.json", {
        "vad": {"pause_threshold_ms": 200, "end_threshold_ms": 700},
        "backends": {"mode": "mock", "chat": {"first_token_ms": 500, "per_unit_ms": 20}},
        "budget": 4096,
        "sim": {"seed": 0, "speculation": True},
    })


if __name__ == "__main__":
    main()
