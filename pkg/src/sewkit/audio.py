"""WAV reading/writing for 16 kHz mono PCM-16 audio."""

from __future__ import annotations

import wave
from dataclasses import dataclass

import numpy as np

from .errors import DataError

PCM16_SCALE = 32768.0


@dataclass
class AudioBuffer:
    """Mono waveform samples in [-1, 1) at a declared sample rate."""

    samples: np.ndarray
    sample_rate: int

    @property
    def duration_seconds(self) -> float:
        return len(self.samples) / self.sample_rate


def load_wav(path, expected_rate: int = 16000) -> AudioBuffer:
    """Read a RIFF/WAVE file; PCM 16-bit, mono, ``expected_rate`` only.

    Samples are scaled by 1/32768 into [-1, 1); the count comes from the
    data chunk exactly.
    """
    try:
        with wave.open(str(path), "rb") as fh:
            channels = fh.getnchannels()
            rate = fh.getframerate()
            width = fh.getsampwidth()
            comp = fh.getcomptype()
            n = fh.getnframes()
            raw = fh.readframes(n)
    except (wave.Error, EOFError) as exc:
        raise DataError(f"not a readable WAV file: {exc}", field="format") from exc
    if comp != "NONE":
        raise DataError(f"unsupported compression {comp!r}; need linear PCM", field="encoding")
    if width != 2:
        raise DataError(f"unsupported sample width {8 * width} bits; need PCM 16-bit",
                        field="encoding")
    if channels != 1:
        raise DataError(f"unsupported channel count {channels}; need mono", field="channels")
    if rate != expected_rate:
        raise DataError(f"unsupported sample rate {rate} Hz; need {expected_rate} Hz",
                        field="sample_rate")
    if len(raw) != 2 * n:
        raise DataError(f"truncated data chunk: header promises {n} frames, "
                        f"got {len(raw) // 2}", field="frames")
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float32) / PCM16_SCALE
    return AudioBuffer(samples, rate)


def save_wav(path, buffer: AudioBuffer) -> None:
    """Write PCM 16-bit mono; values are clipped to the representable range."""
    clipped = np.clip(buffer.samples, -1.0, 32767.0 / PCM16_SCALE)
    ints = np.round(clipped * PCM16_SCALE).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(buffer.sample_rate)
        fh.writeframes(ints.tobytes())
