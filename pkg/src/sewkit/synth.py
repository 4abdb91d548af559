"""Synthetic tone corpus: a deterministic stand-in for real speech.

Each alphabet symbol maps to a fixed-frequency tone (injective by
construction, neighbouring frequencies at least 200 Hz apart). An
utterance is a sequence of tone segments separated by short silences,
with random phase, mild amplitude jitter, and white noise on top. The
same (spec, seed, index) always yields the same waveform and transcript.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .audio import AudioBuffer
from .errors import ConfigError

MIN_TONE_SEPARATION_HZ = 200.0


@dataclass(frozen=True)
class SynthSpec:
    alphabet: str = "abcde"
    base_freq_hz: float = 400.0
    freq_step_hz: float = 300.0
    tone_seconds: float = 0.12
    gap_seconds: float = 0.04
    edge_seconds: float = 0.06
    amplitude: float = 0.35
    noise_std: float = 0.02
    min_symbols: int = 2
    max_symbols: int = 6
    sample_rate: int = 16000

    def __post_init__(self):
        if len(set(self.alphabet)) != len(self.alphabet) or not self.alphabet:
            raise ConfigError("alphabet symbols must be unique and non-empty")
        if self.freq_step_hz < MIN_TONE_SEPARATION_HZ:
            raise ConfigError(
                f"tone frequencies must be separated by >= {MIN_TONE_SEPARATION_HZ} Hz")
        top = self.base_freq_hz + self.freq_step_hz * (len(self.alphabet) - 1)
        if top >= self.sample_rate / 2:
            raise ConfigError(f"highest tone {top} Hz exceeds Nyquist")
        if not 1 <= self.min_symbols <= self.max_symbols:
            raise ConfigError("need 1 <= min_symbols <= max_symbols")

    def freq_of(self, symbol: str) -> float:
        return self.base_freq_hz + self.freq_step_hz * self.alphabet.index(symbol)


class SynthCorpus:
    """Seeded generator of (waveform, transcript) pairs."""

    def __init__(self, spec: SynthSpec, size: int, seed: int):
        self.spec = spec
        self.size = size
        self.seed = seed

    def __len__(self):
        return self.size

    def _rng(self, index: int):
        return np.random.default_rng(
            np.random.SeedSequence(entropy=self.seed, spawn_key=(index,)))

    def _draw_symbols(self, index: int):
        rng = self._rng(index)
        n = int(rng.integers(self.spec.min_symbols, self.spec.max_symbols + 1))
        symbols = [str(s) for s in rng.choice(list(self.spec.alphabet), size=n)]
        return symbols, rng

    def transcript(self, index: int) -> str:
        symbols, _ = self._draw_symbols(index)
        return "".join(symbols)

    def waveform(self, index: int) -> np.ndarray:
        spec = self.spec
        symbols, rng = self._draw_symbols(index)
        sr = spec.sample_rate
        edge = int(spec.edge_seconds * sr)
        gap = int(spec.gap_seconds * sr)
        tone_len = int(spec.tone_seconds * sr)
        pieces = [np.zeros(edge)]
        for j, sym in enumerate(symbols):
            if j:
                pieces.append(np.zeros(gap))
            t = np.arange(tone_len) / sr
            # fixed phase: with frame-periodic tone frequencies this keeps a
            # symbol's frame-level features consistent across utterances
            amp = spec.amplitude * rng.uniform(0.8, 1.2)
            pieces.append(amp * np.sin(2 * np.pi * spec.freq_of(sym) * t))
        pieces.append(np.zeros(edge))
        wave = np.concatenate(pieces)
        wave = wave + rng.normal(0.0, spec.noise_std, size=len(wave))
        return np.clip(wave, -0.999, 0.999).astype(np.float32)

    def utterance(self, index: int):
        return AudioBuffer(self.waveform(index), self.spec.sample_rate), self.transcript(index)

    def label_ids(self, index: int):
        """CTC token ids (blank = 0, symbols start at 1)."""
        return [self.spec.alphabet.index(ch) + 1 for ch in self.transcript(index)]
