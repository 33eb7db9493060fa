"""Speech gating and transformer-input window assembly.

Each one-second spectrogram gets a speech probability from a deterministic
heuristic (band-energy ratio, spectral flatness, syllabic-rate modulation).
Windows of ``W`` seconds are then assembled under one of two schemes:

* scheme 1 — chunks with probability > 0.5 are discarded; survivors
  accumulate until ``W`` of them form a window,
* scheme 2 — consecutive blocks of ``W`` seconds; speech positions keep
  only their probability and an all-zero spectrogram.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .dsp import Spectrogram, mel_center_freqs
from .errors import DataError

SPEECH_THRESHOLD = 0.5

# Heuristic gate constants, frozen after calibration against the synthetic
# corpus (see tests/test_gate.py for the contract they must satisfy).
_SPEECH_BAND = (100.0, 3000.0)
_MODULATION_BAND = (2.0, 8.0)
_W_BAND_RATIO = 1.0
_W_TONALITY = 4.0
_W_MODULATION = 3.0
_BIAS = 4.0


@dataclass(frozen=True)
class LabeledChunk:
    """One second of audio: its spectrogram, speech probability, and source second."""

    spectrogram: Spectrogram
    speech_prob: float
    timestamp: int

    def __post_init__(self):
        if not (0.0 <= self.speech_prob <= 1.0):
            raise DataError(f"speech_prob must be in [0, 1], got {self.speech_prob}")

    @property
    def is_speech(self) -> bool:
        return self.speech_prob > SPEECH_THRESHOLD


@dataclass(frozen=True)
class InputWindow:
    """W stacked one-second spectrograms ready for embedding.

    ``mask`` is 1 where the position holds real audio and 0 where a speech
    second was zeroed out (scheme 2).  ``probs`` carries per-position speech
    probabilities under scheme 2 and is None under scheme 1.
    """

    chunks: np.ndarray       # (W, T_f, n_mels)
    mask: np.ndarray         # (W,)
    timestamps: np.ndarray   # (W,)
    probs: np.ndarray | None = None

    def __post_init__(self):
        w = self.chunks.shape[0]
        if self.mask.shape != (w,) or self.timestamps.shape != (w,):
            raise DataError("mask/timestamps length must equal window size")
        if self.probs is not None and self.probs.shape != (w,):
            raise DataError("probs length must equal window size")

    @property
    def size(self) -> int:
        return self.chunks.shape[0]


def speech_probability(chunk: Spectrogram) -> float:
    """Deterministic heuristic speech score in [0, 1].

    Combines three cues through a fixed logistic map:

    * fraction of linear energy inside 100-3000 Hz,
    * spectral tonality (one minus flatness) — voiced speech is harmonic,
    * fraction of the in-band energy envelope's modulation spectrum that
      falls in 2-8 Hz, the syllabic rate.

    Any scorer honoring this interface may be substituted for it.
    """
    cfg = chunk.config
    expected = cfg.frames_per_second
    if chunk.n_frames != expected:
        raise DataError(f"expected a one-second spectrogram of {expected} frames, got {chunk.n_frames}")

    energies = np.exp(chunk.frames) - cfg.log_floor
    np.clip(energies, 0.0, None, out=energies)
    centers = mel_center_freqs(cfg)
    in_band = (centers >= _SPEECH_BAND[0]) & (centers <= _SPEECH_BAND[1])

    total = energies.sum()
    band_ratio = float(energies[:, in_band].sum() / total) if total > 0 else 0.0

    # flatness = geometric / arithmetic mean of band energies, frame-averaged
    guarded = energies + cfg.log_floor
    flatness = float(np.mean(np.exp(np.mean(np.log(guarded), axis=1)) / np.mean(guarded, axis=1)))

    mod_frac = _modulation_fraction(energies[:, in_band], cfg.sample_rate / cfg.hop_len)

    score = _W_BAND_RATIO * band_ratio + _W_TONALITY * (1.0 - flatness) + _W_MODULATION * mod_frac - _BIAS
    return float(1.0 / (1.0 + np.exp(-score)))


def _modulation_fraction(band_energies: np.ndarray, frame_rate: float) -> float:
    """Share of envelope modulation energy in the syllabic 2-8 Hz band."""
    envelope = band_energies.sum(axis=1)
    envelope = envelope - envelope.mean()
    if not envelope.any():
        return 0.0
    spectrum = np.abs(np.fft.rfft(envelope)) ** 2
    freqs = np.fft.rfftfreq(envelope.size, d=1.0 / frame_rate)
    total = spectrum[1:].sum()
    if total <= 0:
        return 0.0
    sel = (freqs >= _MODULATION_BAND[0]) & (freqs <= _MODULATION_BAND[1])
    return float(spectrum[sel].sum() / total)


def iter_scheme1(stream: Iterable[LabeledChunk], window: int = 60) -> Iterator[InputWindow]:
    """Yield scheme-1 windows: speech chunks dropped, survivors batched by ``window``.

    Survivors keep arrival order and are never reused; a trailing partial
    window is withheld.
    """
    if window < 1:
        raise DataError(f"window size must be >= 1, got {window}")
    buf: list[LabeledChunk] = []
    for chunk in stream:
        if chunk.is_speech:
            continue
        buf.append(chunk)
        if len(buf) == window:
            yield InputWindow(
                chunks=np.stack([c.spectrogram.frames for c in buf]),
                mask=np.ones(window),
                timestamps=np.array([c.timestamp for c in buf], dtype=np.int64),
            )
            buf = []


def assemble_scheme1(stream: Iterable[LabeledChunk], window: int = 60) -> list[InputWindow]:
    return list(iter_scheme1(stream, window))


def iter_scheme2(stream: Iterable[LabeledChunk], window: int = 60) -> Iterator[InputWindow]:
    """Yield scheme-2 windows: contiguous blocks with speech seconds zero-masked.

    Every position keeps its speech probability; zero-masked positions carry
    all-zero spectrograms.  A trailing partial block is withheld.
    """
    if window < 1:
        raise DataError(f"window size must be >= 1, got {window}")
    buf: list[LabeledChunk] = []
    for chunk in stream:
        buf.append(chunk)
        if len(buf) == window:
            frames = np.stack([c.spectrogram.frames for c in buf])
            mask = np.array([0.0 if c.is_speech else 1.0 for c in buf])
            frames[mask == 0.0] = 0.0
            yield InputWindow(
                chunks=frames,
                mask=mask,
                timestamps=np.array([c.timestamp for c in buf], dtype=np.int64),
                probs=np.array([c.speech_prob for c in buf]),
            )
            buf = []


def assemble_scheme2(stream: Iterable[LabeledChunk], window: int = 60) -> list[InputWindow]:
    return list(iter_scheme2(stream, window))


def export_gate_csv(chunks: Iterable[LabeledChunk], path: str | Path) -> None:
    """Audit trail of gate decisions: timestamp, speech_prob, kept flag."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["timestamp", "speech_prob", "kept"])
        for c in chunks:
            writer.writerow([c.timestamp, f"{c.speech_prob:.6f}", int(not c.is_speech)])
