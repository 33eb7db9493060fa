"""Multichannel audio front-end.

Turns raw microphone-array clips into a single beamformed stream and
per-second log-mel spectrograms:

* ``gcc_phat_tdoa`` — integer-sample time-difference-of-arrival between two
  channels via phase-transform-weighted cross-correlation,
* ``beamform`` — delay-and-sum alignment and averaging,
* ``log_mel_spectrogram`` — Hann STFT magnitudes through a triangular mel
  filterbank, log-compressed.

All operations are pure; concurrent calls on distinct inputs are safe.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.io import wavfile

from .errors import ConfigError, DataError, NoSignalError

# floor for PHAT magnitude normalization, guards division by zero
PHAT_FLOOR = 1e-12


@dataclass(frozen=True)
class MultichannelClip:
    """Synchronized audio from M microphones, shape (M, n_samples)."""

    sample_rate: int
    channels: np.ndarray

    def __post_init__(self):
        ch = np.asarray(self.channels, dtype=np.float64)
        if ch.ndim != 2 or ch.shape[0] < 1 or ch.shape[1] < 1:
            raise DataError(f"channels must be a (M, n) array with M >= 1, got shape {ch.shape}")
        if self.sample_rate <= 0:
            raise DataError(f"sample_rate must be positive, got {self.sample_rate}")
        if not np.isfinite(ch).all():
            raise DataError("channels contain non-finite samples")
        object.__setattr__(self, "channels", ch)

    @property
    def n_channels(self) -> int:
        return self.channels.shape[0]

    @property
    def length(self) -> int:
        return self.channels.shape[1]

    def channel(self, m: int) -> "MonoClip":
        return MonoClip(self.sample_rate, self.channels[m])


@dataclass(frozen=True)
class MonoClip:
    """Single-channel audio."""

    sample_rate: int
    samples: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=np.float64)
        if s.ndim != 1 or s.size == 0:
            raise DataError(f"samples must be a non-empty 1-D array, got shape {s.shape}")
        if self.sample_rate <= 0:
            raise DataError(f"sample_rate must be positive, got {self.sample_rate}")
        if not np.isfinite(s).all():
            raise DataError("samples contain non-finite values")
        object.__setattr__(self, "samples", s)

    @property
    def length(self) -> int:
        return self.samples.size


@dataclass(frozen=True)
class SpectrogramConfig:
    """Log-mel front-end parameters.

    Defaults follow common non-semantic-audio front-ends: 16 kHz input,
    25 ms Hann window, 10 ms hop, 64 mel bands over 60-7800 Hz.
    """

    sample_rate: int = 16000
    window_len: int = 400
    hop_len: int = 160
    n_mels: int = 64
    fmin: float = 60.0
    fmax: float = 7800.0
    log_floor: float = 1e-10

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise ConfigError(f"sample_rate must be positive, got {self.sample_rate}")
        if not (0 < self.hop_len <= self.window_len):
            raise ConfigError(f"need 0 < hop_len <= window_len, got hop {self.hop_len}, window {self.window_len}")
        if not (0 <= self.fmin < self.fmax <= self.sample_rate / 2):
            raise ConfigError(f"need 0 <= fmin < fmax <= sample_rate/2, got [{self.fmin}, {self.fmax}] at {self.sample_rate} Hz")
        if self.n_mels < 1:
            raise ConfigError(f"n_mels must be >= 1, got {self.n_mels}")
        if self.log_floor <= 0:
            raise ConfigError(f"log_floor must be positive, got {self.log_floor}")

    @property
    def frames_per_second(self) -> int:
        """Frame count of a spectrogram covering exactly one second."""
        return frame_count(self.sample_rate, self.window_len, self.hop_len)


@dataclass(frozen=True)
class Spectrogram:
    """Log-mel time-frequency matrix, shape (T_f, n_mels)."""

    frames: np.ndarray
    config: SpectrogramConfig

    def __post_init__(self):
        f = np.asarray(self.frames, dtype=np.float64)
        if f.ndim != 2 or f.shape[1] != self.config.n_mels:
            raise DataError(f"frames must be (T_f, {self.config.n_mels}), got shape {f.shape}")
        if not np.isfinite(f).all():
            raise DataError("spectrogram contains non-finite cells")
        object.__setattr__(self, "frames", f)

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]


def default_spectrogram_config(sample_rate: int) -> SpectrogramConfig:
    """25 ms / 10 ms front-end scaled to ``sample_rate``; mel count shrinks at low rates."""
    if sample_rate >= 16000:
        n_mels, fmax = 64, 7800.0
    elif sample_rate >= 8000:
        n_mels, fmax = 32, sample_rate / 2 - 200.0
    else:
        n_mels, fmax = 24, sample_rate / 2 - 100.0
    return SpectrogramConfig(
        sample_rate=sample_rate,
        window_len=int(round(0.025 * sample_rate)),
        hop_len=int(round(0.010 * sample_rate)),
        n_mels=n_mels,
        fmin=60.0,
        fmax=fmax,
    )


def frame_count(length: int, window_len: int, hop_len: int) -> int:
    """Number of analysis frames: 1 + floor((length - window) / hop)."""
    if length < window_len:
        raise DataError(f"clip of {length} samples is shorter than the {window_len}-sample window")
    return 1 + (length - window_len) // hop_len


def gcc_phat_tdoa(reference: MonoClip, other: MonoClip, max_lag: int) -> int:
    """Integer-sample TDOA between two equal-length clips via GCC-PHAT.

    The cross-spectrum is normalized by its magnitude (phase transform)
    before the inverse transform; the returned lag is the argmax over
    ``[-max_lag, +max_lag]``.  Positive lag means ``other`` is delayed
    relative to ``reference``.
    """
    x, y = reference.samples, other.samples
    if reference.sample_rate != other.sample_rate:
        raise DataError(f"sample rates differ: {reference.sample_rate} vs {other.sample_rate}")
    if x.size != y.size:
        raise DataError(f"clip lengths differ: {x.size} vs {y.size}")
    if not (0 < max_lag < x.size / 2):
        raise DataError(f"max_lag must be in (0, length/2), got {max_lag} for length {x.size}")
    if not x.any() or not y.any():
        raise NoSignalError("all-zero input, no correlation peak")

    # pad to >= 2n so the circular wrap cannot alias lags in the search window
    n_fft = 1 << int(np.ceil(np.log2(2 * x.size)))
    spec_x = np.fft.rfft(x, n_fft)
    spec_y = np.fft.rfft(y, n_fft)
    cross = np.conj(spec_x) * spec_y
    cross /= np.maximum(np.abs(cross), PHAT_FLOOR)
    cc = np.fft.irfft(cross, n_fft)

    # cc[m] holds lag m for m >= 0 and lag m - n_fft for the tail
    window = np.concatenate([cc[-max_lag:], cc[: max_lag + 1]])
    return int(np.argmax(window)) - max_lag


def beamform(clip: MultichannelClip, tdoas: "list[int] | np.ndarray") -> MonoClip:
    """Delay-and-sum: shift each channel by its negated TDOA and average.

    Shifted-out edges are zero-padded, never wrapped; output length equals
    input length.
    """
    lags = np.asarray(tdoas)
    if lags.ndim != 1 or lags.size != clip.n_channels:
        raise DataError(f"need one lag per channel ({clip.n_channels}), got {lags.size}")
    if np.max(np.abs(lags)) >= clip.length:
        raise DataError("lag magnitude exceeds clip length")
    out = np.zeros(clip.length, dtype=np.float64)
    for m in range(clip.n_channels):
        out += _shift(clip.channels[m], -int(lags[m]))
    return MonoClip(clip.sample_rate, out / clip.n_channels)


def _shift(x: np.ndarray, s: int) -> np.ndarray:
    """Shift right by s samples (s < 0 shifts left), zero-padding the edges."""
    out = np.zeros_like(x)
    if s == 0:
        out[:] = x
    elif s > 0:
        out[s:] = x[:-s]
    else:
        out[:s] = x[-s:]
    return out


def log_mel_spectrogram(clip: MonoClip, config: SpectrogramConfig) -> Spectrogram:
    """Hann-windowed power STFT through a triangular mel filterbank, then log."""
    if clip.sample_rate != config.sample_rate:
        raise DataError(f"clip rate {clip.sample_rate} != config rate {config.sample_rate}")
    n_frames = frame_count(clip.length, config.window_len, config.hop_len)
    frames = np.lib.stride_tricks.sliding_window_view(clip.samples, config.window_len)
    frames = frames[:: config.hop_len][:n_frames]
    windowed = frames * np.hanning(config.window_len)
    power = np.abs(np.fft.rfft(windowed, axis=1)) ** 2
    fb = mel_filterbank(config)
    energies = power @ fb.T
    return Spectrogram(np.log(energies + config.log_floor), config)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(config: SpectrogramConfig) -> np.ndarray:
    """Triangular filters with unit peak, shape (n_mels, window_len // 2 + 1)."""
    n_bins = config.window_len // 2 + 1
    bin_freqs = np.arange(n_bins) * config.sample_rate / config.window_len
    mel_pts = np.linspace(hz_to_mel(config.fmin), hz_to_mel(config.fmax), config.n_mels + 2)
    hz_pts = mel_to_hz(mel_pts)
    fb = np.zeros((config.n_mels, n_bins))
    for b in range(config.n_mels):
        lo, center, hi = hz_pts[b], hz_pts[b + 1], hz_pts[b + 2]
        rising = (bin_freqs - lo) / max(center - lo, 1e-9)
        falling = (hi - bin_freqs) / max(hi - center, 1e-9)
        fb[b] = np.clip(np.minimum(rising, falling), 0.0, None)
    return fb


def mel_center_freqs(config: SpectrogramConfig) -> np.ndarray:
    """Center frequency (Hz) of each mel band."""
    mel_pts = np.linspace(hz_to_mel(config.fmin), hz_to_mel(config.fmax), config.n_mels + 2)
    return mel_to_hz(mel_pts)[1:-1]


def read_wav(path: str | Path) -> MultichannelClip:
    """Read a RIFF/WAVE file (16-bit PCM or 32-bit float) as a MultichannelClip."""
    rate, data = wavfile.read(path)
    if data.ndim == 1:
        data = data[:, None]
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        samples = data.astype(np.float64) / 2147483648.0
    elif data.dtype in (np.float32, np.float64):
        samples = data.astype(np.float64)
    else:
        raise DataError(f"{path}: unsupported WAV sample format {data.dtype}")
    return MultichannelClip(int(rate), samples.T)


def write_wav(path: str | Path, clip: MultichannelClip) -> None:
    """Write a MultichannelClip as a 32-bit float WAV."""
    wavfile.write(path, clip.sample_rate, clip.channels.T.astype(np.float32))
