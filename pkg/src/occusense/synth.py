"""Synthetic waiting-room scenario generator.

Produces labeled scenarios — entry/exit events, a per-second occupancy
truth series, per-second speech labels, and multichannel audio — that stand
in for a real deployment corpus.  Arrivals are Poisson (optionally with a
time-varying hourly profile), dwell times are exponential, and each present
person stochastically emits coughs, footstep bursts, cloth rustle and
speech-like segments on top of a stationary pink HVAC floor.

The occupancy -> sound coupling is deliberately simple: per-person event
rates make aggregate non-speech loudness rise with head-count, so an
estimator that only sees non-speech audio has a genuine signal to recover.

Propagation is geometric: every source lands at a random room position and
each microphone receives it with an integer-sample delay from the
source-to-mic distance (343 m/s) and 1/distance amplitude decay.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
from scipy.signal import lfilter

from .dsp import MultichannelClip, read_wav, write_wav
from .errors import ConfigError, DataError
from .evaluate import OccupancySeries, occupancy_from_events

SPEED_OF_SOUND = 343.0  # m/s
MIN_SOURCE_DISTANCE = 0.3  # m, caps the 1/distance gain

# Paul Kellet's IIR approximation of a pink (1/f) spectrum
_PINK_B = (0.049922035, -0.095993537, 0.050612699, -0.004408786)
_PINK_A = (1.0, -2.494956002, 2.017265875, -0.522189400)

_SPEECH_AM_HZ = 4.0
_SPEECH_DUR_RANGE = (2, 6)    # whole seconds; keeps per-second labels crisp
_AMP_COUGH = 0.50
_AMP_STEP = 0.35
_AMP_RUSTLE = 0.28
_AMP_SPEECH = 0.62


@dataclass(frozen=True)
class EntryExitEvent:
    timestamp: float
    delta: int
    person_id: str

    def __post_init__(self):
        if self.delta not in (+1, -1):
            raise DataError(f"delta must be +1 or -1, got {self.delta}")


@dataclass(frozen=True)
class ScenarioConfig:
    """Knobs of one simulated deployment day."""

    duration: int = 3600                     # seconds
    arrival_rate: float | tuple = 12.0       # persons/hour; tuple = profile over equal segments
    mean_dwell: float = 900.0                # seconds
    cough_rate: float = 1.5                  # events / minute / person
    footstep_rate: float = 1.2               # bursts / minute / person
    rustle_rate: float = 3.0                 # events / minute / person
    speech_fraction: float = 0.2             # fraction of a person's presence spent talking
    mic_positions: tuple = ((3.9, 2.9), (4.1, 3.1))   # meters
    room_size: tuple = (8.0, 6.0)            # meters
    noise_floor: float = 0.02                # HVAC amplitude relative to full scale
    sample_rate: int = 8000
    seed: int = 0

    def __post_init__(self):
        if self.duration <= 0:
            raise ConfigError(f"duration must be positive, got {self.duration}")
        rates = self.arrival_rate if isinstance(self.arrival_rate, (tuple, list)) else (self.arrival_rate,)
        if any(r < 0 for r in rates):
            raise ConfigError("arrival rates cannot be negative")
        for r in (self.cough_rate, self.footstep_rate, self.rustle_rate, self.noise_floor):
            if r < 0:
                raise ConfigError("event rates and noise floor cannot be negative")
        if not (0.0 <= self.speech_fraction < 1.0):
            raise ConfigError(f"speech_fraction must be in [0, 1), got {self.speech_fraction}")
        if len(self.mic_positions) < 1:
            raise ConfigError("need at least one microphone position")

    def rate_at(self, t: float) -> float:
        """Arrival rate (persons/hour) at scenario time t."""
        if not isinstance(self.arrival_rate, (tuple, list)):
            return float(self.arrival_rate)
        profile = self.arrival_rate
        idx = min(int(t / self.duration * len(profile)), len(profile) - 1)
        return float(profile[idx])

    def to_json_dict(self) -> dict:
        d = asdict(self)
        d["mic_positions"] = [list(p) for p in self.mic_positions]
        d["room_size"] = list(self.room_size)
        if isinstance(self.arrival_rate, (tuple, list)):
            d["arrival_rate"] = list(self.arrival_rate)
        return d

    @classmethod
    def from_json_dict(cls, d: dict) -> "ScenarioConfig":
        d = dict(d)
        d["mic_positions"] = tuple(tuple(p) for p in d["mic_positions"])
        d["room_size"] = tuple(d["room_size"])
        if isinstance(d["arrival_rate"], list):
            d["arrival_rate"] = tuple(d["arrival_rate"])
        return cls(**d)


@dataclass
class Scenario:
    config: ScenarioConfig
    events: list[EntryExitEvent]
    truth: OccupancySeries
    audio: MultichannelClip
    chunk_labels: np.ndarray  # (duration,) bool, True where any speech overlaps the second


def generate_events(config: ScenarioConfig, rng: np.random.Generator) -> list[EntryExitEvent]:
    """Poisson arrivals (thinned against the profile maximum) with exponential dwell.

    Dwell times are truncated to the scenario end: the exit of a person who
    would outstay the scenario is emitted at ``duration``.
    """
    rates = config.arrival_rate if isinstance(config.arrival_rate, (tuple, list)) else (config.arrival_rate,)
    lam_max = max(rates) / 3600.0
    events: list[EntryExitEvent] = []
    if lam_max <= 0:
        return events
    t = 0.0
    person = 0
    while True:
        t += rng.exponential(1.0 / lam_max)
        if t >= config.duration:
            break
        if rng.random() * lam_max > config.rate_at(t) / 3600.0:
            continue
        person += 1
        pid = f"p{person:05d}"
        exit_t = min(t + rng.exponential(config.mean_dwell), float(config.duration))
        events.append(EntryExitEvent(t, +1, pid))
        events.append(EntryExitEvent(exit_t, -1, pid))
    events.sort(key=lambda e: (e.timestamp, -e.delta))
    return events


def _presence_intervals(events: list[EntryExitEvent], duration: float) -> list[tuple[float, float, str]]:
    entries: dict[str, float] = {}
    intervals = []
    for e in sorted(events, key=lambda e: e.timestamp):
        if e.delta == +1:
            entries[e.person_id] = e.timestamp
        else:
            start = entries.pop(e.person_id, None)
            if start is None:
                raise DataError(f"exit without entry for {e.person_id}")
            intervals.append((start, e.timestamp, e.person_id))
    for pid, start in entries.items():
        intervals.append((start, duration, pid))
    intervals.sort()
    return intervals


def _smooth(w: np.ndarray, kernel: int) -> np.ndarray:
    # hanning(<4) has zero interior mass; clamp so the kernel always sums > 0
    k = np.hanning(max(kernel, 4)).astype(np.float32)
    return np.convolve(w, k / k.sum(), mode="same")


def _cough(sr: int, rng: np.random.Generator) -> np.ndarray:
    dur = rng.uniform(0.3, 0.5)
    n = int(dur * sr)
    t = np.arange(n, dtype=np.float32) / sr
    env = (t / 0.03) * np.exp(-t / (dur / 4.0))
    env /= env.max()
    w = rng.standard_normal(n, dtype=np.float32) * env
    return _AMP_COUGH * rng.uniform(0.7, 1.3) * _smooth(w, max(sr // 1000, 4))


def _footsteps(sr: int, rng: np.random.Generator) -> np.ndarray:
    n_steps = int(rng.integers(3, 9))
    interval = rng.uniform(0.45, 0.6)
    step_len = int(0.05 * sr)
    total = int(((n_steps - 1) * interval + 0.1) * sr)
    w = np.zeros(total, dtype=np.float32)
    t = np.arange(step_len, dtype=np.float32) / sr
    for i in range(n_steps):
        start = int(i * interval * sr)
        transient = rng.standard_normal(step_len, dtype=np.float32) * np.exp(-t / 0.012, dtype=np.float32)
        w[start:start + step_len] += transient
    # footsteps are thuddy: heavier smoothing acts as a crude lowpass
    return _AMP_STEP * rng.uniform(0.7, 1.3) * _smooth(w, max(sr // 250, 8))


def _rustle(sr: int, rng: np.random.Generator) -> np.ndarray:
    dur = rng.uniform(0.3, 1.2)
    n = int(dur * sr)
    w = rng.standard_normal(n, dtype=np.float32)
    w = _smooth(w, max(sr // 2000, 2))
    fade = min(n // 4, int(0.05 * sr))
    env = np.ones(n, dtype=np.float32)
    env[:fade] = np.linspace(0, 1, fade, dtype=np.float32)
    env[-fade:] = np.linspace(1, 0, fade, dtype=np.float32)
    return _AMP_RUSTLE * rng.uniform(0.7, 1.3) * w * env


def _speech_like(sr: int, dur_seconds: int, rng: np.random.Generator) -> np.ndarray:
    """Harmonic tone stack with 4 Hz amplitude modulation (speech-like, not speech)."""
    n = dur_seconds * sr
    t = np.arange(n, dtype=np.float64) / sr
    f0 = rng.uniform(150.0, 250.0)
    vibrato = 1.0 + 0.01 * np.sin(2 * np.pi * 5.0 * t + rng.uniform(0, 2 * np.pi))
    phase = np.cumsum(f0 * vibrato) / sr
    w = np.zeros(n)
    for k in range(1, 6):
        if k * f0 * 1.05 >= sr / 2:
            break
        w += np.sin(2 * np.pi * k * phase + rng.uniform(0, 2 * np.pi)) / k
    am = 0.1 + 0.9 * (0.5 + 0.5 * np.sin(2 * np.pi * _SPEECH_AM_HZ * t + rng.uniform(0, 2 * np.pi)))
    return (_AMP_SPEECH * rng.uniform(0.8, 1.2) * (w / 2.3) * am).astype(np.float32)


def _pink_noise(n: int, rng: np.random.Generator) -> np.ndarray:
    white = rng.standard_normal(n, dtype=np.float32)
    pink = lfilter(np.asarray(_PINK_B, dtype=np.float32), np.asarray(_PINK_A, dtype=np.float32), white)
    return (pink / 3.0).astype(np.float32)


def render_audio(events: list[EntryExitEvent], config: ScenarioConfig,
                 rng: np.random.Generator) -> tuple[MultichannelClip, np.ndarray]:
    """Synthesize the scenario's microphone signals and per-second speech labels."""
    if len(config.mic_positions) < 1:
        raise DataError("mic geometry is empty")
    sr = config.sample_rate
    n = config.duration * sr
    mics = np.asarray(config.mic_positions, dtype=np.float64)
    channels = np.zeros((mics.shape[0], n), dtype=np.float64)
    labels = np.zeros(config.duration, dtype=bool)
    room = np.asarray(config.room_size, dtype=np.float64)

    def place() -> np.ndarray:
        return rng.uniform(0.0, 1.0, size=2) * room

    def mix(waveform: np.ndarray, onset_s: float, pos: np.ndarray) -> None:
        base = int(round(onset_s * sr))
        for m in range(mics.shape[0]):
            dist = max(float(np.hypot(*(pos - mics[m]))), MIN_SOURCE_DISTANCE)
            start = base + int(round(dist / SPEED_OF_SOUND * sr))
            end = min(start + waveform.size, n)
            if start >= n or end <= 0:
                continue
            lo = max(start, 0)
            channels[m, lo:end] += (1.0 / dist) * waveform[lo - start:end - start]

    # stationary HVAC source: one pink stream delayed into each channel
    hvac_pos = place()
    hvac = _pink_noise(n, rng) * config.noise_floor
    for m in range(mics.shape[0]):
        dist = max(float(np.hypot(*(hvac_pos - mics[m]))), MIN_SOURCE_DISTANCE)
        delay = int(round(dist / SPEED_OF_SOUND * sr))
        channels[m, delay:] += (1.0 / dist) * hvac[: n - delay]

    speech_mean_gap = (sum(_SPEECH_DUR_RANGE) / 2.0) * (1.0 - config.speech_fraction) / max(config.speech_fraction, 1e-9)
    for start, end, _pid in _presence_intervals(events, float(config.duration)):
        span = end - start
        if span <= 0:
            continue
        for rate, maker in ((config.cough_rate, _cough),
                            (config.footstep_rate, _footsteps),
                            (config.rustle_rate, _rustle)):
            for onset in np.sort(rng.uniform(start, end, rng.poisson(rate / 60.0 * span))):
                mix(maker(sr, rng), float(onset), place())
        if config.speech_fraction > 0:
            t = start
            while True:
                t += rng.exponential(speech_mean_gap)
                seg_start = int(np.ceil(t))
                dur = int(rng.integers(_SPEECH_DUR_RANGE[0], _SPEECH_DUR_RANGE[1] + 1))
                dur = min(dur, int(end) - seg_start, config.duration - seg_start)
                if seg_start >= end or seg_start >= config.duration:
                    break
                if dur < 1:
                    break
                mix(_speech_like(sr, dur, rng), float(seg_start), place())
                labels[seg_start:seg_start + dur] = True
                t = seg_start + dur

    np.clip(channels, -1.0, 1.0, out=channels)
    return MultichannelClip(sr, channels), labels


def generate_scenario(config: ScenarioConfig) -> Scenario:
    """Full deterministic scenario from a config's seed."""
    rng = np.random.default_rng(config.seed)
    events = generate_events(config, rng)
    truth = occupancy_from_events(events, config.duration)
    audio, labels = render_audio(events, config, rng)
    return Scenario(config=config, events=events, truth=truth, audio=audio, chunk_labels=labels)


def build_dataset(scenario: Scenario, pipeline_config, encoder=None):
    """dsp -> gate -> embed over the scenario; see ``pipeline.build_dataset``."""
    from . import pipeline  # deferred to keep module dependencies acyclic

    return pipeline.build_dataset(scenario, pipeline_config, encoder=encoder)


def save_scenario(directory: str | Path, scenario: Scenario) -> None:
    """Serialize to a directory: events.csv, truth.csv, labels.csv, audio.wav, manifest.json."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    with open(d / "events.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["timestamp", "delta", "person_id"])
        for e in scenario.events:
            w.writerow([f"{e.timestamp:.6f}", e.delta, e.person_id])
    with open(d / "truth.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["second", "count"])
        for s, c in enumerate(scenario.truth.counts):
            w.writerow([s, int(c)])
    with open(d / "labels.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["second", "is_speech"])
        for s, flag in enumerate(scenario.chunk_labels):
            w.writerow([s, int(flag)])
    write_wav(d / "audio.wav", scenario.audio)
    (d / "manifest.json").write_text(
        json.dumps({"config": scenario.config.to_json_dict()}, indent=2, sort_keys=True) + "\n"
    )


def load_scenario(directory: str | Path) -> Scenario:
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text())
    config = ScenarioConfig.from_json_dict(manifest["config"])
    events = []
    with open(d / "events.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            events.append(EntryExitEvent(float(row["timestamp"]), int(row["delta"]), row["person_id"]))
    counts = np.loadtxt(d / "truth.csv", delimiter=",", skiprows=1, dtype=np.int64, ndmin=2)[:, 1]
    labels = np.loadtxt(d / "labels.csv", delimiter=",", skiprows=1, dtype=np.int64, ndmin=2)[:, 1].astype(bool)
    audio = read_wav(d / "audio.wav")
    return Scenario(
        config=config,
        events=events,
        truth=OccupancySeries(counts),
        audio=audio,
        chunk_labels=labels,
    )
