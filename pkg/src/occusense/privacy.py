"""Laplace mechanism over clipped embedding sequences, with budget accounting.

Every released row is assumed L1-clipped to C, which bounds the L1
sensitivity of the release at C; adding i.i.d. Laplace(0, C/epsilon) noise
per coordinate then makes each second's release (epsilon, 0)-differentially
private, and releasing T seconds spends epsilon*T by sequential composition.

The ledger stores the released-row count and computes the spent budget as a
single product on read, so accounting is exact with no accumulation drift.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .embed import EmbeddingSequence, clip_rows
from .errors import ContractViolation, DataError


class NoiseSource:
    """Random generator handle for the mechanism.

    Production mode (no seed) draws entropy from the OS.  Seeded mode exists
    for tests and reproduction runs only: a seeded noise stream is
    predictable, which voids the differential-privacy guarantee.
    """

    def __init__(self, seed: int | None = None):
        self.seeded = seed is not None
        self._rng = np.random.default_rng(seed)

    def uniform_symmetric(self, size=None) -> np.ndarray | float:
        """Uniform draws on (-0.5, 0.5), endpoints excluded."""
        u = self._rng.random(size) - 0.5
        # rng.random() can return exactly 0.0; resample the (measure-zero)
        # boundary so log1p(-2|u|) below stays finite
        if size is None:
            while u <= -0.5:
                u = self._rng.random() - 0.5
            return u
        bad = u <= -0.5
        while bad.any():
            u[bad] = self._rng.random(int(bad.sum())) - 0.5
            bad = u <= -0.5
        return u


def laplace_sample(scale: float, rng: NoiseSource) -> float:
    """One draw from Laplace(0, scale) via the inverse CDF."""
    return float(laplace_array(scale, None, rng))


def laplace_array(scale: float, shape, rng: NoiseSource) -> np.ndarray | float:
    """Laplace(0, scale) draws: scale * sign(u) * ln(1 - 2|u|), u ~ U(-0.5, 0.5)."""
    if not (np.isfinite(scale) and scale > 0):
        raise DataError(f"Laplace scale must be positive, got {scale}")
    u = rng.uniform_symmetric(shape)
    return scale * np.sign(u) * np.log1p(-2.0 * np.abs(u))


@dataclass(frozen=True)
class PrivacyParams:
    """Clipping bound C and per-second budget epsilon."""

    clip_bound: float
    epsilon: float

    def __post_init__(self):
        if not (np.isfinite(self.clip_bound) and self.clip_bound > 0):
            raise DataError(f"clip bound must be positive, got {self.clip_bound}")
        if not (np.isfinite(self.epsilon) and self.epsilon > 0):
            raise DataError(f"epsilon must be positive, got {self.epsilon}")

    @property
    def noise_scale(self) -> float:
        """Laplace scale b = C / epsilon."""
        return self.clip_bound / self.epsilon


@dataclass(frozen=True)
class PrivacyLedger:
    """Running count of released seconds at a fixed per-second epsilon.

    ``total_spent`` is computed as count * epsilon on read — one product,
    no accumulation drift.
    """

    per_clip_epsilon: float
    clips_released: int = 0

    def __post_init__(self):
        if self.clips_released < 0:
            raise DataError("clips_released cannot be negative")

    @property
    def total_spent(self) -> float:
        return self.clips_released * self.per_clip_epsilon

    def advanced(self, rows: int) -> "PrivacyLedger":
        if rows < 0:
            raise DataError("cannot release a negative number of rows")
        return replace(self, clips_released=self.clips_released + rows)

    def to_json(self) -> str:
        return json.dumps(
            {
                "clips_released": self.clips_released,
                "per_clip_epsilon": self.per_clip_epsilon,
                "total_spent": self.total_spent,
            },
            sort_keys=True,
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def from_json(cls, text: str) -> "PrivacyLedger":
        d = json.loads(text)
        return cls(per_clip_epsilon=d["per_clip_epsilon"], clips_released=d["clips_released"])

    @classmethod
    def load(cls, path: str | Path) -> "PrivacyLedger":
        return cls.from_json(Path(path).read_text())


def privatize(seq: EmbeddingSequence, params: PrivacyParams, rng: NoiseSource,
              ledger: PrivacyLedger, enforcement: str = "reclip") -> tuple[EmbeddingSequence, PrivacyLedger]:
    """Add i.i.d. Laplace(0, C/epsilon) noise to every coordinate of every row.

    Rows must already be L1-clipped to C.  ``enforcement="reclip"`` (the
    default — the pipeline always clips upstream) silently re-clips any
    violating row; ``"reject"`` raises instead, for audit runs.  The input
    sequence is never mutated.
    """
    if enforcement not in ("reclip", "reject"):
        raise DataError(f"unknown enforcement mode {enforcement!r}")
    if ledger.per_clip_epsilon != params.epsilon:
        raise DataError(
            f"ledger tracks epsilon={ledger.per_clip_epsilon}, privatize called with {params.epsilon}"
        )
    rows = np.array(seq.rows, dtype=np.float64, copy=True)
    norms = np.abs(rows).sum(axis=1)
    over = norms > params.clip_bound * (1.0 + 1e-9)
    if over.any():
        if enforcement == "reject":
            bad = int(np.flatnonzero(over)[0])
            raise ContractViolation(
                f"row {bad} has L1 norm {norms[bad]:.6g} > C={params.clip_bound} (reject mode)"
            )
        rows = clip_rows(rows, params.clip_bound)
    noisy = rows + laplace_array(params.noise_scale, rows.shape, rng)
    return EmbeddingSequence(noisy, seq.timestamps.copy()), ledger.advanced(rows.shape[0])


def sensitivity_audit(seq_a: EmbeddingSequence | np.ndarray, seq_b: EmbeddingSequence | np.ndarray) -> float:
    """L1 distance between two sequences that differ in at most one row.

    This is the executable form of the sensitivity bound: for clipped
    inputs where one second is zeroed, the distance never exceeds C.
    """
    a = seq_a.rows if isinstance(seq_a, EmbeddingSequence) else np.asarray(seq_a, dtype=np.float64)
    b = seq_b.rows if isinstance(seq_b, EmbeddingSequence) else np.asarray(seq_b, dtype=np.float64)
    if a.shape != b.shape:
        raise DataError(f"sequence shapes differ: {a.shape} vs {b.shape}")
    differing = np.flatnonzero(np.abs(a - b).sum(axis=1) > 0)
    if differing.size > 1:
        raise DataError(f"sequences differ in {differing.size} rows, expected at most one")
    return float(np.abs(a - b).sum())
