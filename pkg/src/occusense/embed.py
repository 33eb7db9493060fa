"""Per-second embeddings and L1 clipping.

Two encoder variants sit behind one interface:

* ``FrozenEncoder`` — an untrainable feature map (per-mel-band summary
  statistics plus temporal deltas) pushed through a fixed seeded random
  projection to 512 dimensions.  Deterministic across machines.
* ``TrainableEncoder`` — a small conv-pool-flatten network producing
  128 dimensions, trained jointly with the downstream regressor.  Forward
  and backward passes are written out explicitly so gradients are exact.

``clip_embedding`` rescales a vector so its L1 norm never exceeds the
clipping bound C; the privacy layer's sensitivity argument rests on every
released row having passed through it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dsp import Spectrogram
from .errors import DataError

# Seed of the frozen encoder's random projection.  Published so embeddings
# are reproducible across machines; never change it without bumping the
# parameter-file version.
FROZEN_PROJECTION_SEED = 190515

# Overall feature scale of the frozen encoder, calibrated once so that the
# median L1 norm of synthetic-corpus embeddings sits near the default
# clipping bound C = 1 (roughly half of all rows get clipped).
FROZEN_FEATURE_SCALE = 3.1e-4

FROZEN_DIM = 512
TRAINABLE_DIM = 128


@dataclass(frozen=True)
class ClipBound:
    """L1 clipping parameter C > 0."""

    c: float

    def __post_init__(self):
        if not (np.isfinite(self.c) and self.c > 0):
            raise DataError(f"clip bound must be a positive real, got {self.c}")


@dataclass
class EmbeddingSequence:
    """T per-second embedding rows plus their source seconds."""

    rows: np.ndarray        # (T, d)
    timestamps: np.ndarray  # (T,)

    def __post_init__(self):
        if self.rows.ndim != 2 or self.timestamps.shape != (self.rows.shape[0],):
            raise DataError(f"rows {self.rows.shape} / timestamps {self.timestamps.shape} mismatch")
        if not np.isfinite(self.rows).all():
            raise DataError("embedding rows contain non-finite values")


def append_probability(embedding: np.ndarray, prob: float) -> np.ndarray:
    """Return the embedding with the speech probability appended as its last coordinate."""
    if not (0.0 <= prob <= 1.0):
        raise DataError(f"speech probability must be in [0, 1], got {prob}")
    return np.concatenate([np.asarray(embedding, dtype=np.float64), [float(prob)]])


def clip_embedding(embedding: np.ndarray, bound: ClipBound | float) -> np.ndarray:
    """L1-clip: e / max(1, ||e||_1 / C).  Output norm <= C, direction preserved.

    Vectors already inside the ball (up to a relative 1e-11, which makes the
    operation exactly idempotent) are returned unchanged.
    """
    c = bound.c if isinstance(bound, ClipBound) else float(ClipBound(bound).c)
    e = np.asarray(embedding, dtype=np.float64)
    if not np.isfinite(e).all():
        raise DataError("cannot clip a non-finite embedding")
    norm = np.abs(e).sum()
    if norm <= c * (1.0 + 1e-11):
        return e.copy()
    return e * (c / norm)


def clip_rows(rows: np.ndarray, c: float) -> np.ndarray:
    """Row-wise L1 clip of a (T, d) matrix, same rule as ``clip_embedding``."""
    rows = np.asarray(rows, dtype=np.float64)
    norms = np.abs(rows).sum(axis=1)
    scale = np.ones_like(norms)
    over = norms > c * (1.0 + 1e-11)
    scale[over] = c / norms[over]
    return rows * scale[:, None]


def embed_chunk(spectrogram: Spectrogram, encoder) -> np.ndarray:
    """Encode one one-second spectrogram with either encoder variant."""
    if spectrogram.n_frames != spectrogram.config.frames_per_second:
        raise DataError(
            f"expected a one-second spectrogram of {spectrogram.config.frames_per_second} frames, "
            f"got {spectrogram.n_frames}"
        )
    return encoder.encode(spectrogram.frames)


class FrozenEncoder:
    """Deterministic untrainable encoder: band statistics -> random projection.

    Features per mel band are mean, std, max and mean absolute temporal
    delta of the log energies, each expressed as excess over the silence
    baseline so an all-zero second maps to the zero feature vector.
    """

    def __init__(self, n_frames: int, n_mels: int, log_floor: float,
                 dim: int = FROZEN_DIM, seed: int = FROZEN_PROJECTION_SEED):
        self.n_frames = n_frames
        self.n_mels = n_mels
        self.out_dim = dim
        self._silence = np.log(log_floor)
        n_features = 4 * n_mels
        rng = np.random.default_rng(seed)
        self._projection = rng.standard_normal((n_features, dim)) / np.sqrt(n_features)
        self.trainable = False

    @classmethod
    def for_config(cls, config, dim: int = FROZEN_DIM) -> "FrozenEncoder":
        return cls(config.frames_per_second, config.n_mels, config.log_floor, dim=dim)

    def _features(self, batch: np.ndarray) -> np.ndarray:
        means = batch.mean(axis=1) - self._silence
        stds = batch.std(axis=1)
        maxes = batch.max(axis=1) - self._silence
        deltas = np.abs(np.diff(batch, axis=1)).mean(axis=1)
        return np.concatenate([means, stds, maxes, deltas], axis=1)

    def encode(self, frames: np.ndarray) -> np.ndarray:
        return self.encode_batch(frames[None])[0]

    def encode_batch(self, batch: np.ndarray) -> np.ndarray:
        """batch: (B, T_f, n_mels) -> (B, dim)."""
        if batch.ndim != 3 or batch.shape[1:] != (self.n_frames, self.n_mels):
            raise DataError(f"expected batch of ({self.n_frames}, {self.n_mels}) spectrograms, got {batch.shape}")
        feats = self._features(np.asarray(batch, dtype=np.float64)) * FROZEN_FEATURE_SCALE
        return feats @ self._projection


class TrainableEncoder:
    """Small conv net trained jointly with the regressor.

    Architecture: conv 16@3x3 -> ReLU -> 2x2 max-pool -> conv 32@3x3 ->
    ReLU -> 2x2 max-pool -> flatten -> linear to ``out_dim``.  Convolutions
    are valid (no padding), pooling floors odd sizes.

    The encoder itself is stateless: parameters live in a plain dict passed
    to ``forward``/``backward`` so the optimizer can own a single parameter
    namespace for the whole model.  Keys carry the ``enc.`` prefix.
    """

    CHANNELS = (16, 32)

    def __init__(self, input_shape: tuple[int, int], out_dim: int = TRAINABLE_DIM):
        h, w = input_shape
        c1, c2 = self.CHANNELS
        h1, w1 = (h - 2) // 2, (w - 2) // 2          # conv1 valid + pool
        h2, w2 = (h1 - 2) // 2, (w1 - 2) // 2        # conv2 valid + pool
        if h2 < 1 or w2 < 1:
            raise DataError(f"spectrogram shape {input_shape} too small for the conv stack")
        self.input_shape = (h, w)
        self.out_dim = out_dim
        self.flat_dim = h2 * w2 * c2
        self.trainable = True
        self._params: dict[str, np.ndarray] | None = None

    def init_params(self, seed: int) -> dict[str, np.ndarray]:
        rng = np.random.default_rng(seed)
        c1, c2 = self.CHANNELS

        def uniform(shape, fan_in):
            bound = 1.0 / np.sqrt(fan_in)
            return rng.uniform(-bound, bound, size=shape)

        return {
            "enc.conv1.w": uniform((c1, 1, 3, 3), 9),
            "enc.conv1.b": np.zeros(c1),
            "enc.conv2.w": uniform((c2, c1, 3, 3), 9 * c1),
            "enc.conv2.b": np.zeros(c2),
            "enc.fc.w": uniform((self.flat_dim, self.out_dim), self.flat_dim),
            "enc.fc.b": np.zeros(self.out_dim),
        }

    def bind(self, params: dict[str, np.ndarray]) -> None:
        """Attach a parameter dict so ``encode``/``encode_batch`` work standalone."""
        self._params = params

    def encode(self, frames: np.ndarray) -> np.ndarray:
        return self.encode_batch(frames[None])[0]

    def encode_batch(self, batch: np.ndarray) -> np.ndarray:
        if self._params is None:
            raise DataError("trainable encoder has no bound parameters; call bind() first")
        emb, _ = self.forward(self._params, batch)
        return emb

    def forward(self, params: dict[str, np.ndarray], batch: np.ndarray) -> tuple[np.ndarray, dict]:
        """batch: (B, T_f, n_mels) -> ((B, out_dim), cache)."""
        if batch.ndim != 3 or batch.shape[1:] != self.input_shape:
            raise DataError(f"expected batch of {self.input_shape} spectrograms, got {batch.shape}")
        x = np.asarray(batch, dtype=np.float64)[:, None]  # (B, 1, H, W)
        cache: dict = {"params_id": id(params)}

        a1, cache["conv1"] = _conv_forward(x, params["enc.conv1.w"], params["enc.conv1.b"])
        r1 = np.maximum(a1, 0.0)
        cache["relu1"] = a1 > 0
        p1, cache["pool1"] = _pool_forward(r1)

        a2, cache["conv2"] = _conv_forward(p1, params["enc.conv2.w"], params["enc.conv2.b"])
        r2 = np.maximum(a2, 0.0)
        cache["relu2"] = a2 > 0
        p2, cache["pool2"] = _pool_forward(r2)

        flat = p2.reshape(p2.shape[0], -1)
        cache["flat"] = flat
        cache["p2_shape"] = p2.shape
        emb = flat @ params["enc.fc.w"] + params["enc.fc.b"]
        return emb, cache

    def backward(self, params: dict[str, np.ndarray], cache: dict, demb: np.ndarray) -> dict[str, np.ndarray]:
        """Exact gradients of every ``enc.*`` parameter given d(loss)/d(embedding)."""
        if cache.get("params_id") != id(params):
            raise DataError("stale encoder cache: parameters changed since forward()")
        grads: dict[str, np.ndarray] = {}
        grads["enc.fc.w"] = cache["flat"].T @ demb
        grads["enc.fc.b"] = demb.sum(axis=0)
        dflat = demb @ params["enc.fc.w"].T
        dp2 = dflat.reshape(cache["p2_shape"])

        dr2 = _pool_backward(dp2, cache["pool2"])
        da2 = dr2 * cache["relu2"]
        dp1, grads["enc.conv2.w"], grads["enc.conv2.b"] = _conv_backward(da2, cache["conv2"])

        dr1 = _pool_backward(dp1, cache["pool1"])
        da1 = dr1 * cache["relu1"]
        # conv1 sits on the data; its input gradient is never needed
        _, grads["enc.conv1.w"], grads["enc.conv1.b"] = _conv_backward(da1, cache["conv1"], need_dx=False)
        return grads


def _conv_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, dict]:
    """Valid 3x3 convolution via im2col.  x: (B, C_in, H, W) -> (B, C_out, H-2, W-2)."""
    b_, c_in, h, width = x.shape
    c_out = w.shape[0]
    ho, wo = h - 2, width - 2
    # (B, C_in, ho, wo, 3, 3) -> (B*ho*wo, C_in*9)
    patches = np.lib.stride_tricks.sliding_window_view(x, (3, 3), axis=(2, 3))
    cols = patches.transpose(0, 2, 3, 1, 4, 5).reshape(b_ * ho * wo, c_in * 9)
    out = cols @ w.reshape(c_out, -1).T + b
    out = out.reshape(b_, ho, wo, c_out).transpose(0, 3, 1, 2)
    return out, {"cols": cols, "x_shape": x.shape, "w": w}


def _conv_backward(dout: np.ndarray, cache: dict,
                   need_dx: bool = True) -> tuple[np.ndarray | None, np.ndarray, np.ndarray]:
    b_, c_out, ho, wo = dout.shape
    w = cache["w"]
    c_in = w.shape[1]
    dcols_out = dout.transpose(0, 2, 3, 1).reshape(-1, c_out)
    dw = (dcols_out.T @ cache["cols"]).reshape(w.shape)
    db = dcols_out.sum(axis=0)
    if not need_dx:
        return None, dw, db
    dcols = (dcols_out @ w.reshape(c_out, -1)).reshape(b_, ho, wo, c_in, 3, 3)
    dx = np.zeros(cache["x_shape"])
    for i in range(3):
        for j in range(3):
            dx[:, :, i:i + ho, j:j + wo] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return dx, dw, db


def _pool_quadrants(x: np.ndarray):
    """The four strided 2x2-cell views of x, odd edges dropped."""
    ho, wo = x.shape[2] // 2, x.shape[3] // 2
    return [x[:, :, i:2 * ho:2, j:2 * wo:2] for i in (0, 1) for j in (0, 1)]


def _pool_forward(x: np.ndarray) -> tuple[np.ndarray, dict]:
    """2x2 max-pool, stride 2, odd edges dropped.  Gradient routes to the
    first maximal cell in scan order."""
    q = _pool_quadrants(x)
    out = np.maximum(np.maximum(q[0], q[1]), np.maximum(q[2], q[3]))
    return out, {"quads": q, "out": out, "x_shape": x.shape}


def _pool_backward(dout: np.ndarray, cache: dict) -> np.ndarray:
    out = cache["out"]
    dx = np.zeros(cache["x_shape"])
    dq = _pool_quadrants(dx)
    remaining = np.ones(out.shape, dtype=bool)
    for quad, dquad in zip(cache["quads"], dq):
        hit = remaining & (quad == out)
        dquad += dout * hit
        remaining &= ~hit
    return dx
