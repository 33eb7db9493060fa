"""Per-second occupancy regressor: a small attention encoder with exact
hand-written gradients.

Each of the ``layers`` encoder layers projects its T x d_emb input to
per-head queries, keys and values (d_emb -> d_head per head), aggregates
values with a row-softmax of raw q.k logits (no 1/sqrt(d) scaling by
default), concatenates the heads back to d_emb, adds the residual input and
applies ReLU.  A final linear layer maps the sequence to T scalars.

Inputs whose dimensionality differs from ``d_emb`` (512-dim frozen
embeddings, probability-extended rows) pass through a trainable linear
adapter first.

Everything is float64 and deterministic given (params, input); training is
single-writer per-window Adam with seeded shuffling.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError, NumericalFault


@dataclass(frozen=True)
class TransformerConfig:
    layers: int = 4
    heads: int = 8
    d_emb: int = 128
    d_head: int = 16
    window: int = 60
    # The aggregation rule uses raw exp(q.k); sqrt(d_head) scaling is
    # available but off by default.
    scaled_attention: bool = False

    def __post_init__(self):
        if self.heads * self.d_head != self.d_emb:
            raise ConfigError(f"heads * d_head must equal d_emb, got {self.heads}*{self.d_head} != {self.d_emb}")
        if self.layers < 1 or self.window < 1:
            raise ConfigError("layers and window must be >= 1")

    def to_dict(self) -> dict:
        return {
            "layers": self.layers, "heads": self.heads, "d_emb": self.d_emb,
            "d_head": self.d_head, "window": self.window,
            "scaled_attention": self.scaled_attention,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TransformerConfig":
        return cls(**d)


def init_params(config: TransformerConfig, d_in: int | None = None, seed: int = 0) -> dict[str, np.ndarray]:
    """Seeded uniform(-1/sqrt(d_in), 1/sqrt(d_in)) init for every matrix.

    When ``d_in`` differs from ``config.d_emb`` an ``adapter.*`` linear map
    is added in front of the first layer.  Per-head projections are stored
    stacked: ``layer{l}.wq`` is (d_emb, heads*d_head) with head h occupying
    columns [h*d_head, (h+1)*d_head).
    """
    d_in = config.d_emb if d_in is None else d_in
    rng = np.random.default_rng(seed)

    def uniform(rows, cols):
        bound = 1.0 / np.sqrt(rows)
        return rng.uniform(-bound, bound, size=(rows, cols))

    params: dict[str, np.ndarray] = {}
    if d_in != config.d_emb:
        params["adapter.w"] = uniform(d_in, config.d_emb)
        params["adapter.b"] = np.zeros(config.d_emb)
    for layer in range(config.layers):
        params[f"layer{layer}.wq"] = uniform(config.d_emb, config.d_emb)
        params[f"layer{layer}.wk"] = uniform(config.d_emb, config.d_emb)
        params[f"layer{layer}.wv"] = uniform(config.d_emb, config.d_emb)
    params["head.w"] = uniform(config.d_emb, 1)
    params["head.b"] = np.zeros(1)
    return params


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    """Numerically stable softmax over the last axis (mandatory: logits are unscaled)."""
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def attention_layer(x: np.ndarray, wq: np.ndarray, wk: np.ndarray, wv: np.ndarray,
                    heads: int, scaled: bool = False) -> tuple[np.ndarray, dict]:
    """One encoder layer: multi-head attention + residual + ReLU.

    Returns the T x d_emb output and the cache needed for its backward pass.
    """
    t, d = x.shape
    if wq.shape != (d, d) or wk.shape != (d, d) or wv.shape != (d, d):
        raise DataError(f"projection shape mismatch: x is {x.shape}, wq is {wq.shape}")
    dh = d // heads
    q = (x @ wq).reshape(t, heads, dh)
    k = (x @ wk).reshape(t, heads, dh)
    v = (x @ wv).reshape(t, heads, dh)
    logits = np.einsum("thd,shd->hts", q, k)
    if scaled:
        logits = logits / np.sqrt(dh)
    attn = _softmax_rows(logits)
    context = np.einsum("hts,shd->thd", attn, v).reshape(t, d)
    z = context + x
    out = np.maximum(z, 0.0)
    if not np.isfinite(out).all():
        raise NumericalFault("non-finite activations in attention layer")
    cache = {"x": x, "q": q, "k": k, "v": v, "attn": attn, "relu_mask": z > 0}
    return out, cache


def _attention_backward(dout: np.ndarray, cache: dict, wq, wk, wv, scaled: bool):
    t, d = cache["x"].shape
    heads = cache["attn"].shape[0]
    dh = d // heads
    x, q, k, v, attn = cache["x"], cache["q"], cache["k"], cache["v"], cache["attn"]

    dz = dout * cache["relu_mask"]
    dx = dz.copy()                                   # residual branch
    dcontext = dz.reshape(t, heads, dh)
    dattn = np.einsum("thd,shd->hts", dcontext, v)
    dv = np.einsum("hts,thd->shd", attn, dcontext)
    # row-softmax backward: dS = A * (dA - sum_s dA*A)
    dlogits = attn * (dattn - (dattn * attn).sum(axis=-1, keepdims=True))
    if scaled:
        dlogits = dlogits / np.sqrt(dh)
    dq = np.einsum("hts,shd->thd", dlogits, k)
    dk = np.einsum("hts,thd->shd", dlogits, q)

    dq2, dk2, dv2 = (a.reshape(t, d) for a in (dq, dk, dv))
    dwq, dwk, dwv = x.T @ dq2, x.T @ dk2, x.T @ dv2
    dx += dq2 @ wq.T + dk2 @ wk.T + dv2 @ wv.T
    return dx, dwq, dwk, dwv


def forward(params: dict[str, np.ndarray], x: np.ndarray,
            config: TransformerConfig) -> tuple[np.ndarray, dict]:
    """Full forward pass: optional adapter, stacked layers, linear head.

    Returns (predictions of shape (T,), activation cache for backward).
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise DataError(f"input must be (T, d), got shape {x.shape}")
    if not np.isfinite(x).all():
        raise NumericalFault("non-finite model input")
    cache: dict = {"params_id": id(params), "x0": x, "layers": []}
    if "adapter.w" in params:
        if x.shape[1] != params["adapter.w"].shape[0]:
            raise DataError(f"input dim {x.shape[1]} != adapter dim {params['adapter.w'].shape[0]}")
        x = x @ params["adapter.w"] + params["adapter.b"]
    elif x.shape[1] != config.d_emb:
        raise DataError(f"input dim {x.shape[1]} != d_emb {config.d_emb} and no adapter present")
    cache["x_model"] = x
    for layer in range(config.layers):
        x, layer_cache = attention_layer(
            x, params[f"layer{layer}.wq"], params[f"layer{layer}.wk"], params[f"layer{layer}.wv"],
            config.heads, config.scaled_attention,
        )
        cache["layers"].append(layer_cache)
    cache["x_final"] = x
    pred = (x @ params["head.w"] + params["head.b"]).ravel()
    if not np.isfinite(pred).all():
        raise NumericalFault("non-finite predictions")
    cache["pred"] = pred
    return pred, cache


def mse_loss(pred: np.ndarray, truth: np.ndarray) -> float:
    """Mean squared error between aligned series."""
    pred, truth = np.asarray(pred, dtype=np.float64), np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise DataError(f"length mismatch: {pred.shape} vs {truth.shape}")
    return float(np.mean((pred - truth) ** 2))


def mse_grad(pred: np.ndarray, truth: np.ndarray) -> np.ndarray:
    """d(MSE)/d(pred)."""
    pred, truth = np.asarray(pred, dtype=np.float64), np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise DataError(f"length mismatch: {pred.shape} vs {truth.shape}")
    return 2.0 * (pred - truth) / pred.size


def backward(cache: dict, params: dict[str, np.ndarray], config: TransformerConfig,
             dpred: np.ndarray) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Exact reverse-mode gradients for every parameter.

    Returns (grads, d(loss)/d(model input)); the second output feeds the
    jointly trained encoder.  The cache must come from a ``forward`` call on
    the same parameter dict.
    """
    if cache.get("params_id") != id(params):
        raise DataError("stale cache: parameters changed since forward()")
    grads: dict[str, np.ndarray] = {}
    dpred = np.asarray(dpred, dtype=np.float64).reshape(-1, 1)
    grads["head.w"] = cache["x_final"].T @ dpred
    grads["head.b"] = dpred.sum(axis=0)
    dx = dpred @ params["head.w"].T
    for layer in range(config.layers - 1, -1, -1):
        dx, dwq, dwk, dwv = _attention_backward(
            dx, cache["layers"][layer],
            params[f"layer{layer}.wq"], params[f"layer{layer}.wk"], params[f"layer{layer}.wv"],
            config.scaled_attention,
        )
        grads[f"layer{layer}.wq"] = dwq
        grads[f"layer{layer}.wk"] = dwk
        grads[f"layer{layer}.wv"] = dwv
    if "adapter.w" in params:
        grads["adapter.w"] = cache["x0"].T @ dx
        grads["adapter.b"] = dx.sum(axis=0)
        dx = dx @ params["adapter.w"].T
    return grads, dx


@dataclass
class AdamState:
    """First/second moment accumulators and step counter for Adam."""

    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: dict[str, np.ndarray], lr: float = 0.001) -> "AdamState":
        state = cls(lr=lr)
        for name, p in params.items():
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        return state


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: AdamState) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update.  Returns fresh parameter arrays;
    moment buffers are updated in place (single-writer)."""
    state.step += 1
    t = state.step
    out: dict[str, np.ndarray] = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            out[name] = p.copy()
            continue
        if g.shape != p.shape:
            raise DataError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1 - state.beta1) * g
        v *= state.beta2
        v += (1 - state.beta2) * g * g
        m_hat = m / (1 - state.beta1 ** t)
        v_hat = v / (1 - state.beta2 ** t)
        out[name] = p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return out, state


def train(dataset, config: TransformerConfig, epochs: int = 30, seed: int = 0,
          lr: float = 0.001) -> tuple[dict[str, np.ndarray], list[float]]:
    """Train on precomputed embedding sequences.

    ``dataset`` is a sequence of ``(EmbeddingSequence, truth array)`` pairs
    (anything with ``.rows`` / plain arrays works).  One window per Adam
    step, shuffled each epoch with the run seed.  Returns the final
    parameters and the per-epoch mean loss history.
    """
    if len(dataset) == 0:
        raise DataError("cannot train on an empty dataset")
    first_rows = _rows_of(dataset[0][0])
    d_in = first_rows.shape[1]
    params = init_params(config, d_in=d_in, seed=seed)
    state = AdamState.for_params(params, lr=lr)
    rng = np.random.default_rng(seed)
    history: list[float] = []
    for epoch in range(epochs):
        order = rng.permutation(len(dataset))
        losses = []
        for i in order:
            rows = _rows_of(dataset[i][0])
            truth = np.asarray(dataset[i][1], dtype=np.float64)
            pred, cache = forward(params, rows, config)
            loss = mse_loss(pred, truth)
            if not np.isfinite(loss):
                raise NumericalFault(f"training diverged at epoch {epoch}, window {i}: loss={loss}")
            grads, _ = backward(cache, params, config, mse_grad(pred, truth))
            params, state = adam_step(params, grads, state)
            losses.append(loss)
        history.append(float(np.mean(losses)))
    return params, history


def _rows_of(x) -> np.ndarray:
    return x.rows if hasattr(x, "rows") else np.asarray(x, dtype=np.float64)
