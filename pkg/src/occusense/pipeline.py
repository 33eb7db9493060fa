"""End-to-end wiring: beamform -> gate -> embed -> (clip/privatize) -> model.

``build_windows`` turns a scenario into spectrogram windows with aligned
per-source-second truth and contiguous fold tags.  ``train_pipeline`` trains
the regressor (jointly with the conv encoder when selected), optionally
noise-aware: models intended for DP inference see clipping plus fresh
Laplace noise at the embedding boundary during training, at the deployment
epsilon.  ``evaluate_model`` re-aligns predictions to their source seconds
and reports MAE/RMSE/rho; ``dp_sweep`` runs the epsilon grid.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import model as tmodel
from .dsp import MonoClip, SpectrogramConfig, beamform, gcc_phat_tdoa, log_mel_spectrogram
from .embed import FROZEN_DIM, EmbeddingSequence, FrozenEncoder, TrainableEncoder, clip_rows
from .errors import ConfigError, DataError, NoSignalError
from .evaluate import MetricsReport, compute_metrics
from .gate import LabeledChunk, assemble_scheme1, assemble_scheme2, speech_probability
from .privacy import NoiseSource, PrivacyLedger, PrivacyParams, laplace_array, privatize


@dataclass(frozen=True)
class PipelineConfig:
    """Everything needed to reproduce one training/evaluation run."""

    spectrogram: SpectrogramConfig = field(default_factory=SpectrogramConfig)
    scheme: int = 1
    window: int = 60
    encoder: str = "frozen"            # "frozen" | "trainable"
    clip_bound: float = 1.0            # required: rows entering the model are always L1-clipped
    epsilon: float | None = None       # per-second DP budget; None disables the mechanism
    epochs: int = 30
    lr: float = 0.001
    seed: int = 0
    folds: int = 10
    layers: int = 4
    heads: int = 8
    d_emb: int = 128
    d_head: int = 16
    tdoa_seconds: float = 8.0          # leading span used to estimate per-clip TDOAs
    tdoa_max_lag_s: float = 0.03       # search range, generous for room-scale arrays

    def __post_init__(self):
        if self.scheme not in (1, 2):
            raise ConfigError(f"scheme must be 1 or 2, got {self.scheme}")
        if self.encoder not in ("frozen", "trainable"):
            raise ConfigError(f"encoder must be 'frozen' or 'trainable', got {self.encoder!r}")
        if self.clip_bound <= 0:
            raise ConfigError(f"clip_bound must be positive, got {self.clip_bound}")
        if self.epsilon is not None and self.epsilon <= 0:
            raise ConfigError(f"epsilon must be positive when set, got {self.epsilon}")

    def transformer_config(self) -> tmodel.TransformerConfig:
        return tmodel.TransformerConfig(
            layers=self.layers, heads=self.heads, d_emb=self.d_emb,
            d_head=self.d_head, window=self.window,
        )

    def replace(self, **kwargs) -> "PipelineConfig":
        return dataclasses.replace(self, **kwargs)


@dataclass
class WindowExample:
    """One transformer input window with aligned truth and its fold tag."""

    specs: np.ndarray            # (W, T_f, n_mels)
    mask: np.ndarray             # (W,) 1 = real audio, 0 = zeroed speech second
    timestamps: np.ndarray       # (W,) source seconds
    truth: np.ndarray            # (W,) occupancy at each source second
    fold: int
    probs: np.ndarray | None = None


@dataclass
class DatasetExample:
    """Embedded form of a window, as produced by ``build_dataset``."""

    embeddings: EmbeddingSequence
    truth: np.ndarray
    fold: int


@dataclass
class TrainedModel:
    params: dict[str, np.ndarray]
    transformer: tmodel.TransformerConfig
    config: PipelineConfig
    encoder: object
    d_in: int
    loss_history: list[float]


@dataclass
class EvalResult:
    metrics: MetricsReport
    seconds: np.ndarray
    truth: np.ndarray
    pred: np.ndarray
    valid: np.ndarray
    per_draw: list[MetricsReport]
    ledger: PrivacyLedger | None = None


def beamform_clip(clip, cfg: PipelineConfig) -> MonoClip:
    """TDOA-align the channels against channel 0 and average them.

    Lags are estimated on a leading slice of the clip (desk-scale stand-in
    for the array firmware's continuous estimation).  A silent slice falls
    back to zero lags.
    """
    if clip.n_channels == 1:
        return clip.channel(0)
    sr = clip.sample_rate
    span = min(clip.length, max(int(cfg.tdoa_seconds * sr), 4 * int(cfg.tdoa_max_lag_s * sr) + 8))
    max_lag = max(1, min(int(cfg.tdoa_max_lag_s * sr), span // 2 - 1))
    ref = MonoClip(sr, clip.channels[0, :span])
    lags = [0]
    for m in range(1, clip.n_channels):
        try:
            lags.append(gcc_phat_tdoa(ref, MonoClip(sr, clip.channels[m, :span]), max_lag))
        except NoSignalError:
            lags.append(0)
    return beamform(clip, lags)


def label_chunks(mono: MonoClip, spec_cfg: SpectrogramConfig) -> list[LabeledChunk]:
    """Slice the stream into one-second chunks, spectrogram + speech score each."""
    sr = spec_cfg.sample_rate
    if mono.sample_rate != sr:
        raise DataError(f"stream rate {mono.sample_rate} != front-end rate {sr}")
    n_seconds = mono.length // sr
    chunks = []
    for s in range(n_seconds):
        spec = log_mel_spectrogram(MonoClip(sr, mono.samples[s * sr:(s + 1) * sr]), spec_cfg)
        chunks.append(LabeledChunk(spec, speech_probability(spec), s))
    return chunks


def build_windows(scenario, cfg: PipelineConfig) -> list[WindowExample]:
    """Run dsp -> gate over a scenario and pair windows with truth and folds.

    Folds are ``cfg.folds`` contiguous equal time segments; a window belongs
    to the segment of its first source second.
    """
    mono = beamform_clip(scenario.audio, cfg)
    chunks = label_chunks(mono, cfg.spectrogram)
    if cfg.scheme == 1:
        raw = assemble_scheme1(chunks, cfg.window)
    else:
        raw = assemble_scheme2(chunks, cfg.window)
    if not raw:
        raise DataError(
            f"scenario of {len(chunks)} chunks yields no {cfg.window}-second windows under scheme {cfg.scheme}"
        )
    duration = len(scenario.truth.counts)
    seg = duration / cfg.folds
    out = []
    for w in raw:
        truth = scenario.truth.counts[w.timestamps].astype(np.float64)
        fold = min(cfg.folds - 1, int(w.timestamps[0] / seg))
        out.append(WindowExample(w.chunks, w.mask, w.timestamps, truth, fold, w.probs))
    return out


def make_encoder(cfg: PipelineConfig):
    if cfg.encoder == "frozen":
        return FrozenEncoder.for_config(cfg.spectrogram, dim=FROZEN_DIM)
    shape = (cfg.spectrogram.frames_per_second, cfg.spectrogram.n_mels)
    return TrainableEncoder(shape, out_dim=cfg.d_emb)


def input_dim(cfg: PipelineConfig, encoder) -> int:
    return encoder.out_dim + (1 if cfg.scheme == 2 else 0)


def _assemble_rows(emb: np.ndarray, window: WindowExample, cfg: PipelineConfig) -> np.ndarray:
    """Mask speech seconds, append probabilities (scheme 2), unclipped."""
    rows = emb * window.mask[:, None]
    if cfg.scheme == 2:
        rows = np.concatenate([rows, window.probs[:, None]], axis=1)
    return rows


def _clip_rows_cached(rows: np.ndarray, c: float):
    """Row-wise L1 clip keeping what the backward pass needs."""
    norms = np.abs(rows).sum(axis=1)
    scale = np.ones_like(norms)
    over = norms > c * (1.0 + 1e-11)
    scale[over] = c / norms[over]
    clipped = rows * scale[:, None]
    return clipped, (rows, clipped, scale, norms, over)


def _clip_rows_backward(dclipped: np.ndarray, cache) -> np.ndarray:
    """d(clip)/d(rows): s*I - clipped x sign(rows) / norm on clipped rows."""
    rows, clipped, scale, norms, over = cache
    drows = dclipped * scale[:, None]
    if over.any():
        inner = (dclipped[over] * clipped[over]).sum(axis=1) / norms[over]
        drows[over] -= np.sign(rows[over]) * inner[:, None]
    return drows


def train_pipeline(windows: list[WindowExample], cfg: PipelineConfig,
                   seed: int | None = None) -> TrainedModel:
    """Train the regressor on spectrogram windows, one window per Adam step.

    Deterministic given the seed: shuffling, parameter init and (when
    ``cfg.epsilon`` is set) the training-time Laplace noise all derive from
    it.  Raises ``NumericalFault`` on divergence.
    """
    if not windows:
        raise DataError("cannot train on an empty window list")
    seed = cfg.seed if seed is None else seed
    encoder = make_encoder(cfg)
    tconfig = cfg.transformer_config()
    d_in = input_dim(cfg, encoder)
    params = tmodel.init_params(tconfig, d_in=d_in, seed=seed)
    if encoder.trainable:
        params.update(encoder.init_params(seed + 1))
    state = tmodel.AdamState.for_params(params, lr=cfg.lr)
    shuffle_rng = np.random.default_rng(seed)
    noise = NoiseSource(seed + 7919) if cfg.epsilon is not None else None
    noise_scale = (cfg.clip_bound / cfg.epsilon) if cfg.epsilon is not None else None

    frozen_rows = None
    if not encoder.trainable:
        # frozen embeddings never change: precompute the clipped rows once
        frozen_rows = [
            clip_rows(_assemble_rows(encoder.encode_batch(w.specs), w, cfg), cfg.clip_bound)
            for w in windows
        ]

    history: list[float] = []
    for epoch in range(cfg.epochs):
        order = shuffle_rng.permutation(len(windows))
        losses = np.empty(order.size)
        for j, i in enumerate(order):
            w = windows[i]
            if frozen_rows is not None:
                rows = frozen_rows[i]
                enc_cache = clip_cache = None
            else:
                emb, enc_cache = encoder.forward(params, w.specs)
                rows, clip_cache = _clip_rows_cached(_assemble_rows(emb, w, cfg), cfg.clip_bound)
            if noise is not None:
                rows = rows + laplace_array(noise_scale, rows.shape, noise)
            pred, cache = tmodel.forward(params, rows, tconfig)
            loss = tmodel.mse_loss(pred, w.truth)
            if not np.isfinite(loss):
                from .errors import NumericalFault

                raise NumericalFault(f"training diverged at epoch {epoch}, window {i}")
            grads, dx = tmodel.backward(cache, params, tconfig, tmodel.mse_grad(pred, w.truth))
            if encoder.trainable:
                drows = _clip_rows_backward(dx, clip_cache)
                if cfg.scheme == 2:
                    drows = drows[:, :-1]          # probability column is data
                demb = drows * w.mask[:, None]     # masked seconds saw no encoder output
                grads.update(encoder.backward(params, enc_cache, demb))
            params, state = tmodel.adam_step(params, grads, state)
            losses[j] = loss
        history.append(float(losses.mean()))
    if encoder.trainable:
        encoder.bind(params)
    return TrainedModel(params, tconfig, cfg, encoder, d_in, history)


def _window_rows(mdl: TrainedModel, w: WindowExample) -> np.ndarray:
    cfg = mdl.config
    if mdl.encoder.trainable:
        emb, _ = mdl.encoder.forward(mdl.params, w.specs)
    else:
        emb = mdl.encoder.encode_batch(w.specs)
    return clip_rows(_assemble_rows(emb, w, cfg), cfg.clip_bound)


def predict_window(mdl: TrainedModel, w: WindowExample,
                   noise: NoiseSource | None = None,
                   ledger: PrivacyLedger | None = None) -> tuple[np.ndarray, PrivacyLedger | None]:
    """Predictions for one window; applies the Laplace mechanism when the
    model was trained for a DP deployment."""
    rows = _window_rows(mdl, w)
    cfg = mdl.config
    if cfg.epsilon is not None:
        if noise is None:
            noise = NoiseSource()
        if ledger is None:
            ledger = PrivacyLedger(per_clip_epsilon=cfg.epsilon)
        seq = EmbeddingSequence(rows, w.timestamps.astype(np.float64))
        seq, ledger = privatize(seq, PrivacyParams(cfg.clip_bound, cfg.epsilon), noise, ledger)
        rows = seq.rows
    pred, _ = tmodel.forward(mdl.params, rows, mdl.transformer)
    return pred, ledger


def evaluate_model(mdl: TrainedModel, windows: list[WindowExample],
                   dp_draws: int = 1, noise_seed: int | None = None) -> EvalResult:
    """Re-align window predictions to wall-clock seconds and score them.

    Scheme-1 windows skip speech seconds, so the returned per-second series
    carries a validity mask; excluded seconds are counted in the report.
    For DP models the metrics average over ``dp_draws`` independent noise
    draws (an estimate of expected deployment error; each draw spends its
    own budget in the ledger).
    """
    if not windows:
        raise DataError("cannot evaluate on an empty window list")
    cfg = mdl.config
    dp = cfg.epsilon is not None
    draws = dp_draws if dp else 1
    ledger = PrivacyLedger(per_clip_epsilon=cfg.epsilon) if dp else None
    noise = NoiseSource(noise_seed) if dp else None

    lo = int(min(w.timestamps.min() for w in windows))
    hi = int(max(w.timestamps.max() for w in windows)) + 1
    span = hi - lo
    truth = np.full(span, np.nan)
    valid = np.zeros(span, dtype=bool)
    pred_first = np.zeros(span)
    reports = []
    for draw in range(draws):
        pred_cat, truth_cat = [], []
        for w in windows:
            p, ledger = predict_window(mdl, w, noise, ledger)
            pred_cat.append(p)
            truth_cat.append(w.truth)
            if draw == 0:
                idx = w.timestamps - lo
                pred_first[idx] = p
                truth[idx] = w.truth
                valid[idx] = True
        n_excluded = span - int(valid.sum())
        reports.append(compute_metrics(np.concatenate(pred_cat), np.concatenate(truth_cat),
                                       n_excluded=n_excluded))
    metrics = reports[0] if len(reports) == 1 else MetricsReport(
        mae=float(np.mean([r.mae for r in reports])),
        rmse=float(np.mean([r.rmse for r in reports])),
        rho=float(np.mean([r.rho for r in reports])),
        n_seconds=reports[0].n_seconds,
        n_excluded=reports[0].n_excluded,
    )
    truth = np.where(valid, truth, 0.0)
    return EvalResult(metrics, np.arange(lo, hi), truth, pred_first, valid, reports, ledger)


def build_dataset(scenario, cfg: PipelineConfig, encoder=None) -> list[DatasetExample]:
    """Embedded dataset: (EmbeddingSequence, truth, fold) per window.

    Rows are clipped to ``cfg.clip_bound``, ready for the model or the
    privacy mechanism.  A trainable encoder must carry bound parameters.
    """
    windows = build_windows(scenario, cfg)
    encoder = encoder or make_encoder(cfg)
    if getattr(encoder, "trainable", False) and getattr(encoder, "_params", None) is None:
        encoder.bind(encoder.init_params(cfg.seed + 1))
    out = []
    for w in windows:
        rows = clip_rows(_assemble_rows(encoder.encode_batch(w.specs), w, cfg), cfg.clip_bound)
        out.append(DatasetExample(
            EmbeddingSequence(rows, w.timestamps.astype(np.float64)), w.truth, w.fold,
        ))
    return out


def dp_sweep(train_windows: list[WindowExample], test_windows: list[WindowExample],
             cfg: PipelineConfig, eps_list: list[float],
             dp_draws: int = 3, noise_seed: int = 0) -> list[dict]:
    """Noise-aware training and evaluation across an epsilon grid.

    Returns one row per epsilon plus a leading noise-free reference row
    (epsilon = None).  Training seed is shared across the grid so the only
    difference between rows is the privacy level.
    """
    rows = []
    clean = train_pipeline(train_windows, cfg.replace(epsilon=None))
    res = evaluate_model(clean, test_windows)
    rows.append({"epsilon": None, "mae": res.metrics.mae, "rmse": res.metrics.rmse,
                 "rho": res.metrics.rho})
    for eps in eps_list:
        mdl = train_pipeline(train_windows, cfg.replace(epsilon=float(eps)))
        res = evaluate_model(mdl, test_windows, dp_draws=dp_draws, noise_seed=noise_seed)
        rows.append({"epsilon": float(eps), "mae": res.metrics.mae, "rmse": res.metrics.rmse,
                     "rho": res.metrics.rho, "spent_budget": res.ledger.total_spent})
    return rows


def save_model(path, mdl: TrainedModel) -> None:
    """Checkpoint: every parameter block plus the config needed to rebuild."""
    from .io import write_params

    spec = mdl.config.spectrogram
    meta = {
        "format": 1,
        "transformer": mdl.transformer.to_dict(),
        "d_in": mdl.d_in,
        "scheme": mdl.config.scheme,
        "encoder": mdl.config.encoder,
        "clip_bound": mdl.config.clip_bound,
        "epsilon": mdl.config.epsilon,
        "seed": mdl.config.seed,
        "epochs": mdl.config.epochs,
        "lr": mdl.config.lr,
        "folds": mdl.config.folds,
        "window": mdl.config.window,
        "spectrogram": dataclasses.asdict(spec),
        "loss_history": mdl.loss_history,
    }
    write_params(path, mdl.params, meta)


def load_model(path) -> TrainedModel:
    from .io import read_params

    params, meta = read_params(path)
    spec = SpectrogramConfig(**meta["spectrogram"])
    tconfig = tmodel.TransformerConfig.from_dict(meta["transformer"])
    cfg = PipelineConfig(
        spectrogram=spec, scheme=meta["scheme"], window=meta["window"],
        encoder=meta["encoder"], clip_bound=meta["clip_bound"], epsilon=meta["epsilon"],
        epochs=meta["epochs"], lr=meta["lr"], seed=meta["seed"], folds=meta["folds"],
        layers=tconfig.layers, heads=tconfig.heads, d_emb=tconfig.d_emb, d_head=tconfig.d_head,
    )
    encoder = make_encoder(cfg)
    if encoder.trainable:
        encoder.bind(params)
    return TrainedModel(params, tconfig, cfg, encoder, meta["d_in"], list(meta["loss_history"]))
