"""Ground-truth construction, metrics, timescale aggregation and
cross-validation protocol.

The per-second occupancy series starts at zero and accumulates entry/exit
deltas; metrics are MAE, RMSE and Pearson correlation (defined as 0 when
either series has zero variance, matching how a constant baseline is
reported).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import DataError


@dataclass(frozen=True)
class OccupancySeries:
    """Per-second nonnegative integer head-count starting at ``start_time``."""

    counts: np.ndarray
    start_time: int = 0

    def __post_init__(self):
        c = np.asarray(self.counts, dtype=np.int64)
        if c.ndim != 1:
            raise DataError(f"counts must be 1-D, got shape {c.shape}")
        if (c < 0).any():
            raise DataError("occupancy counts cannot be negative")
        object.__setattr__(self, "counts", c)

    def __len__(self) -> int:
        return self.counts.size


@dataclass(frozen=True)
class MetricsReport:
    mae: float
    rmse: float
    rho: float
    n_seconds: int = 0
    n_excluded: int = 0

    def __post_init__(self):
        if self.mae > self.rmse + 1e-9:
            raise DataError(f"MAE {self.mae} exceeds RMSE {self.rmse}; metrics are inconsistent")

    def to_dict(self) -> dict:
        return asdict(self)


def occupancy_from_events(events, duration: int) -> OccupancySeries:
    """Running entry/exit sum starting at 0, sampled at each integer second.

    ``events`` is any sequence with ``timestamp``/``delta`` attributes (or
    (timestamp, delta) pairs).  Raises if any running prefix goes negative —
    an exit without a matching entry.
    """
    if duration <= 0:
        raise DataError(f"duration must be positive, got {duration}")
    ts, deltas = [], []
    for e in events:
        if hasattr(e, "timestamp"):
            t, d = e.timestamp, e.delta
        else:
            t, d = e[0], e[1]
        if t < 0 or t > duration:
            raise DataError(f"event at t={t} outside [0, {duration}]")
        ts.append(float(t))
        deltas.append(int(d))
    if not ts:
        return OccupancySeries(np.zeros(duration, dtype=np.int64))
    order = np.argsort(np.asarray(ts), kind="stable")
    ts_sorted = np.asarray(ts)[order]
    running = np.cumsum(np.asarray(deltas)[order])
    if (running < 0).any():
        first = int(np.flatnonzero(running < 0)[0])
        raise DataError(f"negative running count after event at t={ts_sorted[first]}")
    seconds = np.arange(duration, dtype=np.float64)
    idx = np.searchsorted(ts_sorted, seconds, side="right")
    counts = np.where(idx > 0, running[np.maximum(idx - 1, 0)], 0)
    return OccupancySeries(counts.astype(np.int64))


def pearson(a: np.ndarray, b: np.ndarray) -> float:
    """Pearson correlation, defined as 0 when either input has zero variance."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    # max == min catches exactly-constant series before the mean subtraction
    # can manufacture +-1 ulp of spurious variance
    if a.max() == a.min() or b.max() == b.min():
        return 0.0
    da, db = a - a.mean(), b - b.mean()
    var_a, var_b = np.dot(da, da), np.dot(db, db)
    if var_a <= 0 or var_b <= 0:
        return 0.0
    return float(np.dot(da, db) / np.sqrt(var_a * var_b))


def compute_metrics(pred: np.ndarray, truth: np.ndarray | OccupancySeries,
                    n_excluded: int = 0) -> MetricsReport:
    """MAE, RMSE and Pearson rho between aligned prediction and truth series."""
    t = truth.counts if isinstance(truth, OccupancySeries) else np.asarray(truth, dtype=np.float64)
    p = np.asarray(pred, dtype=np.float64)
    if p.shape != t.shape:
        raise DataError(f"length mismatch: pred {p.shape} vs truth {t.shape}")
    if p.size == 0:
        raise DataError("cannot compute metrics on empty series")
    err = p - np.asarray(t, dtype=np.float64)
    return MetricsReport(
        mae=float(np.mean(np.abs(err))),
        rmse=float(np.sqrt(np.mean(err ** 2))),
        rho=pearson(p, t),
        n_seconds=int(p.size),
        n_excluded=int(n_excluded),
    )


def aggregate(series: np.ndarray, window_seconds: int) -> np.ndarray:
    """Non-overlapping window means; the trailing partial window is dropped."""
    s = np.asarray(series, dtype=np.float64)
    if window_seconds < 1:
        raise DataError(f"aggregation window must be >= 1 s, got {window_seconds}")
    n = s.size // window_seconds
    if n == 0:
        raise DataError(f"window of {window_seconds} s is longer than the {s.size}-s series")
    return s[: n * window_seconds].reshape(n, window_seconds).mean(axis=1)


def aggregate_paired(pred: np.ndarray, truth: np.ndarray, valid: np.ndarray,
                     window_seconds: int) -> tuple[np.ndarray, np.ndarray]:
    """Window means of predictions and truth over the same wall-clock windows.

    ``valid`` marks the seconds that actually carry a prediction (scheme 1
    leaves gaps); both series average over those seconds only, and windows
    containing none are dropped.
    """
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    valid = np.asarray(valid, dtype=bool)
    if not (pred.size == truth.size == valid.size):
        raise DataError("pred/truth/valid lengths differ")
    n = pred.size // window_seconds
    if n == 0:
        raise DataError(f"window of {window_seconds} s is longer than the {pred.size}-s series")
    p_out, t_out = [], []
    for w in range(n):
        sel = valid[w * window_seconds:(w + 1) * window_seconds]
        if not sel.any():
            continue
        p_out.append(pred[w * window_seconds:(w + 1) * window_seconds][sel].mean())
        t_out.append(truth[w * window_seconds:(w + 1) * window_seconds][sel].mean())
    return np.asarray(p_out), np.asarray(t_out)


def baseline_mean(train_truth: np.ndarray | OccupancySeries,
                  test_truth: np.ndarray | OccupancySeries) -> MetricsReport:
    """Constant predictor: the training-set mean occupancy at every test second."""
    tr = train_truth.counts if isinstance(train_truth, OccupancySeries) else np.asarray(train_truth)
    te = test_truth.counts if isinstance(test_truth, OccupancySeries) else np.asarray(test_truth)
    if tr.size == 0 or te.size == 0:
        raise DataError("baseline needs non-empty train and test truth")
    pred = np.full(te.size, float(np.mean(tr)))
    return compute_metrics(pred, np.asarray(te, dtype=np.float64))


@dataclass(frozen=True)
class FoldReport:
    fold: int
    model: MetricsReport
    baseline: MetricsReport
    n_train_windows: int
    n_test_windows: int


def cross_validate(dataset: Sequence, config, folds: int | None = None,
                   train_fn: Callable | None = None, eval_fn: Callable | None = None,
                   workers: int = 1) -> list[FoldReport]:
    """Leave-one-fold-out protocol over a window dataset with fold tags.

    For each fold, trains on every other fold's windows and evaluates on the
    held-out fold.  ``train_fn(windows, config, seed)`` and
    ``eval_fn(model, windows)`` default to the pipeline trainer; tests can
    inject audited wrappers.  Fold seeds derive from ``config.seed`` so runs
    are deterministic yet folds are independently seeded.
    """
    from . import pipeline  # deferred: pipeline imports this module's types

    fold_ids = sorted({w.fold for w in dataset})
    if folds is not None:
        expected = list(range(folds))
        missing = [f for f in expected if f not in fold_ids]
        if missing:
            raise DataError(f"folds {missing} contain no windows")
        fold_ids = expected
    if len(fold_ids) < 2:
        raise DataError(f"need at least 2 folds, got {len(fold_ids)}")
    train_fn = train_fn or (lambda windows, cfg, seed: pipeline.train_pipeline(windows, cfg, seed=seed))
    eval_fn = eval_fn or (lambda mdl, windows: pipeline.evaluate_model(mdl, windows).metrics)

    def run_fold(fold: int) -> FoldReport:
        train_windows = [w for w in dataset if w.fold != fold]
        test_windows = [w for w in dataset if w.fold == fold]
        if not test_windows:
            raise DataError(f"fold {fold} contains no windows")
        if not train_windows:
            raise DataError(f"fold {fold} would leave an empty training set")
        mdl = train_fn(train_windows, config, config.seed + fold)
        report = eval_fn(mdl, test_windows)
        train_truth = np.concatenate([w.truth for w in train_windows])
        test_truth = np.concatenate([w.truth for w in test_windows])
        return FoldReport(
            fold=fold,
            model=report,
            baseline=baseline_mean(train_truth, test_truth),
            n_train_windows=len(train_windows),
            n_test_windows=len(test_windows),
        )

    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(run_fold, fold_ids))
    return [run_fold(f) for f in fold_ids]


def write_report_json(path: str | Path, rows: list[dict]) -> None:
    Path(path).write_text(json.dumps(rows, indent=2, sort_keys=True) + "\n")


def format_report_table(rows: list[dict]) -> str:
    """Plain-text table in the (model, modality, MAE, RMSE, rho) layout."""
    header = f"{'model':<24} {'modality':<34} {'MAE':>7} {'RMSE':>7} {'rho':>7}"
    lines = [header, "-" * len(header)]
    for r in rows:
        lines.append(
            f"{r['model']:<24} {r['modality']:<34} "
            f"{r['mae']:>7.3f} {r['rmse']:>7.3f} {r['rho']:>7.3f}"
        )
    return "\n".join(lines) + "\n"


def write_predictions_csv(path: str | Path, seconds: np.ndarray, truth: np.ndarray,
                          pred: np.ndarray) -> None:
    """Plot-ready (time, truth, prediction) CSV."""
    with open(path, "w") as fh:
        fh.write("time,truth,prediction\n")
        for s, t, p in zip(seconds, truth, pred):
            fh.write(f"{int(s)},{t:.6f},{p:.6f}\n")
