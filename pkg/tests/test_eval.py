"""Evaluation tests: truth construction, metrics, aggregation, the CV protocol."""

import numpy as np
import pytest

from occusense.errors import DataError
from occusense.evaluate import (
    MetricsReport,
    OccupancySeries,
    aggregate,
    aggregate_paired,
    baseline_mean,
    compute_metrics,
    cross_validate,
    occupancy_from_events,
    pearson,
)
from occusense.synth import EntryExitEvent


def replay_oracle(events, duration):
    """Independent accumulator: per-second brute-force sum over all events."""
    counts = []
    for s in range(duration):
        counts.append(sum(e.delta for e in events if e.timestamp <= s))
    return np.array(counts)


class TestOccupancyFromEvents:
    def test_worked_example(self):
        events = [
            EntryExitEvent(1.0, +1, "a"),
            EntryExitEvent(3.0, +1, "b"),
            EntryExitEvent(5.5, -1, "a"),
        ]
        series = occupancy_from_events(events, 8)
        np.testing.assert_array_equal(series.counts, [0, 1, 1, 2, 2, 2, 1, 1])

    def test_empty_events_all_zero(self):
        np.testing.assert_array_equal(occupancy_from_events([], 5).counts, np.zeros(5))

    def test_matches_independent_replay_on_random_lists(self):
        rng = np.random.default_rng(0)
        for _ in range(60):
            duration = int(rng.integers(5, 60))
            events = []
            active = []
            t = 0.0
            for k in range(int(rng.integers(0, 30))):
                t += rng.uniform(0, 3)
                if t >= duration:
                    break
                if active and rng.random() < 0.4:
                    pid = active.pop(rng.integers(len(active)))
                    events.append(EntryExitEvent(t, -1, pid))
                else:
                    pid = f"p{k}"
                    active.append(pid)
                    events.append(EntryExitEvent(t, +1, pid))
            got = occupancy_from_events(events, duration)
            np.testing.assert_array_equal(got.counts, replay_oracle(events, duration))

    def test_negative_running_count_rejected(self):
        with pytest.raises(DataError):
            occupancy_from_events([EntryExitEvent(1.0, -1, "ghost")], 5)

    def test_event_outside_duration_rejected(self):
        with pytest.raises(DataError):
            occupancy_from_events([EntryExitEvent(99.0, +1, "p")], 5)


class TestComputeMetrics:
    def test_arithmetic_example(self):
        r = compute_metrics(np.array([1.0, 2.0, 3.0]), np.array([2.0, 2.0, 5.0]))
        assert r.mae == pytest.approx(1.0)
        assert r.rmse == pytest.approx(np.sqrt(5.0 / 3.0))

    def test_constant_predictor_rho_zero(self):
        r = compute_metrics(np.full(10, 3.0), np.arange(10, dtype=float))
        assert r.rho == 0.0

    def test_perfect_prediction(self):
        truth = np.array([1.0, 4.0, 2.0, 5.0])
        r = compute_metrics(truth.copy(), truth)
        assert (r.mae, r.rmse, r.rho) == (0.0, 0.0, 1.0)
        constant = np.full(4, 2.0)
        assert compute_metrics(constant, constant.copy()).rho == 0.0

    def test_mae_never_exceeds_rmse(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            n = int(rng.integers(2, 50))
            r = compute_metrics(rng.standard_normal(n) * 3, rng.standard_normal(n) * 3)
            assert r.mae <= r.rmse + 1e-12

    def test_rho_symmetric(self):
        rng = np.random.default_rng(1)
        a, b = rng.standard_normal(40), rng.standard_normal(40)
        assert pearson(a, b) == pytest.approx(pearson(b, a), abs=1e-15)

    def test_length_mismatch_and_empty(self):
        with pytest.raises(DataError):
            compute_metrics(np.zeros(3), np.zeros(4))
        with pytest.raises(DataError):
            compute_metrics(np.array([]), np.array([]))

    def test_occupancy_series_accepted(self):
        r = compute_metrics(np.array([1.0, 2.0]), OccupancySeries(np.array([1, 2])))
        assert r.mae == 0.0


class TestAggregate:
    def test_constant_series(self):
        np.testing.assert_array_equal(aggregate(np.full(100, 2.5), 10), np.full(10, 2.5))

    def test_two_hour_series_hourly(self):
        s = np.arange(7200, dtype=float)
        out = aggregate(s, 3600)
        assert out.shape == (2,)
        np.testing.assert_allclose(out, [s[:3600].mean(), s[3600:].mean()])

    def test_trailing_partial_dropped(self):
        assert aggregate(np.ones(25), 10).shape == (2,)

    def test_commutes_with_scalar_addition(self):
        # exact in the operative domain: integer counts, power-of-two window
        # (every sum and the division are then exact in float64)
        rng = np.random.default_rng(2)
        s = rng.integers(0, 30, size=120).astype(np.float64)
        np.testing.assert_array_equal(aggregate(s + 5.0, 8), aggregate(s, 8) + 5.0)

    def test_window_longer_than_series_rejected(self):
        with pytest.raises(DataError):
            aggregate(np.ones(5), 10)

    def test_paired_aggregation_respects_validity(self):
        pred = np.array([1.0, 0.0, 3.0, 5.0])
        truth = np.array([1.0, 9.0, 3.0, 5.0])
        valid = np.array([True, False, True, True])
        p, t = aggregate_paired(pred, truth, valid, 2)
        np.testing.assert_allclose(p, [1.0, 4.0])
        np.testing.assert_allclose(t, [1.0, 4.0])


class TestBaseline:
    def test_predicts_training_mean_with_zero_rho(self):
        train = np.array([2, 2, 2, 6], dtype=np.int64)
        test = np.array([1, 3, 5], dtype=np.int64)
        r = baseline_mean(OccupancySeries(train), OccupancySeries(test))
        assert r.rho == 0.0
        assert r.mae == pytest.approx(np.abs(test - 3.0).mean())


class _StubWindow:
    def __init__(self, fold, truth):
        self.fold = fold
        self.truth = np.asarray(truth, dtype=float)


class _StubConfig:
    seed = 0


class TestCrossValidate:
    def _dataset(self, folds=4, per_fold=3):
        rng = np.random.default_rng(0)
        return [
            _StubWindow(f, rng.integers(0, 5, size=6))
            for f in range(folds)
            for _ in range(per_fold)
        ]

    def test_protocol_never_trains_on_test_fold(self):
        dataset = self._dataset()
        seen_per_fold = {}

        def audit_train(windows, cfg, seed):
            # record identities of every window the trainer was given
            seen_per_fold[seed] = {id(w) for w in windows}
            return ("model", seed)

        def fake_eval(mdl, windows):
            return MetricsReport(mae=0.0, rmse=0.0, rho=1.0, n_seconds=1)

        reports = cross_validate(dataset, _StubConfig(), train_fn=audit_train, eval_fn=fake_eval)
        assert len(reports) == 4
        for fold, report in enumerate(reports):
            trained_on = seen_per_fold[_StubConfig.seed + fold]
            test_ids = {id(w) for w in dataset if w.fold == fold}
            assert trained_on.isdisjoint(test_ids)
            assert len(trained_on) == len(dataset) - len(test_ids)

    def test_duplicated_fold_yields_matching_metrics(self):
        rng = np.random.default_rng(1)
        base = [_StubWindow(0, rng.integers(0, 5, size=6)) for _ in range(3)]
        twin = [_StubWindow(1, w.truth.copy()) for w in base]
        other = [_StubWindow(2, rng.integers(0, 5, size=6)) for _ in range(3)]

        def mean_train(windows, cfg, seed):
            return float(np.mean([w.truth.mean() for w in windows]))

        def mean_eval(mdl, windows):
            truth = np.concatenate([w.truth for w in windows])
            return compute_metrics(np.full(truth.size, mdl), truth)

        reports = cross_validate(base + twin + other, _StubConfig(),
                                 train_fn=mean_train, eval_fn=mean_eval)
        assert reports[0].model.mae == pytest.approx(reports[1].model.mae, abs=1e-12)

    def test_mean_baseline_rho_zero_every_fold(self):
        reports = cross_validate(
            self._dataset(), _StubConfig(),
            train_fn=lambda w, c, s: None,
            eval_fn=lambda m, w: MetricsReport(0.0, 0.0, 0.0),
        )
        for r in reports:
            assert r.baseline.rho == 0.0

    def test_single_fold_rejected(self):
        with pytest.raises(DataError):
            cross_validate([_StubWindow(0, [1, 2])], _StubConfig(),
                           train_fn=lambda *a: None, eval_fn=lambda *a: None)

    def test_missing_fold_rejected(self):
        dataset = [_StubWindow(0, [1]), _StubWindow(2, [1])]
        with pytest.raises(DataError):
            cross_validate(dataset, _StubConfig(), folds=3,
                           train_fn=lambda *a: None,
                           eval_fn=lambda m, w: MetricsReport(0.0, 0.0, 0.0))


def test_metrics_report_consistency_guard():
    with pytest.raises(DataError):
        MetricsReport(mae=2.0, rmse=1.0, rho=0.0)


def test_occupancy_series_rejects_negative():
    with pytest.raises(DataError):
        OccupancySeries(np.array([1, -1]))
