import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tgnet.errors import DataError
from tgnet.evaluation import (
    baseline_historical_average, baseline_persistence, fit_atypical_thresholds, mape, metrics_report, nearest_rank,
    rmse, select_atypical, slice_name,
)
from tgnet.grid import GridSpec, parse_utc, temporal_keys
from tgnet.synthgen import Event, generate, preset


def loop_rmse(p, t, k):
    total, n = 0.0, 0
    for a, b in zip(p, t):
        if b >= k:
            total += (a - b) * (a - b)
            n += 1
    return math.sqrt(total / n)


def loop_mape(p, t, k):
    total, n = 0.0, 0
    for a, b in zip(p, t):
        if b >= k:
            total += abs(a - b) / b
            n += 1
    return 100.0 * total / n


def week_keys(days=7):
    start = parse_utc("2015-01-05T00:00:00Z")
    return temporal_keys(GridSpec(0, 1, 0, 1, 1, 1, start, start + days * 86400))


class TestMetrics:
    def test_worked_examples(self):
        assert mape([3.0], [1.0], k=1) == 200.0
        assert rmse([3.0], [1.0], k=1) == 2.0
        assert mape([500.0], [1000.0], k=1) == 50.0
        assert rmse([500.0], [1000.0], k=1) == 500.0

    def test_perfect(self):
        x = np.arange(11.0, 30.0)
        assert rmse(x, x) == 0.0 and mape(x, x) == 0.0

    def test_filter_then_average(self):
        preds = np.array([5.0, 20.0, 9.0, 30.0, 11.0])
        truths = np.array([10.0, 12.0, 3.0, 11.0, 40.0])
        kept = truths >= 11
        assert rmse(preds, truths) == rmse(preds[kept], truths[kept], k=0)
        assert mape(preds, truths) == pytest.approx(100 * np.mean([8 / 12, 19 / 11, 29 / 40]), rel=1e-15)

    def test_naive_loop_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            n = int(rng.integers(1, 40))
            t = rng.integers(0, 60, n).astype(float)
            t[0] = max(t[0], 11.0)
            p = t + rng.normal(0, 5, n)
            assert abs(rmse(p, t) - loop_rmse(p, t, 11)) <= 1e-12 * max(1.0, loop_rmse(p, t, 11))
            assert abs(mape(p, t) - loop_mape(p, t, 11)) <= 1e-12 * max(1.0, loop_mape(p, t, 11))

    def test_empty_evaluation(self):
        with pytest.raises(DataError):
            rmse([1.0, 2.0], [3.0, 4.0])

    def test_zero_truth_mape(self):
        with pytest.raises(DataError):
            mape([1.0], [0.0], k=0)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.tuples(st.floats(0, 1e4), st.floats(0, 1e4)), min_size=1, max_size=30))
    def test_rmse_symmetric(self, pairs):
        a, b = np.array(pairs).T
        assert rmse(a, b, 0) == pytest.approx(rmse(b, a, 0), rel=1e-12, abs=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.integers(0, 50), min_size=1, max_size=40), st.integers(0, 50), st.integers(0, 50))
    def test_filter_monotone(self, truths, k1, k2):
        truths = np.array(truths, dtype=float)
        lo, hi = sorted((k1, k2))
        assert np.count_nonzero(truths >= hi) <= np.count_nonzero(truths >= lo)

    def test_report_counts(self):
        truths = np.array([[0.0, 12.0], [20.0, 3.0]])
        report = metrics_report(truths + 1, truths, k=11, slices={"top1%": truths > 15})
        assert report.n_evaluated + report.n_filtered_out == 4 and report.n_evaluated == 2
        assert report.atypical["top1%"].n_evaluated == 1 and report.atypical["top1%"].rmse == 1.0


class TestAtypical:
    def test_nearest_rank(self):
        assert nearest_rank(np.arange(1, 101), 0.95) == 95
        assert nearest_rank(np.arange(1, 101), 0.99) == 99
        assert nearest_rank([7.0], 0.5) == 7.0
        assert nearest_rank(np.arange(1, 11), 0.95) == 10

    def test_constant_series(self):
        keys = week_keys()
        values = np.full((len(keys), 3), 4.0)
        th = fit_atypical_thresholds(values, keys)
        assert (th.table[0.99] == 4.0).all()
        assert not any(m.any() for m in select_atypical(values, keys, th).values())

    def test_buckets_and_fallback(self):
        keys = week_keys(28)  # 20 workdays and 8 weekend days per slot
        rng = np.random.default_rng(1)
        values = rng.integers(0, 100, size=(len(keys), 2)).astype(float)
        th = fit_atypical_thresholds(values, keys, quantiles=(0.95,), min_bucket=20)
        workday_slot3 = [i for i, k in enumerate(keys) if k[3] == 1 and k[48:53].any()]
        assert len(workday_slot3) == 20
        assert th.table[0.95][0, 3, 0] == nearest_rank(values[workday_slot3, 0], 0.95)
        # weekend buckets hold 8 samples and fall back to the region quantile
        assert th.table[0.95][1, 3, 1] == nearest_rank(values[:, 1], 0.95)

    def test_nesting(self):
        keys = week_keys(28)
        values = np.random.default_rng(2).gamma(2.0, 10.0, size=(len(keys), 4))
        th = fit_atypical_thresholds(values, keys, min_bucket=5)
        assert (th.table[0.99] >= th.table[0.95]).all()
        test = np.random.default_rng(3).gamma(2.0, 12.0, size=(len(keys), 4))
        masks = select_atypical(test, keys, th)
        assert not (masks[0.99] & ~masks[0.95]).any()
        assert slice_name(0.99) == "top1%" and slice_name(0.95) == "top5%"

    def test_spikes_selected_against_labels(self):
        events = [Event(cell=c, start=400 + 37 * c, duration=2, magnitude=80.0) for c in range(4)]
        data = generate(preset("deterministic", rows=2, cols=2, n_days=14, events=events))
        values, keys = data.pickup.values, data.keys
        train_end = 336
        th = fit_atypical_thresholds(values[:train_end], keys[:train_end], quantiles=(0.99,), min_bucket=1)
        mask = select_atypical(values[train_end:], keys[train_end:], th)[0.99]
        np.testing.assert_array_equal(mask, data.event_mask[train_end:])


class TestBaselines:
    def test_persistence_constant(self):
        windows = np.full((5, 3, 8), 6.0)
        np.testing.assert_array_equal(baseline_persistence(windows), np.full((5, 3), 6.0))

    def test_persistence_takes_latest(self):
        windows = np.arange(24.0).reshape(1, 3, 8)
        np.testing.assert_array_equal(baseline_persistence(windows), [[0.0, 8.0, 16.0]])

    def test_historical_average_periodic(self):
        data = generate(preset("deterministic"))
        values, keys = data.pickup.values, data.keys
        pred = baseline_historical_average(values[:336], keys[:336], keys[336:])
        np.testing.assert_array_equal(pred, values[336:])

    def test_historical_average_unseen_context(self):
        keys = week_keys(1)  # Monday only
        values = np.arange(48.0)[:, None]
        weekend_key = week_keys(7)[-1:]
        assert baseline_historical_average(values, keys, weekend_key)[0, 0] == values.mean()
