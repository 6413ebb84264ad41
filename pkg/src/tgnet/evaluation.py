"""Threshold-filtered RMSE/MAPE, atypical-sample slices and naive baselines."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import DataError
from .grid import decode_key, day_type

DEFAULT_K = 11.0


def _filtered(preds, truths, k: float):
    preds = np.asarray(preds, dtype=np.float64).ravel()
    truths = np.asarray(truths, dtype=np.float64).ravel()
    if preds.shape != truths.shape:
        raise DataError(f"{preds.size} predictions for {truths.size} ground-truth values")
    keep = truths >= k
    if not keep.any():
        raise DataError(f"no ground-truth values >= {k}; nothing to evaluate")
    return preds[keep], truths[keep]


def rmse(preds, truths, k: float = DEFAULT_K) -> float:
    """Root mean squared error over pairs whose truth is at least ``k``."""
    p, t = _filtered(preds, truths, k)
    return float(np.sqrt(np.mean((p - t) ** 2)))


def mape(preds, truths, k: float = DEFAULT_K) -> float:
    """Mean absolute percentage error (in percent) over pairs with truth >= ``k``.

    ``k`` must be positive for the ratio to be defined; truths of zero are
    rejected.
    """
    p, t = _filtered(preds, truths, k)
    if np.any(t == 0):
        raise DataError("MAPE is undefined for zero ground truth; use k > 0")
    return float(np.mean(np.abs(p - t) / t) * 100.0)


@dataclass
class SliceMetrics:
    rmse: float | None
    mape: float | None
    n_evaluated: int
    n_filtered_out: int


@dataclass
class MetricsReport:
    rmse: float
    mape: float
    n_evaluated: int
    n_filtered_out: int
    k: float
    atypical: dict[str, SliceMetrics] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def slice_metrics(preds, truths, k: float, mask=None) -> SliceMetrics:
    preds = np.asarray(preds, dtype=np.float64)
    truths = np.asarray(truths, dtype=np.float64)
    if mask is not None:
        preds, truths = preds[mask], truths[mask]
    kept = int(np.count_nonzero(truths >= k))
    if kept == 0:
        return SliceMetrics(None, None, 0, int(truths.size))
    mape_value = mape(preds, truths, k) if k > 0 else None
    return SliceMetrics(rmse(preds, truths, k), mape_value, kept, int(truths.size) - kept)


def metrics_report(preds, truths, k: float = DEFAULT_K, slices: dict[str, np.ndarray] | None = None) -> MetricsReport:
    overall = slice_metrics(preds, truths, k)
    if overall.n_evaluated == 0:
        raise DataError(f"no ground-truth values >= {k}; nothing to evaluate")
    report = MetricsReport(overall.rmse, overall.mape, overall.n_evaluated, overall.n_filtered_out, k)
    for name, mask in (slices or {}).items():
        report.atypical[name] = slice_metrics(preds, truths, k, mask)
    return report


# ---------------------------------------------------------------------------
# atypical samples


def nearest_rank(values: np.ndarray, q: float) -> float:
    """The ``ceil(q * n)``-th smallest value (1-based), no interpolation."""
    values = np.sort(np.asarray(values, dtype=np.float64).ravel())
    if values.size == 0:
        raise DataError("quantile of an empty sample")
    rank = max(1, math.ceil(q * values.size - 1e-9))
    return float(values[min(rank, values.size) - 1])


def context_ids(keys: np.ndarray, three_way: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """(time-of-day slot, day type) for each key row."""
    slots = np.array([decode_key(k)[0] for k in keys], dtype=np.int64)
    kinds = np.array([day_type(k, three_way) for k in keys], dtype=np.int64)
    return slots, kinds


@dataclass
class AtypicalThresholds:
    """Per (region, slot, day type) demand thresholds for each quantile."""

    quantiles: tuple[float, ...]
    table: dict[float, np.ndarray]  # q -> (N, n_slots, n_day_types)
    fallback: dict[float, np.ndarray]  # q -> (N,), used for thin buckets
    three_way: bool = False

    def lookup(self, q: float, keys: np.ndarray) -> np.ndarray:
        """Thresholds for every (key row, region), shape ``(M, N)``."""
        slots, kinds = context_ids(keys, self.three_way)
        return self.table[q][:, slots, kinds].T


def fit_atypical_thresholds(values: np.ndarray, keys: np.ndarray, quantiles=(0.99, 0.95),
                            min_bucket: int = 20, three_way: bool = False) -> AtypicalThresholds:
    """Nearest-rank thresholds from training intervals.

    ``values`` is ``(P, N)`` raw demand and ``keys`` the calendar key of each
    interval.  Buckets with fewer than ``min_bucket`` samples use the
    region's quantile over all contexts.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.shape[0] != len(keys):
        raise DataError(f"{len(keys)} keys for {values.shape[0]} intervals")
    n_slots = keys.shape[1] - 9
    n_types = 3 if three_way else 2
    slots, kinds = context_ids(keys, three_way)
    table, fallback = {}, {}
    for q in quantiles:
        fb = np.array([nearest_rank(values[:, i], q) for i in range(values.shape[1])])
        tab = np.repeat(fb[:, None, None], n_slots * n_types, axis=1).reshape(-1, n_slots, n_types)
        for s in range(n_slots):
            for d in range(n_types):
                rows = (slots == s) & (kinds == d)
                if rows.sum() >= min_bucket:
                    tab[:, s, d] = [nearest_rank(values[rows, i], q) for i in range(values.shape[1])]
        table[q], fallback[q] = tab, fb
    return AtypicalThresholds(tuple(quantiles), table, fallback, three_way)


def select_atypical(truths: np.ndarray, keys: np.ndarray, thresholds: AtypicalThresholds) -> dict[float, np.ndarray]:
    """Boolean masks of (example, region) pairs strictly above each threshold."""
    truths = np.asarray(truths, dtype=np.float64)
    return {q: truths > thresholds.lookup(q, keys) for q in thresholds.quantiles}


def slice_name(q: float) -> str:
    return f"top{round((1 - q) * 100):d}%"


# ---------------------------------------------------------------------------
# baselines


def baseline_persistence(demand_windows: np.ndarray) -> np.ndarray:
    """Predict the most recent observed interval."""
    return np.asarray(demand_windows, dtype=np.float64)[..., 0]


def baseline_historical_average(train_values: np.ndarray, train_keys: np.ndarray, target_keys: np.ndarray,
                                three_way: bool = False) -> np.ndarray:
    """Mean of training intervals sharing region, slot and day type.

    Contexts never seen in training fall back to the region's overall mean.
    """
    train_values = np.asarray(train_values, dtype=np.float64)
    slots, kinds = context_ids(train_keys, three_way)
    region_mean = train_values.mean(axis=0)
    cache = {}
    out = np.empty((len(target_keys), train_values.shape[1]))
    t_slots, t_kinds = context_ids(target_keys, three_way)
    for m, ctx in enumerate(zip(t_slots, t_kinds)):
        if ctx not in cache:
            rows = (slots == ctx[0]) & (kinds == ctx[1])
            cache[ctx] = train_values[rows].mean(axis=0) if rows.any() else region_mean
        out[m] = cache[ctx]
    return out
