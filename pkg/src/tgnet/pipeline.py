"""End-to-end runs shared by the CLI and the experiment tests."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .evaluation import (
    DEFAULT_K, baseline_historical_average, baseline_persistence, fit_atypical_thresholds, metrics_report,
    select_atypical, slice_name,
)
from .grid import DemandTensor
from .model import TGNetConfig, TGNetModel
from .training import History, Splits, TrainConfig, make_examples, predict, train

logger = logging.getLogger(__name__)


@dataclass
class EvalOptions:
    k: float = DEFAULT_K
    quantiles: tuple[float, ...] = (0.99, 0.95)
    min_bucket: int = 20
    three_way: bool = False

    def __post_init__(self):
        self.quantiles = tuple(float(q) for q in self.quantiles)


@dataclass
class Run:
    model: TGNetModel
    splits: Splits
    history: History | None = None
    keys: np.ndarray = field(default=None, repr=False)


def fit(pickup: DemandTensor, dropoff: DemandTensor | None, keys: np.ndarray, model_config: TGNetConfig,
        train_config: TrainConfig, grid_shape: tuple[int, int]) -> Run:
    """Split, build a freshly seeded model and train it."""
    splits = make_examples(pickup, dropoff, keys, model_config, train_config)
    model = TGNetModel(model_config, grid_shape, seed=train_config.seed,
                       scale=splits.scale, dropoff_scale=splits.dropoff_scale)
    model, history = train(model, splits.train, splits.val, train_config)
    return Run(model, splits, history, keys)


def evaluate_run(model: TGNetModel, splits: Splits, pickup: np.ndarray, keys: np.ndarray,
                 options: EvalOptions | None = None) -> dict:
    """Test-split metrics for the model and both baselines, with atypical slices."""
    options = options or EvalOptions()
    test = splits.test
    train_values = np.asarray(pickup)[: splits.train_end]
    thresholds = fit_atypical_thresholds(train_values, keys[: splits.train_end], options.quantiles,
                                         options.min_bucket, options.three_way)
    masks = {slice_name(q): m for q, m in select_atypical(test.target, test.keys, thresholds).items()}
    predictions = {
        "model": predict(model, test),
        "persistence": baseline_persistence(test.demand),
        "historical_average": baseline_historical_average(train_values, keys[: splits.train_end], test.keys,
                                                          options.three_way),
    }
    reports = {name: metrics_report(p, test.target, options.k, masks).to_dict() for name, p in predictions.items()}
    return {
        "variant": model.config.variant,
        "param_count": model.param_count(),
        "k": options.k,
        "n_test_examples": len(test),
        "atypical_counts": {name: int(m.sum()) for name, m in masks.items()},
        "model": reports["model"],
        "baselines": {"persistence": reports["persistence"], "historical_average": reports["historical_average"]},
    }


def aggregate(reports: list[dict]) -> dict:
    """Mean and (population) standard deviation of model metrics across runs."""
    def stats(values):
        values = [v for v in values if v is not None]
        if not values:
            return None
        arr = np.asarray(values, dtype=np.float64)
        return {"mean": float(arr.mean()), "std": float(arr.std()), "n": len(values)}

    out = {"rmse": stats([r["model"]["rmse"] for r in reports]),
           "mape": stats([r["model"]["mape"] for r in reports]),
           "atypical": {}}
    for name in reports[0]["model"]["atypical"]:
        out["atypical"][name] = {
            "rmse": stats([r["model"]["atypical"][name]["rmse"] for r in reports]),
            "mape": stats([r["model"]["atypical"][name]["mape"] for r in reports]),
        }
    return out
