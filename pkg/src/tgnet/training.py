"""Sliding-window examples, chronological splits and the training loop."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, DataError, NumericalError
from .grid import DemandTensor, ScalePolicy, fit_scale
from .model import Batch, TGNetConfig, TGNetModel

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr0: float = 0.01
    decay: float = 0.01
    batch_size: int = 128
    max_epochs: int = 200
    patience: int | None = 10
    l2_phase: float = 0.25
    split: tuple[float, float, float] = (0.64, 0.16, 0.20)
    seed: int = 0

    def __post_init__(self):
        self.split = tuple(float(f) for f in self.split)
        if len(self.split) != 3 or min(self.split) < 0 or abs(sum(self.split) - 1.0) > 1e-9:
            raise ConfigError(f"split fractions must be three non-negative numbers summing to 1, got {self.split}")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 for batch normalisation")
        if self.max_epochs < 1:
            raise ConfigError("max_epochs must be >= 1")
        if not 0.0 <= self.l2_phase <= 1.0:
            raise ConfigError("l2_phase must be a fraction")
        if self.patience is not None and self.patience < 0:
            raise ConfigError("patience must be >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["split"] = list(d["split"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(f"bad training config: {exc}") from None


@dataclass
class ExampleSet:
    """Raw (unscaled) windows; example ``m`` forecasts interval ``t[m] + 1``."""

    t: np.ndarray
    demand: np.ndarray
    dropoff: np.ndarray
    keys: np.ndarray
    target: np.ndarray

    def __len__(self) -> int:
        return len(self.t)

    def subset(self, idx) -> "ExampleSet":
        return ExampleSet(self.t[idx], self.demand[idx], self.dropoff[idx], self.keys[idx], self.target[idx])

    def batch(self, idx, scale: ScalePolicy, dropoff_scale: ScalePolicy) -> Batch:
        return Batch(scale.apply(self.demand[idx]), self.keys[idx], dropoff_scale.apply(self.dropoff[idx]))


@dataclass
class Splits:
    train: ExampleSet
    val: ExampleSet
    test: ExampleSet
    scale: ScalePolicy
    dropoff_scale: ScalePolicy
    train_end: int  # intervals [0, train_end) back the training split

    def __iter__(self):
        return iter((self.train, self.val, self.test))


def split_counts(n: int, fractions=(0.64, 0.16, 0.20)) -> tuple[int, int, int]:
    """Chronological split sizes.

    The test block is whatever remains after ``floor`` of the train+val
    share; the validation block is the rounded val share of the train+val
    block and training keeps the rest.
    """
    f_train, f_val, _ = fractions
    trainval = math.floor((f_train + f_val) * n + 1e-9)
    val = 0 if trainval == 0 else math.floor(f_val / (f_train + f_val) * trainval + 0.5)
    return trainval - val, val, n - trainval


def window_span(model_config: TGNetConfig) -> int:
    return max(model_config.T_demand, model_config.T_dropoff if model_config.use_dropoff else 1)


def build_examples(demand: np.ndarray, dropoff: np.ndarray, keys: np.ndarray,
                   T_demand: int, T_dropoff: int) -> ExampleSet:
    """One example per target ``t + 1`` with ``t >= max(T_demand, T_dropoff) - 1``."""
    P, N = demand.shape
    first = max(T_demand, T_dropoff) - 1
    ts = np.arange(first, P - 1)
    # sliding windows, most recent interval first
    dwin = np.stack([demand[ts - k] for k in range(T_demand)], axis=-1) if len(ts) else np.zeros((0, N, T_demand))
    pwin = np.stack([dropoff[ts - k] for k in range(T_dropoff)], axis=-1) if len(ts) else np.zeros((0, N, T_dropoff))
    return ExampleSet(
        t=ts,
        demand=dwin.astype(np.float64),
        dropoff=pwin.astype(np.float64),
        keys=keys[ts + 1] if len(ts) else np.zeros((0, keys.shape[1])),
        target=demand[ts + 1].astype(np.float64) if len(ts) else np.zeros((0, N)),
    )


def make_examples(demand: DemandTensor, dropoff: DemandTensor | None, keys: np.ndarray,
                  model_config: TGNetConfig, train_config: TrainConfig | None = None) -> Splits:
    """Windowed examples split chronologically into train/val/test.

    Scaling is fitted on the intervals that feed the training split only.
    Without a drop-off tensor, zero drop-off windows are used.
    """
    train_config = train_config or TrainConfig()
    d = demand.values if isinstance(demand, DemandTensor) else np.asarray(demand)
    if dropoff is None:
        p = np.zeros_like(d)
    else:
        p = dropoff.values if isinstance(dropoff, DemandTensor) else np.asarray(dropoff)
    if d.shape != p.shape:
        raise DataError(f"pickup {d.shape} and drop-off {p.shape} tensors differ in shape")
    if keys.shape[0] != d.shape[0]:
        raise DataError(f"{keys.shape[0]} temporal keys for {d.shape[0]} intervals")
    examples = build_examples(d, p, keys, model_config.T_demand, model_config.T_dropoff)
    if len(examples) == 0:
        raise DataError(f"period of {d.shape[0]} intervals is too short for any example")
    n_train, n_val, _ = split_counts(len(examples), train_config.split)
    if n_train == 0:
        raise DataError("no training examples after splitting")
    idx = np.arange(len(examples))
    train = examples.subset(idx[:n_train])
    train_end = int(train.t[-1]) + 2
    return Splits(
        train=train,
        val=examples.subset(idx[n_train : n_train + n_val]),
        test=examples.subset(idx[n_train + n_val :]),
        scale=fit_scale(d[:train_end]),
        dropoff_scale=fit_scale(p[:train_end]),
        train_end=train_end,
    )


# ---------------------------------------------------------------------------
# training loop


@dataclass
class EpochRecord:
    epoch: int
    phase: str
    train_loss: float
    val_loss: float | None
    lr: float


@dataclass
class History:
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int | None = None
    stopped_early: bool = False

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "phase", "train_loss", "val_loss", "lr"])
            for r in self.records:
                writer.writerow([r.epoch, r.phase, repr(r.train_loss),
                                 "" if r.val_loss is None else repr(r.val_loss), repr(r.lr)])


def _iter_batches(n: int, batch_size: int, order: np.ndarray):
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def evaluate_loss(model: TGNetModel, examples: ExampleSet, loss: str, batch_size: int = 256) -> float:
    """Mean per-element loss in scaled units, eval mode."""
    fn = ad.LOSSES[loss]
    total = 0.0
    for idx in _iter_batches(len(examples), batch_size, np.arange(len(examples))):
        out = model.forward_scaled(examples.batch(idx, model.scale, model.dropoff_scale), training=False)
        total += float(fn(out, model.scale.apply(examples.target[idx])).data) * len(idx)
    return total / len(examples)


def predict(model: TGNetModel, examples: ExampleSet, batch_size: int = 256) -> np.ndarray:
    """Raw-unit eval-mode predictions, shape ``(M, N)``."""
    out = [model.predict(examples.batch(idx, model.scale, model.dropoff_scale))
           for idx in _iter_batches(len(examples), batch_size, np.arange(len(examples)))]
    return np.concatenate(out) if out else np.zeros((0, model.n_nodes))


def train(model: TGNetModel, train_set: ExampleSet, val_set: ExampleSet | None,
          config: TrainConfig) -> tuple[TGNetModel, History]:
    """Fit ``model`` in place with the MSE-then-MAE schedule.

    Early stopping watches the validation loss of the current phase; the
    comparison baseline resets when the loss switches.  The parameters of
    the best validation epoch of the final phase are restored.
    """
    if len(train_set) == 0:
        raise DataError("empty training set")
    seeds = np.random.SeedSequence(config.seed).spawn(2)
    order_rng = np.random.default_rng(seeds[0])
    dropout_rng = np.random.default_rng(seeds[1])
    n_l2 = math.ceil(config.l2_phase * config.max_epochs)
    use_val = val_set is not None and len(val_set) > 0

    history = History()
    phase = None
    best, best_snap, wait = math.inf, None, 0
    lr = ad.learning_rate(config.lr0, config.decay, model.store.step)
    for epoch in range(1, config.max_epochs + 1):
        loss_name = "mse" if epoch <= n_l2 else "mae"
        if loss_name != phase:
            phase, best, best_snap, wait = loss_name, math.inf, None, 0
        loss_fn = ad.LOSSES[loss_name]

        order = order_rng.permutation(len(train_set))
        total = 0.0
        for idx in _iter_batches(len(train_set), config.batch_size, order):
            if len(idx) * model.n_nodes < 2:
                continue
            model.store.zero_grad()
            out = model.forward_scaled(train_set.batch(idx, model.scale, model.dropoff_scale),
                                       training=True, rng=dropout_rng)
            loss = loss_fn(out, model.scale.apply(train_set.target[idx]))
            value = float(loss.data)
            if not math.isfinite(value):
                raise NumericalError(f"non-finite training loss at epoch {epoch}")
            loss.backward()
            lr = ad.adam_step(model.store, lr0=config.lr0, decay=config.decay)
            total += value * len(idx)
        train_loss = total / len(train_set)

        monitor = evaluate_loss(model, val_set, loss_name) if use_val else train_loss
        history.records.append(EpochRecord(epoch, loss_name, train_loss, monitor if use_val else None, lr))
        logger.debug("epoch %d %s train %.6g val %s", epoch, loss_name, train_loss, monitor)

        if monitor < best:
            best, best_snap, wait = monitor, model.store.snapshot(), 0
            history.best_epoch = epoch
        else:
            wait += 1
            if config.patience is not None and wait > config.patience:
                history.stopped_early = True
                logger.info("early stop at epoch %d (best %d)", epoch, history.best_epoch)
                break

    if best_snap is not None:
        model.store.restore(best_snap)
    return model, history


def save_checkpoint(model: TGNetModel, path: str | Path, extra: dict | None = None) -> None:
    model.save(path, extra)


def load_checkpoint(path: str | Path) -> TGNetModel:
    return TGNetModel.load(path)[0]
