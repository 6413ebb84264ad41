"""TGNet: graph-network layers conditioned on a temporal-guided embedding."""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor
from .errors import ConfigError, DataError
from .grid import GridSpec, HolidayCalendar, RegionGraph, ScalePolicy, build_graph, key_dim

WEEKDAYS = ("mon", "tue", "wed", "thu", "fri", "sat", "sun")


@dataclass
class TGNetConfig:
    T_demand: int = 8
    T_dropoff: int = 16
    n_gn_layers: int = 6
    width: int = 32
    # per-layer width multipliers of ``width``; None derives (1, 4, ..., 4, 1)
    width_ratios: tuple[int, ...] | None = None
    tge_dim: int = 16
    dropoff_branch_layers: int = 2
    dropoff_width: int = 64
    head_width: int = 64
    dropout_p: float = 0.1
    use_tge: bool = True
    use_dropoff: bool = True
    use_pooling: bool = True
    aggregator: str = "mean"
    bn_momentum: float = 0.99
    interval_len: int = 1800

    def __post_init__(self):
        if self.width_ratios is not None:
            self.width_ratios = tuple(int(r) for r in self.width_ratios)
        if self.T_demand < 1 or self.T_dropoff < 1:
            raise ConfigError("window lengths must be >= 1")
        if self.n_gn_layers < 1:
            raise ConfigError("need at least one GN layer")
        if self.use_pooling and self.n_gn_layers < 2:
            raise ConfigError("pooling needs at least two GN layers")
        if min(self.widths) < 1 or self.dropoff_width < 1 or self.head_width < 1 or self.tge_dim < 0:
            raise ConfigError("layer widths must be positive")
        if self.use_dropoff and self.dropoff_branch_layers < 1:
            raise ConfigError("drop-off branch needs at least one layer")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError("dropout_p must be in [0, 1)")
        if self.aggregator not in ("mean", "conv3x3"):
            raise ConfigError(f"unknown aggregator {self.aggregator!r}")

    @property
    def widths(self) -> tuple[int, ...]:
        ratios = self.width_ratios
        if ratios is None:
            K = self.n_gn_layers
            ratios = (1,) if K == 1 else (1,) + (4,) * (K - 2) + (1,)
        if len(ratios) != self.n_gn_layers:
            raise ConfigError(f"{len(ratios)} width ratios for {self.n_gn_layers} layers")
        return tuple(self.width * r for r in ratios)

    @property
    def key_dim(self) -> int:
        return key_dim(self.interval_len)

    @property
    def variant(self) -> str:
        if self.use_tge and self.use_dropoff:
            return "TGNet"
        return "GN+TGE" if self.use_tge else ("GN+dropoff" if self.use_dropoff else "GN")

    def to_dict(self) -> dict:
        d = asdict(self)
        if d["width_ratios"] is not None:
            d["width_ratios"] = list(d["width_ratios"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TGNetConfig":
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(f"bad model config: {exc}") from None


@dataclass
class Batch:
    """Model inputs for B examples; arrays are already scaled."""

    demand: np.ndarray  # (B, N, T_demand), most recent first
    keys: np.ndarray  # (B, key_dim), calendar key of the target interval
    dropoff: np.ndarray | None = None  # (B, N, T_dropoff)


def _conv_shift(data: np.ndarray, shape: tuple[int, int], di: int, dj: int) -> np.ndarray:
    """``out[r, c] = data[r + di, c + dj]`` with zeros outside the grid."""
    rows, cols = shape
    grid = data.reshape(data.shape[:-2] + (rows, cols, data.shape[-1]))
    out = np.zeros_like(grid)
    rs, re = max(0, -di), min(rows, rows - di)
    cs, ce = max(0, -dj), min(cols, cols - dj)
    if rs < re and cs < ce:
        out[..., rs:re, cs:ce, :] = grid[..., rs + di : re + di, cs + dj : ce + dj, :]
    return out.reshape(data.shape)


def conv3x3_aggregate(x: Tensor, kernel: Tensor, shape: tuple[int, int]) -> Tensor:
    """Same-padded 3x3 convolution over the node grid.

    ``kernel`` has shape ``(3, 3, F_out, F_in)``; tap ``(a, b)`` reads the
    cell at offset ``(a - 1, b - 1)``.
    """
    rows, cols = shape
    if x.data.shape[-2] != rows * cols:
        raise DataError(f"{x.data.shape[-2]} nodes do not form a {rows}x{cols} grid")
    if kernel.data.shape[:2] != (3, 3) or kernel.data.shape[3] != x.data.shape[-1]:
        raise DataError(f"conv kernel shape {kernel.data.shape} vs input width {x.data.shape[-1]}")
    F_out = kernel.data.shape[2]
    out = np.zeros(x.data.shape[:-1] + (F_out,))
    shifted = {}
    for a in range(3):
        for b in range(3):
            s = _conv_shift(x.data, shape, a - 1, b - 1)
            shifted[a, b] = s
            out += s @ kernel.data[a, b].T

    def backward(g):
        if kernel.requires_grad:
            gk = np.zeros_like(kernel.data)
            g2 = g.reshape(-1, F_out)
            for (a, b), s in shifted.items():
                gk[a, b] = g2.T @ s.reshape(-1, s.shape[-1])
            kernel._accumulate(gk)
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            for a in range(3):
                for b in range(3):
                    gx += _conv_shift(g @ kernel.data[a, b], shape, 1 - a, 1 - b)
            x._accumulate(gx)

    return ad._result(out, (x, kernel), "conv3x3", backward)


class TGNetModel:
    """Parameters, graphs and forward pass of one TGNet variant."""

    def __init__(self, config: TGNetConfig, grid_shape: tuple[int, int], seed: int = 0,
                 scale: ScalePolicy | None = None, dropoff_scale: ScalePolicy | None = None):
        self.config = config
        self.grid_shape = tuple(grid_shape)
        self.scale = scale or ScalePolicy()
        self.dropoff_scale = dropoff_scale or ScalePolicy()
        self.graph = build_graph(self.grid_shape)
        self.coarse_shape = ((self.grid_shape[0] + 1) // 2, (self.grid_shape[1] + 1) // 2)
        self.coarse_graph = build_graph(self.coarse_shape)
        self.store = ParamStore()
        self._build(np.random.default_rng(seed))

    @property
    def n_nodes(self) -> int:
        return self.grid_shape[0] * self.grid_shape[1]

    # -- parameters

    def _gn_params(self, rng, name: str, f_in: int, f_out: int):
        """Neighbour and self maps are bias-free; the combining map carries a bias."""
        s = self.store
        if self.config.aggregator == "conv3x3":
            s.add(f"{name}.W_nb", ad.glorot_uniform(rng, (3, 3, f_out, f_in), 9 * f_in, 9 * f_out))
        else:
            s.add(f"{name}.W_nb", ad.glorot_uniform(rng, (f_out, f_in), f_in, f_out))
        s.add(f"{name}.W_self", ad.glorot_uniform(rng, (f_out, f_in), f_in, f_out))
        s.add(f"{name}.W", ad.glorot_uniform(rng, (f_out, f_in + f_out), f_in + f_out, f_out))
        s.add(f"{name}.b", np.zeros(f_out))
        s.add(f"{name}.gamma", np.ones(f_out))
        s.add(f"{name}.beta", np.zeros(f_out))
        s.add_bn(name, f_out)

    def _build(self, rng):
        cfg = self.config
        widths = cfg.widths
        f_in = cfg.T_demand + (cfg.tge_dim if cfg.use_tge else 0)
        if cfg.use_tge:
            self.store.add("tge.W", ad.glorot_uniform(rng, (cfg.tge_dim, cfg.key_dim), cfg.key_dim, cfg.tge_dim))
            self.store.add("tge.b", np.zeros(cfg.tge_dim))
        for k, w in enumerate(widths):
            if cfg.use_pooling and k == len(widths) - 1:
                f_in = widths[-2] + widths[0]  # unpooled features + skip from GN1
            self._gn_params(rng, f"gn{k + 1}", f_in, w)
            f_in = w
        head_in = widths[-1]
        if cfg.use_dropoff:
            f = cfg.T_dropoff
            for k in range(cfg.dropoff_branch_layers):
                self._gn_params(rng, f"drop{k + 1}", f, cfg.dropoff_width)
                f = cfg.dropoff_width
            head_in += cfg.dropoff_width
        self.store.add("head.W", ad.glorot_uniform(rng, (cfg.head_width, head_in), head_in, cfg.head_width))
        self.store.add("head.b", np.zeros(cfg.head_width))
        # non-negative so the output ReLU starts active on the non-negative head features
        self.store.add("out.w", np.abs(ad.glorot_uniform(rng, (1, cfg.head_width), cfg.head_width, 1)))
        self.store.add("out.b", np.zeros(1))

    def param_count(self) -> int:
        return self.store.count()

    # -- building blocks

    def gn_layer(self, V: Tensor, name: str, graph: RegionGraph, shape: tuple[int, int],
                 training: bool, rng=None) -> Tensor:
        p = self.store
        if V.data.shape[-2] != graph.n_nodes:
            raise DataError(f"{name}: {V.data.shape[-2]} rows for {graph.n_nodes} nodes")
        if self.config.aggregator == "conv3x3":
            h_nb = conv3x3_aggregate(V, p[f"{name}.W_nb"], shape)
        else:
            h_nb = ad.neighbor_mean(ad.dense(V, p[f"{name}.W_nb"]), graph)
        h_self = ad.dense(V, p[f"{name}.W_self"])
        z = ad.dense(ad.concat_features(V, ad.add(h_nb, h_self)), p[f"{name}.W"], p[f"{name}.b"])
        z = ad.batch_norm(z, p[f"{name}.gamma"], p[f"{name}.beta"], p.bn[name], training,
                          momentum=self.config.bn_momentum)
        return ad.dropout(ad.relu(z), self.config.dropout_p, training, rng)

    def tge_forward(self, keys) -> Tensor:
        keys = np.atleast_2d(np.asarray(keys, dtype=np.float64))
        if keys.shape[-1] != self.config.key_dim:
            raise DataError(f"temporal key has {keys.shape[-1]} entries, expected {self.config.key_dim}")
        return ad.dense(Tensor(keys), self.store["tge.W"], self.store["tge.b"])

    @staticmethod
    def assemble_input(features, tge: Tensor | None) -> Tensor:
        """Append the same embedding row to every node's features."""
        features = ad.as_tensor(features)
        if tge is None or tge.data.shape[-1] == 0:
            return features
        return ad.concat_features(features, ad.broadcast_nodes(tge, features.data.shape[-2]))

    # -- forward

    def forward_scaled(self, batch: Batch, training: bool = False, rng=None) -> Tensor:
        """Predictions in scaled units, shape ``(B, N)``."""
        cfg = self.config
        demand = np.asarray(batch.demand, dtype=np.float64)
        if demand.ndim != 3 or demand.shape[1:] != (self.n_nodes, cfg.T_demand):
            raise DataError(f"demand window shape {demand.shape}, expected (B, {self.n_nodes}, {cfg.T_demand})")
        if training and rng is None and cfg.dropout_p > 0:
            raise ConfigError("training forward with dropout needs an rng")
        tge = self.tge_forward(batch.keys) if cfg.use_tge else None
        V = self.assemble_input(demand, tge)

        K = cfg.n_gn_layers
        if cfg.use_pooling:
            skip = self.gn_layer(V, "gn1", self.graph, self.grid_shape, training, rng)
            H, _ = ad.avg_pool_grid(skip, self.grid_shape)
            for k in range(2, K):
                H = self.gn_layer(H, f"gn{k}", self.coarse_graph, self.coarse_shape, training, rng)
            H = ad.concat_features(ad.nearest_unpool(H, self.grid_shape), skip)
            H = self.gn_layer(H, f"gn{K}", self.graph, self.grid_shape, training, rng)
        else:
            H = V
            for k in range(1, K + 1):
                H = self.gn_layer(H, f"gn{k}", self.graph, self.grid_shape, training, rng)

        if cfg.use_dropoff:
            if batch.dropoff is None:
                raise ConfigError("model uses drop-off features but no drop-off window was given")
            Q = Tensor(np.asarray(batch.dropoff, dtype=np.float64))
            if Q.data.shape[1:] != (self.n_nodes, cfg.T_dropoff):
                raise DataError(f"drop-off window shape {Q.data.shape}")
            for k in range(1, cfg.dropoff_branch_layers + 1):
                Q = self.gn_layer(Q, f"drop{k}", self.graph, self.grid_shape, training, rng)
            H = ad.concat_features(H, Q)

        s = self.store
        H = ad.relu(ad.dense(H, s["head.W"], s["head.b"]))
        return ad.squeeze_last(ad.relu(ad.dense(H, s["out.w"], s["out.b"])))

    def predict(self, batch: Batch) -> np.ndarray:
        """Eval-mode predictions in raw demand units, shape ``(B, N)``."""
        return self.scale.invert(self.forward_scaled(batch, training=False).data)

    # -- persistence

    def metadata(self) -> dict:
        return {
            "model_config": self.config.to_dict(),
            "grid_shape": list(self.grid_shape),
            "scale": self.scale.scale,
            "dropoff_scale": self.dropoff_scale.scale,
        }

    def save(self, path: str | Path, extra: dict | None = None) -> None:
        self.store.save(path, extra={**self.metadata(), **(extra or {})})

    @classmethod
    def load(cls, path: str | Path) -> tuple["TGNetModel", dict]:
        manifest, arrays = ParamStore.read(path)
        meta = manifest["extra"]
        model = cls(TGNetConfig.from_dict(meta["model_config"]), tuple(meta["grid_shape"]),
                    scale=ScalePolicy(meta["scale"]), dropoff_scale=ScalePolicy(meta["dropoff_scale"]))
        model.store.load_arrays(manifest, arrays)
        return model, meta


def export_tge(model: TGNetModel, path: str | Path | None = None,
               weekdays: tuple[int, ...] = tuple(range(7)), include_holiday: bool = True) -> list[tuple[str, np.ndarray]]:
    """Embedding vectors for every time-of-day x day combination.

    Rows cover each weekday (holiday bits clear) and, when
    ``include_holiday`` is set, a holiday row per slot (Monday with the
    holiday bit).  Writes a CSV when ``path`` is given.
    """
    cfg = model.config
    if not cfg.use_tge:
        raise ConfigError("model has no temporal-guided embedding")
    slots = cfg.key_dim - 9
    labels, keys = [], []
    days = [(WEEKDAYS[d], d, False) for d in weekdays]
    if include_holiday:
        days.append(("holiday", 0, True))
    for label, dow, holiday in days:
        for slot in range(slots):
            key = np.zeros(cfg.key_dim)
            key[slot] = 1.0
            key[slots + dow] = 1.0
            key[slots + 7] = float(holiday)
            labels.append(f"{label}-{slot:02d}")
            keys.append(key)
    vectors = model.tge_forward(np.stack(keys)).data
    rows = list(zip(labels, vectors))
    if path is not None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["key", "day", "slot"] + [f"e{i}" for i in range(cfg.tge_dim)])
            for label, vec in rows:
                day, slot = label.rsplit("-", 1)
                writer.writerow([label, day, int(slot)] + [repr(float(v)) for v in vec])
    return rows
