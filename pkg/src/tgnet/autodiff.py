"""Small reverse-mode autodiff kernel over float64 numpy arrays.

Only the operations the forecasting model needs are provided.  Every op
builds a :class:`Tensor` whose ``_backward`` closure pushes the output
gradient into its parents; :meth:`Tensor.backward` replays the closures in
reverse topological order.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import ConfigError, DataError, NumericalError
from .grid import RegionGraph

CHECKPOINT_MAGIC = b"TGCK1"


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False, _parents=(), op=""):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = None
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self.op or 'leaf'})"

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        self._accumulate(grad)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                if node._parents:
                    # interior gradients are not needed once propagated
                    node.grad = None if node is not self else node.grad


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents, op, backward) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NumericalError(f"non-finite values produced by {op}")
    needs = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs, _parents=tuple(parents) if needs else (), op=op)
    if needs:
        out._backward = backward
    return out


# ---------------------------------------------------------------------------
# elementwise and linear ops


def dense(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    """``y = x @ W.T + b`` over the last axis; ``W`` is ``(F_out, F_in)``."""
    x = as_tensor(x)
    if W.data.ndim != 2 or x.data.shape[-1] != W.data.shape[1]:
        raise DataError(f"dense: input width {x.data.shape[-1]} vs weight {W.data.shape}")
    if b is not None and b.data.shape != (W.data.shape[0],):
        raise DataError(f"dense: bias shape {b.data.shape} vs weight {W.data.shape}")
    x2 = x.data.reshape(-1, x.data.shape[-1])
    y = x2 @ W.data.T
    if b is not None:
        y = y + b.data
    y = y.reshape(x.data.shape[:-1] + (W.data.shape[0],))
    parents = (x, W) if b is None else (x, W, b)

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        if x.requires_grad:
            x._accumulate((g2 @ W.data).reshape(x.data.shape))
        if W.requires_grad:
            W._accumulate(g2.T @ x2)
        if b is not None and b.requires_grad:
            b._accumulate(g2.sum(axis=0))

    return _result(y, parents, "dense", backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def backward(g):
        x._accumulate(g * mask)

    return _result(np.where(mask, x.data, 0.0), (x,), "relu", backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise DataError(f"add: shape mismatch {a.data.shape} vs {b.data.shape}")

    def backward(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(g)

    return _result(a.data + b.data, (a, b), "add", backward)


def concat_features(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate along the last (feature) axis."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.shape[:-1] != b.data.shape[:-1]:
        raise DataError(f"concat: leading shapes differ {a.data.shape} vs {b.data.shape}")
    split = a.data.shape[-1]

    def backward(g):
        if a.requires_grad:
            a._accumulate(g[..., :split])
        if b.requires_grad:
            b._accumulate(g[..., split:])

    return _result(np.concatenate([a.data, b.data], axis=-1), (a, b), "concat", backward)


def broadcast_nodes(x: Tensor, n_nodes: int) -> Tensor:
    """Repeat a ``(B, D)`` tensor to ``(B, n_nodes, D)``."""
    data = np.broadcast_to(x.data[:, None, :], (x.data.shape[0], n_nodes, x.data.shape[1])).copy()

    def backward(g):
        x._accumulate(g.sum(axis=1))

    return _result(data, (x,), "broadcast_nodes", backward)


def squeeze_last(x: Tensor) -> Tensor:
    if x.data.shape[-1] != 1:
        raise DataError(f"squeeze_last: last axis has size {x.data.shape[-1]}")

    def backward(g):
        x._accumulate(g[..., None])

    return _result(x.data[..., 0], (x,), "squeeze", backward)


# ---------------------------------------------------------------------------
# graph ops


def neighbor_mean(x: Tensor, graph: RegionGraph) -> Tensor:
    """Mean of neighbour features along the node axis (second to last).

    Neighbour values are sorted before a sequential sum, so the result does
    not depend on how nodes are labelled or neighbours listed.  Isolated
    nodes get a zero row.
    """
    N = x.data.shape[-2]
    if N != graph.n_nodes:
        raise DataError(f"neighbor_mean: {N} rows for a graph of {graph.n_nodes} nodes")
    idx = graph.padded_neighbors
    deg = graph.degree().astype(np.float64)
    pad = np.zeros(x.data.shape[:-2] + (1, x.data.shape[-1]))
    gathered = np.sort(np.concatenate([x.data, pad], axis=-2)[..., idx, :], axis=-2)
    total = gathered[..., 0, :].copy()
    for k in range(1, gathered.shape[-2]):
        total += gathered[..., k, :]
    out = total / np.maximum(deg, 1.0)[:, None]
    mat_t = graph.mean_matrix.T

    def backward(g):
        x._accumulate(np.matmul(mat_t, g))

    return _result(out, (x,), "neighbor_mean", backward)


def _grid_view(data: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    rows, cols = shape
    if data.shape[-2] != rows * cols:
        raise DataError(f"{data.shape[-2]} nodes do not form a {rows}x{cols} grid")
    return data.reshape(data.shape[:-2] + (rows, cols, data.shape[-1]))


def avg_pool_grid(x: Tensor, shape: tuple[int, int]) -> tuple[Tensor, tuple[int, int]]:
    """Non-overlapping 2x2 average pooling of the node axis read as a grid.

    Odd dimensions are padded by repeating the last row/column.  Returns the
    pooled tensor and the coarse grid shape.
    """
    rows, cols = shape
    pr, pc = rows % 2, cols % 2
    grid = _grid_view(x.data, shape)
    lead = grid.ndim - 3
    pad = [(0, 0)] * lead + [(0, pr), (0, pc), (0, 0)]
    padded = np.pad(grid, pad, mode="edge")
    R, C = (rows + pr) // 2, (cols + pc) // 2
    blocks = padded.reshape(grid.shape[:lead] + (R, 2, C, 2, grid.shape[-1]))
    out = blocks.mean(axis=(lead + 1, lead + 3)).reshape(grid.shape[:lead] + (R * C, grid.shape[-1]))

    def backward(g):
        gg = g.reshape(grid.shape[:lead] + (R, 1, C, 1, grid.shape[-1])) / 4.0
        gp = np.broadcast_to(gg, blocks.shape).reshape(padded.shape)
        gx = gp[..., :rows, :cols, :].copy()
        if pr:
            gx[..., rows - 1, :, :] += gp[..., rows, :cols, :]
        if pc:
            gx[..., :, cols - 1, :] += gp[..., :rows, cols, :]
        if pr and pc:
            gx[..., rows - 1, cols - 1, :] += gp[..., rows, cols, :]
        x._accumulate(gx.reshape(x.data.shape))

    return _result(out, (x,), "avg_pool", backward), (R, C)


def nearest_unpool(x: Tensor, fine_shape: tuple[int, int]) -> Tensor:
    """Inverse of :func:`avg_pool_grid`: copy each coarse value to its 2x2 block."""
    rows, cols = fine_shape
    R, C = (rows + 1) // 2, (cols + 1) // 2
    grid = _grid_view(x.data, (R, C))
    lead = grid.ndim - 3
    up = np.repeat(np.repeat(grid, 2, axis=lead), 2, axis=lead + 1)[..., :rows, :cols, :]
    out = up.reshape(grid.shape[:lead] + (rows * cols, grid.shape[-1]))

    def backward(g):
        gf = np.zeros(grid.shape[:lead] + (2 * R, 2 * C, grid.shape[-1]))
        gf[..., :rows, :cols, :] = g.reshape(grid.shape[:lead] + (rows, cols, grid.shape[-1]))
        gc = gf.reshape(grid.shape[:lead] + (R, 2, C, 2, grid.shape[-1])).sum(axis=(lead + 1, lead + 3))
        x._accumulate(gc.reshape(x.data.shape))

    return _result(out, (x,), "unpool", backward)


# ---------------------------------------------------------------------------
# regularisers


@dataclass
class BatchNormState:
    running_mean: np.ndarray
    running_var: np.ndarray

    @classmethod
    def fresh(cls, width: int) -> "BatchNormState":
        return cls(np.zeros(width), np.ones(width))


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState,
               training: bool, momentum: float = 0.99, eps: float = 1e-5) -> Tensor:
    """Per-feature normalisation over every axis but the last.

    In training mode the batch statistics are used and the running
    statistics move towards them with ``momentum``; in eval mode the running
    statistics are used.
    """
    F = x.data.shape[-1]
    flat = x.data.reshape(-1, F)
    if not training:
        inv = 1.0 / np.sqrt(state.running_var + eps)
        xhat = (flat - state.running_mean) * inv
        out = (xhat * gamma.data + beta.data).reshape(x.data.shape)

        def backward_eval(g):
            g2 = g.reshape(-1, F)
            if x.requires_grad:
                x._accumulate((g2 * (gamma.data * inv)).reshape(x.data.shape))
            if gamma.requires_grad:
                gamma._accumulate((g2 * xhat).sum(axis=0))
            if beta.requires_grad:
                beta._accumulate(g2.sum(axis=0))

        return _result(out, (x, gamma, beta), "batch_norm", backward_eval)

    n = flat.shape[0]
    if n < 2:
        raise DataError("batch_norm needs at least two rows in training mode")
    mean = flat.mean(axis=0)
    centered = flat - mean
    var = (centered**2).mean(axis=0)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = (xhat * gamma.data + beta.data).reshape(x.data.shape)
    state.running_mean = momentum * state.running_mean + (1.0 - momentum) * mean
    state.running_var = momentum * state.running_var + (1.0 - momentum) * var

    def backward(g):
        g2 = g.reshape(-1, F)
        if gamma.requires_grad:
            gamma._accumulate((g2 * xhat).sum(axis=0))
        if beta.requires_grad:
            beta._accumulate(g2.sum(axis=0))
        if x.requires_grad:
            gx = g2 * gamma.data
            dx = inv * (gx - gx.mean(axis=0) - xhat * (gx * xhat).mean(axis=0))
            x._accumulate(dx.reshape(x.data.shape))

    return _result(out, (x, gamma, beta), "batch_norm", backward)


def dropout(x: Tensor, p: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout; identity in eval mode or when ``p == 0``."""
    if not training or p == 0.0:
        return x
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout probability must be in [0, 1), got {p}")
    if rng is None:
        raise ConfigError("dropout in training mode needs an rng")
    keep = (rng.random(x.data.shape) >= p) / (1.0 - p)

    def backward(g):
        x._accumulate(g * keep)

    return _result(x.data * keep, (x,), "dropout", backward)


# ---------------------------------------------------------------------------
# losses


def mse_loss(pred: Tensor, target) -> Tensor:
    target = np.asarray(target, dtype=np.float64)
    if pred.data.shape != target.shape:
        raise DataError(f"loss: prediction {pred.data.shape} vs target {target.shape}")
    diff = pred.data - target

    def backward(g):
        pred._accumulate(g * 2.0 * diff / diff.size)

    return _result(np.mean(diff**2), (pred,), "mse", backward)


def mae_loss(pred: Tensor, target) -> Tensor:
    target = np.asarray(target, dtype=np.float64)
    if pred.data.shape != target.shape:
        raise DataError(f"loss: prediction {pred.data.shape} vs target {target.shape}")
    diff = pred.data - target

    def backward(g):
        pred._accumulate(g * np.sign(diff) / diff.size)

    return _result(np.mean(np.abs(diff)), (pred,), "mae", backward)


LOSSES = {"mse": mse_loss, "mae": mae_loss}


# ---------------------------------------------------------------------------
# parameters and optimiser


def glorot_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


@dataclass
class ParamStore:
    """Named trainable tensors, batch-norm buffers and Adam state."""

    params: dict[str, Tensor] = field(default_factory=dict)
    bn: dict[str, BatchNormState] = field(default_factory=dict)
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self.params:
            raise ConfigError(f"duplicate parameter {name!r}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True, op=name)
        self.params[name] = t
        self.m[name] = np.zeros_like(t.data)
        self.v[name] = np.zeros_like(t.data)
        return t

    def add_bn(self, name: str, width: int) -> BatchNormState:
        self.bn[name] = BatchNormState.fresh(width)
        return self.bn[name]

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def count(self) -> int:
        return int(sum(t.data.size for t in self.params.values()))

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def grads(self) -> dict[str, np.ndarray]:
        return {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in self.params.items()}

    def snapshot(self) -> dict:
        """Copy of parameter values and buffers (optimiser state excluded)."""
        return {
            "params": {k: t.data.copy() for k, t in self.params.items()},
            "bn": {k: (s.running_mean.copy(), s.running_var.copy()) for k, s in self.bn.items()},
        }

    def restore(self, snap: dict):
        for k, value in snap["params"].items():
            self.params[k].data = value.copy()
        for k, (mean, var) in snap["bn"].items():
            self.bn[k].running_mean = mean.copy()
            self.bn[k].running_var = var.copy()

    # -- checkpoint format: magic, u32 manifest length, manifest json, f64 blob

    def _entries(self):
        for k, t in self.params.items():
            yield f"param/{k}", t.data
        for k, s in self.bn.items():
            yield f"bn_mean/{k}", s.running_mean
            yield f"bn_var/{k}", s.running_var
        for k in self.params:
            yield f"adam_m/{k}", self.m[k]
            yield f"adam_v/{k}", self.v[k]

    def save(self, path: str | Path, extra: dict | None = None) -> None:
        entries = list(self._entries())
        manifest = {
            "adam_step": self.step,
            "tensors": [{"name": name, "shape": list(arr.shape)} for name, arr in entries],
            "extra": extra or {},
        }
        header = json.dumps(manifest, sort_keys=True).encode()
        blob = b"".join(np.ascontiguousarray(arr, dtype="<f8").tobytes() for _, arr in entries)
        with open(path, "wb") as fh:
            fh.write(CHECKPOINT_MAGIC)
            fh.write(struct.pack("<I", len(header)))
            fh.write(header)
            fh.write(blob)

    @staticmethod
    def read(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
        raw = Path(path).read_bytes()
        if raw[:5] != CHECKPOINT_MAGIC:
            raise DataError(f"{path}: not a checkpoint file")
        (hlen,) = struct.unpack_from("<I", raw, 5)
        manifest = json.loads(raw[9 : 9 + hlen])
        offset = 9 + hlen
        arrays = {}
        for entry in manifest["tensors"]:
            shape = tuple(entry["shape"])
            n = int(np.prod(shape, dtype=np.int64))
            if offset + 8 * n > len(raw):
                raise DataError(f"{path}: checkpoint is truncated")
            arrays[entry["name"]] = np.frombuffer(raw, dtype="<f8", count=n, offset=offset).reshape(shape).copy()
            offset += 8 * n
        if offset != len(raw):
            raise DataError(f"{path}: trailing or missing bytes in checkpoint")
        return manifest, arrays

    def load_arrays(self, manifest: dict, arrays: dict[str, np.ndarray]) -> None:
        for k, t in self.params.items():
            value = arrays.get(f"param/{k}")
            if value is None or value.shape != t.data.shape:
                raise DataError(f"checkpoint lacks parameter {k!r} with shape {t.data.shape}")
            t.data = value
            self.m[k] = arrays.get(f"adam_m/{k}", np.zeros_like(value))
            self.v[k] = arrays.get(f"adam_v/{k}", np.zeros_like(value))
        for k, s in self.bn.items():
            s.running_mean = arrays[f"bn_mean/{k}"]
            s.running_var = arrays[f"bn_var/{k}"]
        self.step = int(manifest.get("adam_step", 0))


def learning_rate(lr0: float, decay: float, step: int) -> float:
    """Inverse-time decay; ``step`` counts updates already applied."""
    return lr0 / (1.0 + decay * step)


def adam_step(store: ParamStore, grads: dict[str, np.ndarray] | None = None, lr0: float = 0.01,
              decay: float = 0.01, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> float:
    """One Adam update of every parameter in ``store``; returns the rate used."""
    grads = store.grads() if grads is None else grads
    lr = learning_rate(lr0, decay, store.step)
    store.step += 1
    t = store.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name, param in store.params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(param.data)
        m = store.m[name] = beta1 * store.m[name] + (1.0 - beta1) * g
        v = store.v[name] = beta2 * store.v[name] + (1.0 - beta2) * g * g
        param.data = param.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return lr


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_param: dict[str, float]

    def passed(self, tol: float) -> bool:
        return self.max_rel_error < tol


def grad_check(fn: Callable[[], Tensor], params: dict[str, Tensor], h: float = 1e-5,
               max_coords: int | None = None, rng: np.random.Generator | None = None) -> GradCheckReport:
    """Compare backprop gradients with central differences.

    ``fn`` must rebuild the scalar output from the current values of
    ``params``.  The error for each parameter is the norm-wise relative
    error ``|g_a - g_n| / max(|g_a|, |g_n|)`` over the checked coordinates.
    """
    for t in params.values():
        t.grad = None
    out = fn()
    out.backward()
    analytic = {k: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data)) for k, t in params.items()}
    per_param = {}
    for name, t in params.items():
        flat = t.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            rng = rng or np.random.default_rng(0)
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        num = np.empty(len(coords))
        for n, i in enumerate(coords):
            orig = flat[i]
            flat[i] = orig + h
            up = float(fn().data)
            flat[i] = orig - h
            down = float(fn().data)
            flat[i] = orig
            num[n] = (up - down) / (2 * h)
        ana = analytic[name].reshape(-1)[coords]
        scale = max(np.linalg.norm(ana), np.linalg.norm(num))
        per_param[name] = 0.0 if scale == 0 else float(np.linalg.norm(ana - num) / scale)
    for t in params.values():
        t.grad = None
    return GradCheckReport(max(per_param.values(), default=0.0), per_param)
