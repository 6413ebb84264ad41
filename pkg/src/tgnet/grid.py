"""Grid tessellation, demand rasterization, region graph and calendar keys."""

from __future__ import annotations

import csv
import datetime as dt
import logging
import math
import struct
from dataclasses import dataclass, field
from functools import cached_property
from enum import IntEnum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, DataError

logger = logging.getLogger(__name__)

SECONDS_PER_DAY = 86400
TENSOR_MAGIC = b"STGD1"


class Kind(IntEnum):
    PICKUP = 0
    DROPOFF = 1

    @classmethod
    def parse(cls, value: "str | int | Kind") -> "Kind":
        if isinstance(value, Kind):
            return value
        if isinstance(value, str):
            try:
                return cls[value.strip().upper()]
            except KeyError:
                raise DataError(f"unknown log kind {value!r}") from None
        return cls(int(value))


@dataclass(frozen=True)
class DemandLog:
    timestamp: float
    lat: float
    lon: float
    kind: Kind = Kind.PICKUP

    def __post_init__(self):
        if not -90.0 <= self.lat <= 90.0 or not -180.0 <= self.lon <= 180.0:
            raise DataError(f"coordinates out of range: ({self.lat}, {self.lon})")


@dataclass(frozen=True)
class GridSpec:
    """Rectangular tessellation of a bounding box over a fixed period.

    Rows run from ``lat_min`` upwards and columns from ``lon_min`` eastwards;
    cell ``i * cols + j`` is row ``i``, column ``j``.  ``period_start`` and
    ``period_end`` are UTC seconds.  ``utc_offset`` (seconds) shifts UTC to
    the local clock used for calendar features.
    """

    lat_min: float
    lat_max: float
    lon_min: float
    lon_max: float
    rows: int
    cols: int
    period_start: int
    period_end: int
    interval_len: int = 1800
    utc_offset: int = 0

    def __post_init__(self):
        if not (self.lat_max > self.lat_min and self.lon_max > self.lon_min):
            raise ConfigError("grid bounding box has zero area")
        if self.rows < 1 or self.cols < 1:
            raise ConfigError(f"grid must have at least one cell, got {self.rows}x{self.cols}")
        if self.interval_len <= 0:
            raise ConfigError("interval_len must be positive")
        if self.period_end <= self.period_start:
            raise ConfigError("period_end must be after period_start")
        if self.n_intervals < 1:
            raise ConfigError("period shorter than one interval")

    @property
    def n_nodes(self) -> int:
        return self.rows * self.cols

    @property
    def n_intervals(self) -> int:
        return (self.period_end - self.period_start) // self.interval_len

    @property
    def shape(self) -> tuple[int, int]:
        return self.rows, self.cols

    def interval_start(self, t: int) -> int:
        return self.period_start + t * self.interval_len

    def lat_edges(self) -> np.ndarray:
        return _edges(self.lat_min, self.lat_max, self.rows)

    def lon_edges(self) -> np.ndarray:
        return _edges(self.lon_min, self.lon_max, self.cols)

    def coarsened(self) -> "GridSpec":
        """Spec for the grid after 2x2 pooling (odd sizes round up)."""
        return GridSpec(
            self.lat_min, self.lat_max, self.lon_min, self.lon_max,
            rows=(self.rows + 1) // 2, cols=(self.cols + 1) // 2,
            period_start=self.period_start, period_end=self.period_end,
            interval_len=self.interval_len, utc_offset=self.utc_offset,
        )

    def to_dict(self) -> dict:
        return {
            "lat_min": self.lat_min, "lat_max": self.lat_max,
            "lon_min": self.lon_min, "lon_max": self.lon_max,
            "rows": self.rows, "cols": self.cols,
            "period_start": self.period_start, "period_end": self.period_end,
            "interval_len": self.interval_len, "utc_offset": self.utc_offset,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GridSpec":
        d = dict(d)
        for key in ("period_start", "period_end"):
            if isinstance(d.get(key), str):
                d[key] = parse_utc(d[key])
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(f"bad grid spec: {exc}") from None


def _edges(lo: float, hi: float, n: int) -> np.ndarray:
    edges = lo + np.arange(n + 1) * ((hi - lo) / n)
    edges[-1] = hi
    return edges


@dataclass
class DemandTensor:
    """Counts per (interval, cell); ``values`` has shape ``(P, N)``."""

    values: np.ndarray
    spec: GridSpec | None = None
    kind: Kind = Kind.PICKUP
    n_dropped: int = 0

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 2:
            raise DataError(f"demand tensor must be 2-d, got shape {self.values.shape}")
        if np.any(self.values < 0):
            raise DataError("demand counts must be non-negative")
        if self.spec is not None and self.values.shape != (self.spec.n_intervals, self.spec.n_nodes):
            raise DataError(
                f"tensor shape {self.values.shape} does not match grid "
                f"({self.spec.n_intervals}, {self.spec.n_nodes})"
            )

    @property
    def n_intervals(self) -> int:
        return self.values.shape[0]

    @property
    def n_nodes(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class RegionGraph:
    n_nodes: int
    neighbors: tuple[tuple[int, ...], ...]

    def degree(self) -> np.ndarray:
        return np.array([len(nb) for nb in self.neighbors], dtype=np.int64)

    @cached_property
    def padded_neighbors(self) -> np.ndarray:
        """``(N, max_degree)`` neighbour ids padded with ``n_nodes``."""
        width = max((len(nb) for nb in self.neighbors), default=0)
        idx = np.full((self.n_nodes, max(width, 1)), self.n_nodes, dtype=np.int64)
        for i, nb in enumerate(self.neighbors):
            idx[i, : len(nb)] = sorted(nb)
        return idx

    @cached_property
    def mean_matrix(self) -> np.ndarray:
        """Row-normalised adjacency; isolated nodes get an all-zero row."""
        mat = np.zeros((self.n_nodes, self.n_nodes))
        for i, nb in enumerate(self.neighbors):
            if nb:
                mat[i, list(nb)] = 1.0 / len(nb)
        return mat

    def relabel(self, perm: Sequence[int]) -> "RegionGraph":
        """Graph with node ``perm[k]`` renamed to ``k``."""
        perm = np.asarray(perm)
        inv = np.empty_like(perm)
        inv[perm] = np.arange(len(perm))
        nbrs = tuple(tuple(sorted(int(inv[u]) for u in self.neighbors[p])) for p in perm)
        return RegionGraph(self.n_nodes, nbrs)


@dataclass
class HolidayCalendar:
    dates: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        self.dates = frozenset(self.dates)

    def is_holiday(self, day: dt.date) -> bool:
        return day in self.dates

    @classmethod
    def from_file(cls, path: str | Path) -> "HolidayCalendar":
        dates = []
        for line in Path(path).read_text().splitlines():
            line = line.strip()
            if line and not line.startswith("#"):
                try:
                    dates.append(dt.date.fromisoformat(line))
                except ValueError:
                    raise DataError(f"{path}: bad holiday date {line!r}") from None
        if len(set(dates)) != len(dates):
            logger.warning("duplicate holiday dates in %s", path)
        return cls(frozenset(dates))

    def to_file(self, path: str | Path) -> None:
        Path(path).write_text("".join(f"{d.isoformat()}\n" for d in sorted(self.dates)))


# ---------------------------------------------------------------------------
# rasterization


def cell_index(spec: GridSpec, lat: np.ndarray, lon: np.ndarray) -> np.ndarray:
    """Cell ids for coordinates, -1 where out of bounds.

    Cells are half-open ``[lo, hi)`` except that the global max edges belong
    to the last row/column.
    """
    lat = np.asarray(lat, dtype=np.float64)
    lon = np.asarray(lon, dtype=np.float64)
    row = np.searchsorted(spec.lat_edges(), lat, side="right") - 1
    col = np.searchsorted(spec.lon_edges(), lon, side="right") - 1
    row = np.where(lat == spec.lat_max, spec.rows - 1, row)
    col = np.where(lon == spec.lon_max, spec.cols - 1, col)
    ok = (
        (lat >= spec.lat_min) & (lat <= spec.lat_max) & (lon >= spec.lon_min) & (lon <= spec.lon_max)
        & (row >= 0) & (row < spec.rows) & (col >= 0) & (col < spec.cols)
    )
    return np.where(ok, row * spec.cols + col, -1)


def rasterize(logs: Iterable[DemandLog], spec: GridSpec, kind: Kind | str = Kind.PICKUP) -> DemandTensor:
    """Count logs of ``kind`` per (interval, cell).

    Logs of other kinds are ignored; logs outside the bounding box or the
    period are dropped and tallied in ``n_dropped``.
    """
    kind = Kind.parse(kind)
    if spec.lat_max <= spec.lat_min or spec.lon_max <= spec.lon_min:
        raise ConfigError("grid bounding box has zero area")
    selected = [log for log in logs if log.kind == kind]
    P, N = spec.n_intervals, spec.n_nodes
    if not selected:
        return DemandTensor(np.zeros((P, N), dtype=np.int64), spec, kind)
    ts = np.array([log.timestamp for log in selected], dtype=np.float64)
    lat = np.array([log.lat for log in selected])
    lon = np.array([log.lon for log in selected])

    cell = cell_index(spec, lat, lon)
    t = np.floor((ts - spec.period_start) / spec.interval_len).astype(np.int64)
    ok = (cell >= 0) & (ts >= spec.period_start) & (t < P)
    counts = np.zeros(P * N, dtype=np.int64)
    np.add.at(counts, t[ok] * N + cell[ok], 1)
    n_dropped = int(np.count_nonzero(~ok))
    if n_dropped:
        logger.info("dropped %d %s logs outside grid or period", n_dropped, kind.name.lower())
    return DemandTensor(counts.reshape(P, N), spec, kind, n_dropped)


def build_graph(spec_or_shape: GridSpec | tuple[int, int]) -> RegionGraph:
    """Moore (8-neighbour) adjacency over the grid lattice."""
    rows, cols = spec_or_shape.shape if isinstance(spec_or_shape, GridSpec) else spec_or_shape
    nbrs = []
    for i in range(rows):
        for j in range(cols):
            cell = []
            for di in (-1, 0, 1):
                for dj in (-1, 0, 1):
                    if di == dj == 0:
                        continue
                    r, c = i + di, j + dj
                    if 0 <= r < rows and 0 <= c < cols:
                        cell.append(r * cols + c)
            nbrs.append(tuple(sorted(cell)))
    return RegionGraph(rows * cols, tuple(nbrs))


def node_features(values: np.ndarray, t: int, T: int) -> np.ndarray:
    """Window of the last ``T`` intervals ending at ``t``, most recent first.

    Returns an ``(N, T)`` array whose column ``k`` is interval ``t - k``.
    """
    values = values.values if isinstance(values, DemandTensor) else np.asarray(values)
    if T < 1:
        raise ValueError("window length must be >= 1")
    if t - T + 1 < 0:
        raise DataError(f"window underflow: t={t}, T={T}")
    if t >= values.shape[0]:
        raise DataError(f"interval {t} beyond tensor length {values.shape[0]}")
    return values[t - T + 1 : t + 1][::-1].T.copy()


# ---------------------------------------------------------------------------
# calendar keys


def n_slots(interval_len: int) -> int:
    if SECONDS_PER_DAY % interval_len:
        raise ConfigError(f"interval_len {interval_len} does not divide a day")
    return SECONDS_PER_DAY // interval_len


def key_dim(interval_len: int = 1800) -> int:
    """Length of a temporal key: slots + 7 weekdays + holiday + pre-holiday."""
    return n_slots(interval_len) + 9


def local_datetime(ts: float, spec: GridSpec) -> dt.datetime:
    return dt.datetime(1970, 1, 1) + dt.timedelta(seconds=ts + spec.utc_offset)


def temporal_key(t: int, spec: GridSpec, calendar: HolidayCalendar | None = None) -> np.ndarray:
    """0/1 calendar vector of interval ``t``.

    Layout: time-of-day one-hot, day-of-week one-hot (Monday first),
    holiday flag, day-before-holiday flag.
    """
    slots = n_slots(spec.interval_len)
    if not 0 <= t < spec.n_intervals:
        raise DataError(f"interval {t} outside period")
    calendar = calendar or HolidayCalendar()
    local = local_datetime(spec.interval_start(t), spec)
    seconds = local.hour * 3600 + local.minute * 60 + local.second
    key = np.zeros(slots + 9, dtype=np.float64)
    key[seconds // spec.interval_len] = 1.0
    key[slots + local.weekday()] = 1.0
    day = local.date()
    key[slots + 7] = float(calendar.is_holiday(day))
    key[slots + 8] = float(calendar.is_holiday(day + dt.timedelta(days=1)))
    return key


def temporal_keys(spec: GridSpec, calendar: HolidayCalendar | None = None) -> np.ndarray:
    """Keys for every interval of the period, shape ``(P, key_dim)``."""
    return np.stack([temporal_key(t, spec, calendar) for t in range(spec.n_intervals)])


def decode_key(key: np.ndarray) -> tuple[int, int, bool, bool]:
    """(slot, weekday, holiday, pre_holiday) of a key vector."""
    slots = len(key) - 9
    return (
        int(np.argmax(key[:slots])),
        int(np.argmax(key[slots : slots + 7])),
        bool(key[slots + 7]),
        bool(key[slots + 8]),
    )


def day_type(key: np.ndarray, three_way: bool = False) -> int:
    """0 workday, 1 weekend (or holiday unless ``three_way``), 2 holiday."""
    _, weekday, holiday, _ = decode_key(key)
    if holiday:
        return 2 if three_way else 1
    return int(weekday >= 5)


# ---------------------------------------------------------------------------
# scaling


@dataclass(frozen=True)
class ScalePolicy:
    """Global max scaling: ``x' = x / scale``."""

    scale: float = 1.0

    def apply(self, x):
        return np.asarray(x, dtype=np.float64) / self.scale

    def invert(self, x):
        return np.asarray(x, dtype=np.float64) * self.scale


def fit_scale(values: np.ndarray | DemandTensor) -> ScalePolicy:
    values = values.values if isinstance(values, DemandTensor) else np.asarray(values)
    peak = float(np.max(values)) if values.size else 0.0
    if peak <= 0:
        logger.warning("training data is all zero; scaling disabled")
        return ScalePolicy(1.0)
    return ScalePolicy(peak)


# ---------------------------------------------------------------------------
# files


def parse_utc(text: str) -> int:
    stamp = dt.datetime.fromisoformat(text.strip().replace("Z", "+00:00"))
    if stamp.tzinfo is None:
        stamp = stamp.replace(tzinfo=dt.timezone.utc)
    return int(stamp.timestamp()) if stamp.microsecond == 0 else stamp.timestamp()


def format_utc(ts: float) -> str:
    stamp = dt.datetime.fromtimestamp(ts, tz=dt.timezone.utc)
    return stamp.strftime("%Y-%m-%dT%H:%M:%SZ")


def read_logs(path: str | Path) -> list[DemandLog]:
    """Read a ``timestamp,lat,lon,kind`` CSV."""
    logs = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = {"timestamp", "lat", "lon", "kind"} - set(reader.fieldnames or ())
        if missing:
            raise DataError(f"{path}: missing columns {sorted(missing)}")
        for lineno, row in enumerate(reader, start=2):
            try:
                logs.append(DemandLog(parse_utc(row["timestamp"]), float(row["lat"]),
                                      float(row["lon"]), Kind.parse(row["kind"])))
            except (ValueError, DataError) as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
    return logs


def write_logs(logs: Iterable[DemandLog], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["timestamp", "lat", "lon", "kind"])
        for log in logs:
            writer.writerow([format_utc(log.timestamp), repr(log.lat), repr(log.lon), log.kind.name.lower()])


def save_tensor(tensor: DemandTensor, path: str | Path) -> None:
    P, N = tensor.values.shape
    counts = np.ascontiguousarray(tensor.values, dtype="<u4")
    if np.any(counts != tensor.values):
        raise DataError("counts do not fit in u32")
    with open(path, "wb") as fh:
        fh.write(TENSOR_MAGIC)
        fh.write(struct.pack("<III", P, N, int(tensor.kind)))
        fh.write(counts.tobytes())


def load_tensor(path: str | Path, spec: GridSpec | None = None) -> DemandTensor:
    raw = Path(path).read_bytes()
    if raw[:5] != TENSOR_MAGIC:
        raise DataError(f"{path}: not a demand tensor file")
    P, N, kind = struct.unpack_from("<III", raw, 5)
    body = np.frombuffer(raw, dtype="<u4", offset=17)
    if body.size != P * N:
        raise DataError(f"{path}: expected {P * N} counts, found {body.size}")
    return DemandTensor(body.astype(np.int64).reshape(P, N), spec, Kind(kind))


def period_bounds(start: str | int, n_days: float, interval_len: int = 1800) -> tuple[int, int]:
    start_ts = parse_utc(start) if isinstance(start, str) else int(start)
    return start_ts, start_ts + int(math.floor(n_days * SECONDS_PER_DAY / interval_len)) * interval_len
