"""Seeded synthetic demand with known temporal contexts and labelled events."""

from __future__ import annotations

import datetime as dt
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .grid import (
    DemandLog, DemandTensor, GridSpec, HolidayCalendar, Kind, cell_index, day_type, decode_key, n_slots,
    parse_utc, temporal_keys,
)


def default_profile(slots: int = 48) -> np.ndarray:
    """Workday shape: night trough, morning and evening peaks."""
    h = (np.arange(slots) + 0.5) * 24.0 / slots
    return 0.15 + 1.2 * np.exp(-((h - 8.5) ** 2) / 3.0) + 1.0 * np.exp(-((h - 18.5) ** 2) / 5.0) \
        + 0.4 * np.exp(-((h - 13.0) ** 2) / 8.0)


def weekend_profile(slots: int = 48) -> np.ndarray:
    """Non-workday shape: late start, broad afternoon, busy late night."""
    h = (np.arange(slots) + 0.5) * 24.0 / slots
    return 0.25 + 0.9 * np.exp(-((h - 14.5) ** 2) / 12.0) + 0.7 * np.exp(-((h - 23.5) ** 2) / 4.0) \
        + 0.5 * np.exp(-((h - 0.5) ** 2) / 4.0)


def step_profile(levels: list[tuple[float, float]], slots: int = 48) -> np.ndarray:
    """Piecewise-constant profile from ``(start_hour, level)`` pairs."""
    h = np.arange(slots) * 24.0 / slots
    out = np.full(slots, levels[0][1])
    for start, level in sorted(levels):
        out[h >= start] = level
    return out


# abrupt day-type specific transitions that recent history cannot anticipate
WORKDAY_STEPS = [(0.0, 0.3), (7.0, 2.5), (10.0, 1.0), (17.0, 2.2), (19.5, 0.5)]
OFFDAY_STEPS = [(0.0, 0.3), (10.0, 1.4), (20.0, 0.8)]


@dataclass
class Hotspot:
    row: int
    col: int
    radius: float = 1.0
    intensity: float = 1.0


@dataclass
class Event:
    cell: int
    start: int
    duration: int
    magnitude: float


@dataclass
class SynthConfig:
    rows: int = 4
    cols: int = 4
    n_days: int = 28
    interval_len: int = 1800
    start: str = "2015-01-05T00:00:00Z"
    utc_offset: int = 0
    lat_min: float = 40.70
    lat_max: float = 40.80
    lon_min: float = -74.02
    lon_max: float = -73.92
    base_rate: float = 10.0
    base_rates: list[float] | None = None
    spatial_sigma: float = 0.0  # lognormal spread of random base rates
    target_mean: float | None = None  # rescale rates so the mean intensity matches
    daily_profile: list[float] | None = None
    weekend_daily_profile: list[float] | None = None
    weekday_mult: float = 1.0
    weekend_mult: float = 1.0
    holiday_mult: float = 1.0
    hotspots: list[Hotspot] = field(default_factory=list)
    events: list[Event] = field(default_factory=list)
    n_random_events: int = 0
    event_magnitude: tuple[float, float] = (20.0, 40.0)
    event_duration: tuple[int, int] = (2, 4)
    dropoff_ratio: float = 1.0
    dropoff_lag: int = 2
    dropoff_coupling: float = 1.0
    holidays: list[str] = field(default_factory=list)
    noise: str = "poisson"  # or "none": counts are rounded means
    seed: int = 0

    def __post_init__(self):
        self.hotspots = [h if isinstance(h, Hotspot) else Hotspot(**h) for h in self.hotspots]
        self.events = [e if isinstance(e, Event) else Event(**e) for e in self.events]
        self.event_magnitude = tuple(self.event_magnitude)
        self.event_duration = tuple(self.event_duration)
        if self.noise not in ("poisson", "none"):
            raise ConfigError(f"unknown noise model {self.noise!r}")
        rates = [self.base_rate, self.weekday_mult, self.weekend_mult, self.holiday_mult,
                 self.dropoff_ratio, self.dropoff_coupling] + list(self.base_rates or [])
        rates += list(self.daily_profile or []) + list(self.weekend_daily_profile or [])
        if min(rates) < 0:
            raise ConfigError("synthetic rates must be non-negative")
        if self.base_rates is not None and len(self.base_rates) != self.rows * self.cols:
            raise ConfigError(f"{len(self.base_rates)} base rates for {self.rows * self.cols} regions")
        if self.dropoff_lag < 0:
            raise ConfigError("dropoff_lag must be >= 0")

    def grid_spec(self) -> GridSpec:
        start = parse_utc(self.start)
        P = int(self.n_days * 86400) // self.interval_len
        return GridSpec(self.lat_min, self.lat_max, self.lon_min, self.lon_max, self.rows, self.cols,
                        start, start + P * self.interval_len, self.interval_len, self.utc_offset)

    def calendar(self) -> HolidayCalendar:
        return HolidayCalendar(frozenset(dt.date.fromisoformat(d) for d in self.holidays))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(f"bad synth config: {exc}") from None

    @classmethod
    def from_json(cls, path: str | Path) -> "SynthConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


def preset(name: str, **overrides) -> SynthConfig:
    """Named configurations.

    ``nyc-taxi-like`` mimics the scale of the NYC taxi data (10x20 grid,
    60 days, mean intensity 38.8, heavy spatial skew).
    """
    if name == "nyc-taxi-like":
        cfg = dict(
            rows=10, cols=20, n_days=60, start="2015-01-01T00:00:00Z",
            lat_min=40.60, lat_max=40.88, lon_min=-74.05, lon_max=-73.75,
            spatial_sigma=1.2, target_mean=38.8, weekend_mult=0.8, holiday_mult=0.7,
            hotspots=[Hotspot(5, 8, 2.0, 3.0), Hotspot(3, 12, 1.5, 2.0)],
            n_random_events=12, event_magnitude=(150.0, 400.0), event_duration=(2, 5),
            dropoff_ratio=0.9, dropoff_lag=3, dropoff_coupling=1.0,
            holidays=["2015-01-01", "2015-01-19", "2015-02-16"],
        )
    elif name == "deterministic":
        cfg = dict(rows=4, cols=4, n_days=14, base_rate=20.0, spatial_sigma=0.5, weekend_mult=0.6,
                   weekend_daily_profile=weekend_profile().tolist(), noise="none")
    elif name == "daytype":
        cfg = dict(rows=4, cols=4, n_days=28, base_rate=30.0, spatial_sigma=0.5,
                   daily_profile=step_profile(WORKDAY_STEPS).tolist(),
                   weekend_daily_profile=step_profile(OFFDAY_STEPS).tolist())
    else:
        raise ConfigError(f"unknown preset {name!r}")
    cfg.update(overrides)
    return SynthConfig(**cfg)


@dataclass
class SynthResult:
    pickup: DemandTensor
    dropoff: DemandTensor
    event_mask: np.ndarray  # (P, N) bool, pickup surge cells
    dropoff_event_mask: np.ndarray  # (P, N) bool
    contexts: np.ndarray  # (P, 3): slot, weekday, day type
    pickup_rate: np.ndarray
    dropoff_rate: np.ndarray
    events: list[Event]
    spec: GridSpec
    calendar: HolidayCalendar

    @property
    def keys(self) -> np.ndarray:
        return temporal_keys(self.spec, self.calendar)


def _spatial_rates(config: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    N = config.rows * config.cols
    if config.base_rates is not None:
        base = np.asarray(config.base_rates, dtype=np.float64)
    else:
        base = np.full(N, config.base_rate)
        if config.spatial_sigma > 0:
            base = base * rng.lognormal(-0.5 * config.spatial_sigma**2, config.spatial_sigma, size=N)
    rr, cc = np.divmod(np.arange(N), config.cols)
    factor = np.ones(N)
    for h in config.hotspots:
        d2 = (rr - h.row) ** 2 + (cc - h.col) ** 2
        factor *= 1.0 + h.intensity * np.exp(-d2 / (2.0 * h.radius**2))
    return base * factor


def _random_events(config: SynthConfig, P: int, rng: np.random.Generator) -> list[Event]:
    N = config.rows * config.cols
    events = []
    lo_d, hi_d = config.event_duration
    for _ in range(config.n_random_events):
        duration = int(rng.integers(lo_d, hi_d + 1))
        start = int(rng.integers(config.dropoff_lag, P - duration + 1))
        events.append(Event(int(rng.integers(N)), start, duration, float(rng.uniform(*config.event_magnitude))))
    return events


def generate(config: SynthConfig) -> SynthResult:
    """Demand rates from calendar, space and events, then seeded counts.

    Background intensity is ``base * profile(slot, day type) * day-type
    multiplier * hotspot factor``.  An event adds its magnitude to the
    pickup intensity at its cell and ``coupling * magnitude`` to the
    drop-off intensity ``dropoff_lag`` intervals earlier.
    """
    spec = config.grid_spec()
    calendar = config.calendar()
    P, N = spec.n_intervals, spec.n_nodes
    slots = n_slots(config.interval_len)
    seq = np.random.SeedSequence(config.seed)
    layout_seed, count_seed = seq.spawn(2)
    layout_rng = np.random.default_rng(layout_seed)

    workday = np.asarray(config.daily_profile if config.daily_profile is not None else default_profile(slots))
    offday = np.asarray(config.weekend_daily_profile) if config.weekend_daily_profile is not None else workday
    if len(workday) != slots or len(offday) != slots:
        raise ConfigError(f"daily profiles need {slots} entries")
    keys = temporal_keys(spec, calendar)
    contexts = np.array([(decode_key(k)[0], decode_key(k)[1], day_type(k, three_way=True)) for k in keys])
    slot, kind = contexts[:, 0], contexts[:, 2]
    mult = np.choose(kind, [config.weekday_mult, config.weekend_mult, config.holiday_mult])
    temporal = np.where(kind == 0, workday[slot], offday[slot]) * mult

    spatial = _spatial_rates(config, layout_rng)
    background = temporal[:, None] * spatial[None, :]
    if config.target_mean is not None:
        if background.mean() <= 0:
            raise ConfigError("cannot rescale an all-zero intensity")
        background *= config.target_mean / background.mean()

    events = list(config.events) + _random_events(config, P, layout_rng)
    pickup_rate = background.copy()
    dropoff_rate = config.dropoff_ratio * background
    event_mask = np.zeros((P, N), dtype=bool)
    dropoff_mask = np.zeros((P, N), dtype=bool)
    for ev in events:
        first = ev.start - config.dropoff_lag
        if not (0 <= ev.cell < N) or first < 0 or ev.start + ev.duration > P or ev.duration < 1:
            raise ConfigError(f"event {ev} does not fit in the period")
        span = slice(ev.start, ev.start + ev.duration)
        lead = slice(first, first + ev.duration)
        pickup_rate[span, ev.cell] += ev.magnitude
        dropoff_rate[lead, ev.cell] += config.dropoff_coupling * ev.magnitude
        event_mask[span, ev.cell] = True
        dropoff_mask[lead, ev.cell] = True

    if config.noise == "none":
        pickup = np.floor(pickup_rate + 0.5).astype(np.int64)
        dropoff = np.floor(dropoff_rate + 0.5).astype(np.int64)
    else:
        pickup = np.empty((P, N), dtype=np.int64)
        dropoff = np.empty((P, N), dtype=np.int64)
        for i, region_seed in enumerate(count_seed.spawn(N)):
            rng = np.random.default_rng(region_seed)
            pickup[:, i] = rng.poisson(pickup_rate[:, i])
            dropoff[:, i] = rng.poisson(dropoff_rate[:, i])

    return SynthResult(
        DemandTensor(pickup, spec, Kind.PICKUP), DemandTensor(dropoff, spec, Kind.DROPOFF),
        event_mask, dropoff_mask, contexts, pickup_rate, dropoff_rate, events, spec, calendar,
    )


def export_logs(tensors: list[DemandTensor] | DemandTensor, spec: GridSpec, seed: int = 0) -> list[DemandLog]:
    """One log per counted unit, placed uniformly inside its cell and interval.

    Positions keep a tiny margin from cell edges so that rasterizing the
    logs reproduces the tensors exactly.
    """
    if isinstance(tensors, DemandTensor):
        tensors = [tensors]
    rng = np.random.default_rng(seed)
    lat_edges, lon_edges = spec.lat_edges(), spec.lon_edges()
    logs: list[DemandLog] = []
    for tensor in tensors:
        counts = tensor.values
        t_idx, cells = np.nonzero(counts)
        reps = counts[t_idx, cells]
        t_all = np.repeat(t_idx, reps)
        c_all = np.repeat(cells, reps)
        if t_all.size == 0:
            continue
        row, col = np.divmod(c_all, spec.cols)
        u = rng.uniform(1e-6, 1.0 - 1e-6, size=(2, t_all.size))
        lat = lat_edges[row] + u[0] * (lat_edges[row + 1] - lat_edges[row])
        lon = lon_edges[col] + u[1] * (lon_edges[col + 1] - lon_edges[col])
        ts = spec.period_start + t_all * spec.interval_len + rng.integers(0, spec.interval_len, size=t_all.size)
        if np.any(cell_index(spec, lat, lon) != c_all):
            raise AssertionError("generated log fell outside its cell")
        logs.extend(DemandLog(int(a), float(b), float(c), tensor.kind) for a, b, c in zip(ts, lat, lon))
    return logs
