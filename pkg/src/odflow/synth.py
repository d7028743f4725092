"""Seeded synthetic AFC trip generator with a brute-force ground-truth oracle.

Randomness is counter-based: each (day, station, slot) cell draws from its
own generator keyed by ``(seed, stream, day, station, slot)``, so output does
not depend on generation order.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .core import NetworkSpec, OdflowError, OutOfPeriod, SlotIndex, Station, slot_start_ts
from .graphs import geo_distance
from .ingestion import TripTable

FUNCTIONS = ("business", "residential", "mixed")

_STREAM_TRIPS = 0
_STREAM_DAY = 1
_STREAM_STATION = 2


class InvalidConfig(OdflowError):
    pass


@dataclass(frozen=True)
class Event:
    """Multiplies the rate of every (origin, destination) pair in the sets."""

    day: int
    slot_start: int
    slot_end: int  # exclusive
    origins: tuple
    destinations: tuple
    intensity: float

    def covers(self, day: int, slot: int) -> bool:
        return day == self.day and self.slot_start <= slot < self.slot_end


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 1
    n_stations: int = 10
    days: int = 30
    granularity_minutes: int = 15
    open_time: str = "07:00"
    close_time: str = "23:00"
    start_date: str = "2014-05-01"
    center: tuple = (22.54, 114.05)
    layout: str = "lines"  # "lines" or "sunflower"
    spacing_km: float = 1.8
    spacing_jitter: float = 0.4
    radius_km: float = 8.0
    # explicit placements: list of (lat, lon, function); generated when empty
    stations: tuple = ()
    daily_entries: float = 6000.0
    size_sigma: float = 0.3
    weekend_scale: float = 0.6
    gravity_exponent: float = 1.0
    detour_factor: float = 1.3
    speed_kmh: float = 18.0
    noise: float = 0.25
    access_minutes: float = 4.0
    # day-to-day and within-day multiplicative variation of each origin's demand
    day_sigma: float = 0.25
    ar_phi: float = 0.9
    ar_sigma: float = 0.2
    events: tuple = ()

    def __post_init__(self):
        ev = tuple(e if isinstance(e, Event) else Event(**_event_kwargs(e)) for e in self.events)
        object.__setattr__(self, "events", ev)
        object.__setattr__(self, "stations", tuple(tuple(s) for s in self.stations))
        object.__setattr__(self, "center", tuple(self.center))
        if self.n_stations < 2 or self.days < 1:
            raise InvalidConfig("need at least two stations and one day")
        if self.stations and len(self.stations) != self.n_stations:
            raise InvalidConfig("explicit station list must have n_stations entries")
        for s in self.stations:
            if s[2] not in FUNCTIONS:
                raise InvalidConfig(f"unknown station function {s[2]!r}")
        if not 0 <= self.spacing_jitter < 1:
            raise InvalidConfig("spacing_jitter must lie in [0, 1)")
        if not 0 <= self.noise < 1 or self.speed_kmh <= 0 or self.access_minutes <= 0:
            raise InvalidConfig("travel-time parameters out of range")
        if self.layout not in ("lines", "sunflower"):
            raise InvalidConfig(f"unknown layout {self.layout!r}")
        if self.daily_entries <= 0:
            raise InvalidConfig("daily_entries must be positive")

    def network(self) -> NetworkSpec:
        from .core import _parse_hhmm

        lat_lon_fn = self.placements()
        stations = tuple(
            Station(f"S{k:03d}", float(la), float(lo)) for k, (la, lo, _) in enumerate(lat_lon_fn)
        )
        return NetworkSpec(
            stations=stations,
            granularity_minutes=self.granularity_minutes,
            open_minutes=_parse_hhmm(self.open_time),
            close_minutes=_parse_hhmm(self.close_time),
            start_date=self.start_date,
            days=self.days,
        )

    def placements(self) -> list[tuple[float, float, str]]:
        if self.stations:
            return [(float(a), float(b), str(c)) for a, b, c in self.stations]
        xy = self._layout_km()
        r = np.hypot(xy[:, 0], xy[:, 1])
        frac = r / max(r.max(), 1e-9)
        lat0, lon0 = self.center
        out = []
        for (x, y), f in zip(xy, frac):
            fn = "business" if f < 0.3 else ("mixed" if f < 0.7 else "residential")
            out.append((lat0 + y / 111.195, lon0 + x / (111.195 * np.cos(np.radians(lat0))), fn))
        return out

    def _layout_km(self) -> np.ndarray:
        """Station offsets (east, north) in km from the center."""
        n = self.n_stations
        if self.layout == "sunflower":
            golden = np.pi * (3 - np.sqrt(5))
            k = np.arange(n)
            r = self.radius_km * np.sqrt((k + 0.5) / n)
            return np.stack([r * np.sin(k * golden), r * np.cos(k * golden)], axis=1)
        # two crossing lines: east-west through the center, north-south offset by
        # half a spacing; gaps between consecutive stations vary around spacing_km
        rng = np.random.default_rng([self.seed, _STREAM_STATION, n])
        a = (n + 1) // 2
        b = n - a

        def line(m):
            gaps = self.spacing_km * rng.uniform(1 - self.spacing_jitter, 1 + self.spacing_jitter, max(m - 1, 0))
            pos = np.concatenate([[0.0], np.cumsum(gaps)])
            return pos - pos.mean()

        ea, nb = line(a), line(b)
        east = [(x, 0.0) for x in ea]
        north = [(0.3, y + self.spacing_km / 2) for y in nb]
        return np.array(east + north, dtype=np.float64)

    def functions(self) -> list[str]:
        return [p[2] for p in self.placements()]

    def to_json(self) -> dict:
        d = asdict(self)
        d["events"] = [asdict(e) for e in self.events]
        return d

    @classmethod
    def from_json(cls, obj: dict) -> "SynthConfig":
        return cls(**obj)

    def with_(self, **changes) -> "SynthConfig":
        return replace(self, **changes)


def _event_kwargs(e) -> dict:
    d = dict(e)
    d["origins"] = tuple(d["origins"])
    d["destinations"] = tuple(d["destinations"])
    return d


def load_synth_config(path) -> SynthConfig:
    with open(path, encoding="utf-8") as fh:
        return SynthConfig.from_json(json.load(fh))


def inject_event(config: SynthConfig, event: Event) -> SynthConfig:
    T = config.network().slots_per_day
    if not 0 <= event.day < config.days:
        raise OutOfPeriod(f"event day {event.day} outside the study period")
    if not 0 <= event.slot_start < event.slot_end <= T:
        raise OutOfPeriod("event slot range outside the operating day")
    if event.intensity < 0:
        raise InvalidConfig("event intensity must be nonnegative")
    return config.with_(events=config.events + (event,))


# -- demand model -------------------------------------------------------------------


def _bump(h, center, width):
    return np.exp(-0.5 * ((h - center) / width) ** 2)


def slot_hours(spec: NetworkSpec) -> np.ndarray:
    """Wall-clock hour at the middle of each slot."""
    g = spec.granularity_minutes
    return (spec.open_minutes + g * (np.arange(spec.slots_per_day) + 0.5)) / 60.0


def function_profile(function: str, weekend: bool, hours: np.ndarray) -> np.ndarray:
    """Daily entry-time distribution of a station with the given function."""
    if weekend:
        shape = 0.25 + _bump(hours, 14.0, 3.0)
        if function == "business":
            shape = shape + 0.3 * _bump(hours, 19.0, 1.5)
        elif function == "residential":
            shape = shape + 0.3 * _bump(hours, 10.0, 1.5)
    elif function == "residential":
        shape = 0.1 + _bump(hours, 8.0, 0.8) + 0.35 * _bump(hours, 18.5, 1.2)
    elif function == "business":
        shape = 0.1 + 0.3 * _bump(hours, 8.5, 0.8) + 0.2 * _bump(hours, 12.5, 1.0) + _bump(hours, 18.0, 1.0)
    else:
        shape = 0.15 + 0.6 * _bump(hours, 8.25, 0.9) + 0.3 * _bump(hours, 12.5, 1.2) + 0.6 * _bump(hours, 18.25, 1.1)
    return shape / shape.sum()


_MORNING_AFFINITY = {
    ("residential", "business"): 3.0,
    ("residential", "mixed"): 1.6,
    ("mixed", "business"): 1.8,
    ("business", "residential"): 0.5,
}
_EVENING_AFFINITY = {
    ("business", "residential"): 3.0,
    ("business", "mixed"): 1.6,
    ("mixed", "residential"): 1.8,
    ("residential", "business"): 0.5,
}


def destination_choice(
    distance_km: np.ndarray, functions: Sequence[str], hours: np.ndarray, exponent: float, weekend: bool
) -> np.ndarray:
    """P(destination | origin, slot) as a (T, N, N) array with zero diagonal."""
    n = len(functions)
    grav = (distance_km + 1.0) ** (-exponent)
    np.fill_diagonal(grav, 0.0)
    am = np.ones((n, n))
    ae = np.ones((n, n))
    for i, fi in enumerate(functions):
        for j, fj in enumerate(functions):
            am[i, j] = _MORNING_AFFINITY.get((fi, fj), 1.0)
            ae[i, j] = _EVENING_AFFINITY.get((fi, fj), 1.0)
    if weekend:
        m = 0.3 * _bump(hours, 10.0, 2.0)
        e = 0.3 * _bump(hours, 19.0, 2.0)
    else:
        m = _bump(hours, 8.3, 1.3)
        e = _bump(hours, 18.2, 1.5)
    aff = 1.0 + (am - 1.0)[None] * m[:, None, None] + (ae - 1.0)[None] * e[:, None, None]
    w = grav[None] * aff
    return w / w.sum(axis=2, keepdims=True)


@dataclass
class DemandModel:
    """Expected OD rates of every cell; ``rates(day)`` gives (T, N, N)."""

    config: SynthConfig
    spec: NetworkSpec
    distance: np.ndarray
    functions: list
    size: np.ndarray
    profiles: dict
    choice: dict
    day_factor: np.ndarray  # (days, N, T)

    def rates(self, day: int) -> np.ndarray:
        weekend = self.spec.weekday(day) >= 5
        scale = self.config.weekend_scale if weekend else 1.0
        prof = self.profiles[weekend]  # (N, T)
        base = self.config.daily_entries * scale * self.size[:, None] * prof * self.day_factor[day]
        lam = base.T[:, :, None] * self.choice[weekend]  # (T, N, N)
        for ev in self.config.events:
            if ev.day != day:
                continue
            idx = np.ix_(range(ev.slot_start, ev.slot_end), list(ev.origins), list(ev.destinations))
            lam[idx] *= ev.intensity
        return lam


def demand_model(config: SynthConfig) -> DemandModel:
    spec = config.network()
    n, T = spec.n_stations, spec.slots_per_day
    hours = slot_hours(spec)
    funcs = config.functions()
    dist = geo_distance(spec)
    size = np.empty(n)
    for k in range(n):
        rng = np.random.default_rng([config.seed, _STREAM_STATION, k])
        size[k] = np.exp(config.size_sigma * rng.standard_normal() - 0.5 * config.size_sigma**2)
    profiles = {
        w: np.stack([function_profile(f, w, hours) for f in funcs]) for w in (False, True)
    }
    choice = {w: destination_choice(dist, funcs, hours, config.gravity_exponent, w) for w in (False, True)}
    day_factor = np.empty((config.days, n, T))
    for d in range(config.days):
        for k in range(n):
            rng = np.random.default_rng([config.seed, _STREAM_DAY, d, k])
            level = config.day_sigma * rng.standard_normal()
            innov = config.ar_sigma * rng.standard_normal(T)
            path = np.empty(T)
            x = innov[0] / np.sqrt(max(1 - config.ar_phi**2, 1e-12))
            for s in range(T):
                if s:
                    x = config.ar_phi * x + innov[s]
                path[s] = x
            day_factor[d, k] = np.exp(level + path)
    return DemandModel(config, spec, dist, funcs, size, profiles, choice, day_factor)


def duration_bounds(config: SynthConfig, distance_km: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-pair (min, max) trip duration in seconds."""
    ride = distance_km * config.detour_factor / config.speed_kmh * 3600.0
    access = config.access_minutes * 60.0
    lo = np.floor(ride * (1 - config.noise) + access)
    hi = np.ceil(ride * (1 + config.noise) + access)
    return lo.astype(np.int64), hi.astype(np.int64)


# -- generation ----------------------------------------------------------------------


class Oracle:
    """Ground truth computed straight from trip timestamps."""

    def __init__(self, spec: NetworkSpec, origin, destination, entry_ts, exit_ts):
        self.spec = spec
        self.origin = np.asarray(origin)
        self.destination = np.asarray(destination)
        self.entry_ts = np.asarray(entry_ts)
        self.exit_ts = np.asarray(exit_ts)

    def _count(self, mask) -> np.ndarray:
        n = self.spec.n_stations
        out = np.zeros((n, n))
        np.add.at(out, (self.origin[mask], self.destination[mask]), 1.0)
        return out

    def _entered(self, t: SlotIndex):
        start = slot_start_ts(t, self.spec)
        return (self.entry_ts >= start) & (self.entry_ts < start + self.spec.slot_seconds)

    def full(self, t: SlotIndex) -> np.ndarray:
        return self._count(self._entered(t))

    def finished(self, t: SlotIndex, target: SlotIndex) -> np.ndarray:
        return self._count(self._entered(t) & (self.exit_ts < slot_start_ts(target, self.spec)))

    def delayed(self, t: SlotIndex, target: SlotIndex) -> np.ndarray:
        return self._count(self._entered(t) & (self.exit_ts >= slot_start_ts(target, self.spec)))

    def inflow(self, t: SlotIndex) -> np.ndarray:
        return self.full(t).sum(axis=1)

    def finished_inflow(self, t: SlotIndex, target: SlotIndex) -> np.ndarray:
        return self.finished(t, target).sum(axis=1)

    def delayed_inflow(self, t: SlotIndex, target: SlotIndex) -> np.ndarray:
        return self.delayed(t, target).sum(axis=1)

    def delayed_probability(self, t: SlotIndex, target: SlotIndex) -> np.ndarray:
        md = self.delayed(t, target)
        rows = md.sum(axis=1, keepdims=True)
        return np.divide(md, rows, out=np.zeros_like(md), where=rows > 0)

    def delayed_ratio(self, t: SlotIndex, target: SlotIndex) -> np.ndarray:
        m = self.full(t)
        return np.divide(self.delayed(t, target), m, out=np.zeros_like(m), where=m > 0)

    def odt(self, t: SlotIndex) -> np.ndarray:
        start = slot_start_ts(t, self.spec)
        return self._count((self.exit_ts >= start) & (self.exit_ts < start + self.spec.slot_seconds))

    def outflow(self, t: SlotIndex) -> np.ndarray:
        return self.odt(t).sum(axis=0)


@dataclass
class SynthResult:
    config: SynthConfig
    spec: NetworkSpec
    trips: TripTable
    oracle: Oracle
    demand: DemandModel


def generate(config: SynthConfig) -> SynthResult:
    demand = demand_model(config)
    spec = demand.spec
    n, T = spec.n_stations, spec.slots_per_day
    lo, hi = duration_bounds(config, demand.distance)
    ride = demand.distance * config.detour_factor / config.speed_kmh * 3600.0
    access = config.access_minutes * 60.0
    origins, dests, entries, exits = [], [], [], []
    slot_sec = spec.slot_seconds
    for d in range(config.days):
        lam = demand.rates(d)
        open_ts = spec.open_ts(d)
        for i in range(n):
            for s in range(T):
                rng = np.random.default_rng([config.seed, _STREAM_TRIPS, d, i, s])
                counts = rng.poisson(lam[s, i])
                total = int(counts.sum())
                if total == 0:
                    continue
                dst = np.repeat(np.arange(n), counts)
                offset = rng.integers(0, slot_sec, size=total)
                jitter = rng.uniform(-1.0, 1.0, size=total)
                dur = np.rint(ride[i, dst] * (1 + config.noise * jitter) + access).astype(np.int64)
                dur = np.clip(dur, lo[i, dst], hi[i, dst])
                ets = open_ts + s * slot_sec + offset
                origins.append(np.full(total, i))
                dests.append(dst)
                entries.append(ets)
                exits.append(ets + dur)
    if origins:
        o = np.concatenate(origins)
        ds = np.concatenate(dests)
        e = np.concatenate(entries)
        x = np.concatenate(exits)
    else:
        o = ds = e = x = np.zeros(0, dtype=np.int64)
    cards = np.array([f"c{k:08d}" for k in range(len(o))], dtype=object)
    trips = TripTable(cards, o, e, ds, x)
    return SynthResult(config, spec, trips, Oracle(spec, o, ds, e, x), demand)
