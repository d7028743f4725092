"""Domain types, time discretization and station indexing."""

from __future__ import annotations

import datetime as _dt
import enum
import json
from dataclasses import dataclass, field
from functools import total_ordering
from pathlib import Path
from typing import Optional, Sequence

import numpy as np


class OdflowError(Exception):
    """Base class for every error raised by the package."""


class OutOfWindow(OdflowError):
    pass


class OutOfPeriod(OdflowError):
    pass


class NegativeGap(OdflowError):
    pass


class KindMismatch(OdflowError):
    pass


class ShapeMismatch(OdflowError):
    pass


def _parse_hhmm(text: str) -> int:
    """Return minutes after midnight for an ``HH:MM`` string."""
    hh, mm = text.strip().split(":")
    minutes = int(hh) * 60 + int(mm)
    if not 0 <= minutes <= 24 * 60:
        raise ValueError(f"bad wall-clock time {text!r}")
    return minutes


def _fmt_hhmm(minutes: int) -> str:
    return f"{minutes // 60:02d}:{minutes % 60:02d}"


@dataclass(frozen=True)
class Station:
    external_id: str
    latitude: float
    longitude: float


@dataclass(frozen=True)
class NetworkSpec:
    """Station list plus the slot grid laid over each operating day.

    ``start_date`` anchors day 0 of the study period; timestamps are epoch
    seconds shifted by ``utc_offset_minutes`` into local wall-clock time.
    ``days`` is the study-period length, or ``None`` when unbounded.
    """

    stations: tuple[Station, ...]
    granularity_minutes: int = 15
    open_minutes: int = 7 * 60
    close_minutes: int = 23 * 60
    start_date: str = "2014-05-01"
    days: Optional[int] = None
    utc_offset_minutes: int = 0

    def __post_init__(self):
        ids = [s.external_id for s in self.stations]
        if not ids:
            raise ValueError("network needs at least one station")
        if len(set(ids)) != len(ids):
            raise ValueError("station ids must be unique")
        for s in self.stations:
            if not -90.0 <= s.latitude <= 90.0 or not -180.0 <= s.longitude <= 180.0:
                raise ValueError(f"station {s.external_id}: coordinates out of range")
        if self.granularity_minutes <= 0:
            raise ValueError("granularity must be positive")
        span = self.close_minutes - self.open_minutes
        if span <= 0 or span % self.granularity_minutes:
            raise ValueError("operating window must be a positive multiple of the granularity")
        if self.days is not None and self.days <= 0:
            raise ValueError("days must be positive")
        object.__setattr__(self, "_index", {sid: k for k, sid in enumerate(ids)})

    @property
    def n_stations(self) -> int:
        return len(self.stations)

    @property
    def slots_per_day(self) -> int:
        return (self.close_minutes - self.open_minutes) // self.granularity_minutes

    @property
    def slot_seconds(self) -> int:
        return self.granularity_minutes * 60

    @property
    def station_ids(self) -> list[str]:
        return [s.external_id for s in self.stations]

    def station_index(self, external_id: str) -> int:
        return self._index[external_id]

    def has_station(self, external_id: str) -> bool:
        return external_id in self._index

    def day_start_ts(self, day: int) -> int:
        """Epoch seconds of local midnight starting study day ``day``."""
        d0 = _dt.date.fromisoformat(self.start_date)
        midnight = _dt.datetime(d0.year, d0.month, d0.day, tzinfo=_dt.timezone.utc)
        return int(midnight.timestamp()) - self.utc_offset_minutes * 60 + day * 86400

    def open_ts(self, day: int) -> int:
        return self.day_start_ts(day) + self.open_minutes * 60

    def weekday(self, day: int) -> int:
        """Day of week of study day ``day`` (Monday = 0)."""
        d0 = _dt.date.fromisoformat(self.start_date)
        return (d0 + _dt.timedelta(days=day)).weekday()

    def week_attribute(self, day: int, mode: str = "weekday_weekend") -> int:
        """Day-type class used to pool history.

        ``weekday_weekend`` yields 0 (Mon-Fri) or 1 (Sat/Sun); ``day_of_week``
        yields the weekday number itself.
        """
        wd = self.weekday(day)
        if mode == "weekday_weekend":
            return int(wd >= 5)
        if mode == "day_of_week":
            return wd
        raise ValueError(f"unknown week attribute mode {mode!r}")

    def to_json(self) -> dict:
        out = {
            "granularity_minutes": self.granularity_minutes,
            "open": _fmt_hhmm(self.open_minutes),
            "close": _fmt_hhmm(self.close_minutes),
            "start_date": self.start_date,
            "utc_offset_minutes": self.utc_offset_minutes,
            "stations": [
                {"id": s.external_id, "lat": s.latitude, "lon": s.longitude}
                for s in self.stations
            ],
        }
        if self.days is not None:
            out["days"] = self.days
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "NetworkSpec":
        stations = tuple(
            Station(str(s["id"]), float(s["lat"]), float(s["lon"])) for s in obj["stations"]
        )
        return cls(
            stations=stations,
            granularity_minutes=int(obj.get("granularity_minutes", 15)),
            open_minutes=_parse_hhmm(obj.get("open", "07:00")),
            close_minutes=_parse_hhmm(obj.get("close", "23:00")),
            start_date=obj.get("start_date", "2014-05-01"),
            days=obj.get("days"),
            utc_offset_minutes=int(obj.get("utc_offset_minutes", 0)),
        )


def load_network_spec(path) -> NetworkSpec:
    with open(path, encoding="utf-8") as fh:
        return NetworkSpec.from_json(json.load(fh))


def save_network_spec(spec: NetworkSpec, path) -> None:
    Path(path).write_text(json.dumps(spec.to_json(), indent=2), encoding="utf-8")


@total_ordering
@dataclass(frozen=True)
class SlotIndex:
    day: int
    slot: int

    def __lt__(self, other: "SlotIndex") -> bool:
        return (self.day, self.slot) < (other.day, other.slot)

    def linear(self, slots_per_day: int) -> int:
        return self.day * slots_per_day + self.slot

    @classmethod
    def from_linear(cls, k: int, slots_per_day: int) -> "SlotIndex":
        return cls(k // slots_per_day, k % slots_per_day)

    def successor(self, slots_per_day: int) -> "SlotIndex":
        if self.slot + 1 < slots_per_day:
            return SlotIndex(self.day, self.slot + 1)
        return SlotIndex(self.day + 1, 0)

    def shifted(self, delta: int, slots_per_day: int) -> "SlotIndex":
        return SlotIndex.from_linear(self.linear(slots_per_day) + delta, slots_per_day)

    @classmethod
    def parse(cls, text: str) -> "SlotIndex":
        day, slot = text.split(":")
        return cls(int(day), int(slot))

    def __str__(self) -> str:
        return f"{self.day}:{self.slot}"


def slot_of(timestamp: int, spec: NetworkSpec) -> SlotIndex:
    """Map an epoch timestamp to the operating slot containing it."""
    local = int(timestamp) - spec.day_start_ts(0)
    day, second_of_day = divmod(local, 86400)
    since_open = second_of_day - spec.open_minutes * 60
    if since_open < 0 or since_open >= (spec.close_minutes - spec.open_minutes) * 60:
        raise OutOfWindow(f"timestamp {timestamp} outside the operating window")
    if day < 0 or (spec.days is not None and day >= spec.days):
        raise OutOfPeriod(f"timestamp {timestamp} falls on study day {day}")
    return SlotIndex(int(day), int(since_open // spec.slot_seconds))


def slot_start_ts(s: SlotIndex, spec: NetworkSpec) -> int:
    return spec.open_ts(s.day) + s.slot * spec.slot_seconds


def slot_gap(t: SlotIndex, t_prime: SlotIndex, slots_per_day: int = 64) -> int:
    """Number of slot steps from ``t`` to ``t_prime`` in linearized order."""
    gap = t_prime.linear(slots_per_day) - t.linear(slots_per_day)
    if gap < 0:
        raise NegativeGap(f"{t_prime} precedes {t}")
    return gap


@dataclass(frozen=True)
class TripRecord:
    card_id: str
    origin: int
    entry_time: int
    destination: int
    exit_time: int

    @property
    def duration(self) -> int:
        return self.exit_time - self.entry_time


class OdKind(enum.Enum):
    FULL = "full"
    FINISHED = "finished"
    DELAYED = "delayed"
    PROBABILITY = "probability"
    DELAYED_PROBABILITY = "delayed_probability"
    DELAYED_RATIO = "delayed_ratio"


@dataclass(frozen=True)
class OdMatrix:
    """An N x N OD matrix tagged with its slot and what it counts.

    ``ref`` is the reference slot t' for finished/delayed kinds and the gap
    for ``DELAYED_RATIO``.
    """

    slot: SlotIndex
    kind: OdKind
    values: np.ndarray = field(repr=False)
    ref: object = None

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] != v.shape[1]:
            raise ShapeMismatch(f"OD matrix must be square, got {v.shape}")
        if np.any(v < 0):
            raise ValueError("OD matrix entries must be nonnegative")
        if self.kind in (OdKind.PROBABILITY, OdKind.DELAYED_PROBABILITY):
            rows = v.sum(axis=1)
            ok = np.isclose(rows, 1.0, atol=1e-9) | (rows == 0)
            if not ok.all():
                raise ValueError("probability rows must sum to 1 or be all-zero")
        if self.kind is OdKind.DELAYED_RATIO and np.any(v > 1):
            raise ValueError("delayed ratios must lie in [0, 1]")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def n(self) -> int:
        return self.values.shape[0]


class FlowKind(enum.Enum):
    INFLOW = "inflow"
    FINISHED_INFLOW = "finished_inflow"
    DELAYED_INFLOW = "delayed_inflow"
    OUTFLOW = "outflow"


@dataclass(frozen=True)
class FlowVector:
    slot: SlotIndex
    kind: FlowKind
    values: np.ndarray = field(repr=False)
    ref: Optional[SlotIndex] = None

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 1:
            raise ShapeMismatch("flow vector must be one-dimensional")
        if np.any(v < 0):
            raise ValueError("flow entries must be nonnegative")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)


def delayed_inflow(inflow: FlowVector, finished: FlowVector) -> FlowVector:
    return FlowVector(
        inflow.slot, FlowKind.DELAYED_INFLOW, inflow.values - finished.values, finished.ref
    )


def make_network(
    coords: Sequence[tuple[float, float]], ids: Optional[Sequence[str]] = None, **kwargs
) -> NetworkSpec:
    """Convenience constructor from a list of (lat, lon) pairs."""
    if ids is None:
        ids = [f"S{k:03d}" for k in range(len(coords))]
    stations = tuple(Station(i, float(la), float(lo)) for i, (la, lo) in zip(ids, coords))
    return NetworkSpec(stations=stations, **kwargs)
