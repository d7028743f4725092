"""From raw AFC trips to slot tensors, delayed ratios and training samples."""

from __future__ import annotations

import csv
import io
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Optional, Sequence, Union

import numpy as np

from .core import (
    FlowKind,
    FlowVector,
    KindMismatch,
    NetworkSpec,
    OdflowError,
    OdKind,
    OdMatrix,
    SlotIndex,
    TripRecord,
)
from .io import write_matrix

log = logging.getLogger(__name__)

CSV_HEADER = ["card_id", "origin_id", "entry_ts", "dest_id", "exit_ts"]

DROP_REASONS = ("UnknownStation", "NonPositiveDuration", "OutOfWindow", "MalformedRow")


class MalformedHeader(OdflowError):
    pass


class InsufficientHistory(OdflowError):
    pass


class EmptyHistory(OdflowError):
    pass


class EmptyInput(OdflowError):
    pass


class TooFewDays(OdflowError):
    pass


@dataclass
class DropReport:
    counts: Counter = field(default_factory=Counter)

    def add(self, reason: str, n: int = 1) -> None:
        self.counts[reason] += n

    def merge(self, other: "DropReport") -> "DropReport":
        return DropReport(self.counts + other.counts)

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    def to_json(self) -> dict:
        return {r: int(self.counts.get(r, 0)) for r in DROP_REASONS}


class TripTable:
    """Columnar store of trips; behaves as a sequence of ``TripRecord``."""

    def __init__(self, card_id, origin, entry_ts, destination, exit_ts):
        self.card_id = np.asarray(card_id, dtype=object)
        self.origin = np.asarray(origin, dtype=np.int64)
        self.entry_ts = np.asarray(entry_ts, dtype=np.int64)
        self.destination = np.asarray(destination, dtype=np.int64)
        self.exit_ts = np.asarray(exit_ts, dtype=np.int64)
        n = len(self.origin)
        for a in (self.card_id, self.entry_ts, self.destination, self.exit_ts):
            if len(a) != n:
                raise ValueError("trip columns must have equal length")

    def __len__(self) -> int:
        return len(self.origin)

    def __getitem__(self, k):
        if isinstance(k, (int, np.integer)):
            return TripRecord(
                str(self.card_id[k]),
                int(self.origin[k]),
                int(self.entry_ts[k]),
                int(self.destination[k]),
                int(self.exit_ts[k]),
            )
        return TripTable(
            self.card_id[k], self.origin[k], self.entry_ts[k], self.destination[k], self.exit_ts[k]
        )

    def __iter__(self) -> Iterator[TripRecord]:
        for k in range(len(self)):
            yield self[k]

    @property
    def duration(self) -> np.ndarray:
        return self.exit_ts - self.entry_ts

    @classmethod
    def from_records(cls, records: Iterable[TripRecord]) -> "TripTable":
        recs = list(records)
        return cls(
            [r.card_id for r in recs],
            [r.origin for r in recs],
            [r.entry_time for r in recs],
            [r.destination for r in recs],
            [r.exit_time for r in recs],
        )

    @classmethod
    def empty(cls) -> "TripTable":
        return cls([], [], [], [], [])

    def save(self, path) -> None:
        np.savez(
            path,
            card_id=self.card_id.astype(str),
            origin=self.origin,
            entry_ts=self.entry_ts,
            destination=self.destination,
            exit_ts=self.exit_ts,
        )

    @classmethod
    def load(cls, path) -> "TripTable":
        with np.load(path, allow_pickle=False) as z:
            return cls(z["card_id"], z["origin"], z["entry_ts"], z["destination"], z["exit_ts"])


def _entry_position(trips: TripTable, spec: NetworkSpec):
    """Day, slot and in-window mask of each trip's entry."""
    local = trips.entry_ts - spec.day_start_ts(0)
    day, sod = np.divmod(local, 86400)
    since_open = sod - spec.open_minutes * 60
    span = (spec.close_minutes - spec.open_minutes) * 60
    ok = (since_open >= 0) & (since_open < span) & (day >= 0)
    if spec.days is not None:
        ok &= day < spec.days
    slot = np.where(ok, since_open // spec.slot_seconds, -1)
    return day, slot, ok


def _exit_offset_slot(trips: TripTable, spec: NetworkSpec, day: np.ndarray) -> np.ndarray:
    """Slot index of each exit counted from the entry day's opening (may be >= T)."""
    return (trips.exit_ts - spec.open_ts(0) - day * 86400) // spec.slot_seconds


def parse_trips(stream, spec: NetworkSpec) -> tuple[TripTable, DropReport]:
    """Parse an AFC CSV (bytes, text, path or file object) into a trip table."""
    if isinstance(stream, (bytes, bytearray)):
        fh = io.StringIO(stream.decode("utf-8"))
    elif isinstance(stream, str):
        fh = io.StringIO(stream)
    elif isinstance(stream, Path):
        fh = open(stream, encoding="utf-8", newline="")
    elif isinstance(stream, (io.BufferedIOBase, io.RawIOBase)):
        fh = io.TextIOWrapper(stream, encoding="utf-8", newline="")
    else:
        fh = stream
    reader = csv.reader(fh)
    header = next(reader, None)
    if header is None or [h.strip() for h in header] != CSV_HEADER:
        raise MalformedHeader(f"expected header {','.join(CSV_HEADER)}, got {header}")

    report = DropReport()
    cards, origins, entries, dests, exits = [], [], [], [], []
    index = {sid: k for k, sid in enumerate(spec.station_ids)}
    for row in reader:
        if not row:
            continue
        if len(row) != 5:
            report.add("MalformedRow")
            continue
        card, o, ets, d, xts = row
        try:
            ets_i, xts_i = int(ets), int(xts)
        except ValueError:
            report.add("MalformedRow")
            continue
        oi, di = index.get(o), index.get(d)
        if oi is None or di is None:
            report.add("UnknownStation")
            continue
        if xts_i <= ets_i:
            report.add("NonPositiveDuration")
            continue
        cards.append(card)
        origins.append(oi)
        entries.append(ets_i)
        dests.append(di)
        exits.append(xts_i)
    if isinstance(stream, Path):
        fh.close()
    elif fh is not stream and isinstance(fh, io.TextIOWrapper):
        fh.detach()

    table = TripTable(cards, origins, entries, dests, exits)
    _, _, ok = _entry_position(table, spec)
    n_out = int((~ok).sum())
    if n_out:
        report.add("OutOfWindow", n_out)
        table = table[ok]
    return table, report


def write_trips_csv(trips: TripTable, spec: NetworkSpec, path) -> None:
    ids = spec.station_ids
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for card, o, e, d, x in zip(
            trips.card_id, trips.origin, trips.entry_ts, trips.destination, trips.exit_ts
        ):
            w.writerow([card, ids[o], int(e), ids[d], int(x)])


def build_full_od(trips: TripTable, spec: NetworkSpec, t: SlotIndex) -> OdMatrix:
    n = spec.n_stations
    day, slot, ok = _entry_position(trips, spec)
    sel = ok & (day == t.day) & (slot == t.slot)
    flat = np.bincount(trips.origin[sel] * n + trips.destination[sel], minlength=n * n)
    return OdMatrix(t, OdKind.FULL, flat.reshape(n, n).astype(np.float64))


class SlotCube:
    """Per-day count arrays from which every slot tensor is assembled.

    ``full[d, t]``   trips entering during slot t of day d (N x N)
    ``lagcum[d, t, g]`` of those, trips whose exit falls before slot t+g
    ``odt[d, t]``    trips exiting during slot t of day d, by origin
    """

    def __init__(self, trips: TripTable, spec: NetworkSpec, max_gap: int = 8, days: Optional[int] = None):
        self.spec = spec
        self.max_gap = max_gap
        n, T = spec.n_stations, spec.slots_per_day
        day, slot, ok = _entry_position(trips, spec)
        t = trips[ok]
        day, slot = day[ok], slot[ok]
        if days is None:
            days = spec.days if spec.days is not None else (int(day.max()) + 1 if len(day) else 0)
        self.days = days
        keep = day < days
        t, day, slot = t[keep], day[keep], slot[keep]
        exit_off = _exit_offset_slot(t, spec, day)
        lag = np.clip(exit_off - slot, 0, max_gap)
        o, dst = t.origin, t.destination
        L = max_gap + 1

        idx = (((day * T + slot) * L + lag) * n + o) * n + dst
        by_lag = np.bincount(idx, minlength=days * T * L * n * n).reshape(days, T, L, n, n)
        self.full = by_lag.sum(axis=2)
        # lagcum[..., g] counts lags < g
        self.lagcum = np.zeros_like(by_lag)
        np.cumsum(by_lag[:, :, :-1], axis=2, out=self.lagcum[:, :, 1:])

        in_win = exit_off < T
        idx2 = ((day[in_win] * T + exit_off[in_win]) * n + o[in_win]) * n + dst[in_win]
        self.odt = np.bincount(idx2, minlength=days * T * n * n).reshape(days, T, n, n)
        self.n_trips = len(t)

    def full_od(self, s: SlotIndex) -> np.ndarray:
        return self.full[s.day, s.slot].astype(np.float64)

    def finished_od(self, s: SlotIndex, target: SlotIndex) -> np.ndarray:
        if target.day != s.day:
            raise InsufficientHistory("finished matrices never span the overnight gap")
        g = target.slot - s.slot
        if g < 1:
            raise ValueError("finished OD needs an input slot strictly before the target")
        if g > self.max_gap:
            # beyond the tracked horizon: count lags explicitly tracked plus nothing else
            raise ValueError(f"gap {g} exceeds the cube horizon {self.max_gap}")
        return self.lagcum[s.day, s.slot, g].astype(np.float64)

    def odt_matrix(self, s: SlotIndex) -> np.ndarray:
        return self.odt[s.day, s.slot].astype(np.float64)

    def all_full(self, days: Sequence[int]) -> np.ndarray:
        return self.full[list(days)].astype(np.float64)


@dataclass
class SlotTensors:
    """Real-time observables for the P input slots preceding ``target``.

    Arrays are stacked oldest first: index k is slot t' - P + k.
    """

    target: SlotIndex
    finished: np.ndarray  # (P, N, N)
    inflow: np.ndarray  # (P, N)
    finished_inflow: np.ndarray  # (P, N)
    odt: np.ndarray  # (P, N, N)
    outflow: np.ndarray  # (P, N)

    @property
    def P(self) -> int:
        return self.finished.shape[0]

    @property
    def delayed_inflow(self) -> np.ndarray:
        return self.inflow - self.finished_inflow

    def input_slot(self, k: int) -> SlotIndex:
        return SlotIndex(self.target.day, self.target.slot - self.P + k)

    def finished_od(self, k: int) -> OdMatrix:
        return OdMatrix(self.input_slot(k), OdKind.FINISHED, self.finished[k], ref=self.target)

    def inflow_vector(self, k: int) -> FlowVector:
        return FlowVector(self.input_slot(k), FlowKind.INFLOW, self.inflow[k])

    def finished_inflow_vector(self, k: int) -> FlowVector:
        return FlowVector(
            self.input_slot(k), FlowKind.FINISHED_INFLOW, self.finished_inflow[k], ref=self.target
        )

    def outflow_vector(self, k: int) -> FlowVector:
        return FlowVector(self.input_slot(k), FlowKind.OUTFLOW, self.outflow[k])


def build_slot_tensors(
    source: Union[TripTable, SlotCube], spec: NetworkSpec, target: SlotIndex, P: int
) -> SlotTensors:
    if target.slot < P:
        raise InsufficientHistory(
            f"slot {target} has only {target.slot} same-day predecessors, need {P}"
        )
    cube = source if isinstance(source, SlotCube) else SlotCube(source, spec, max_gap=P, days=target.day + 1)
    d, s = target.day, target.slot
    slots = range(s - P, s)
    full = cube.full[d, s - P : s].astype(np.float64)
    finished = np.stack([cube.lagcum[d, t, s - t] for t in slots]).astype(np.float64)
    odt = cube.odt[d, s - P : s].astype(np.float64)
    return SlotTensors(
        target=target,
        finished=finished,
        inflow=full.sum(axis=2),
        finished_inflow=finished.sum(axis=2),
        odt=odt,
        outflow=odt.sum(axis=1),
    )


def completeness(finished: OdMatrix, full: OdMatrix) -> float:
    """Share of the slot's entering passengers that have already exited."""
    if finished.kind is not OdKind.FINISHED or full.kind is not OdKind.FULL:
        raise KindMismatch(f"need (finished, full), got ({finished.kind}, {full.kind})")
    if finished.slot != full.slot:
        raise KindMismatch("matrices refer to different slots")
    total = full.values.sum()
    done = finished.values.sum()
    if total == 0:
        return 1.0
    return float(done / total)


@dataclass
class TravelTimeStats:
    min_travel: int
    max_travel: int
    bin_seconds: int
    histogram: np.ndarray  # global counts per bin
    pair_histogram: np.ndarray  # (N, N, bins)
    quantiles: dict
    sorted_durations: np.ndarray

    def share_within(self, seconds: int) -> float:
        """Share of trips with duration <= ``seconds``."""
        n = len(self.sorted_durations)
        if n == 0:
            return float("nan")
        return float(np.searchsorted(self.sorted_durations, seconds, side="right") / n)

    def horizon_slots(self, granularity_minutes: int) -> int:
        """Smallest gap Q guaranteeing every trip has exited: floor(MAX/delta + 1)."""
        return int(self.max_travel // (granularity_minutes * 60) + 1)


def travel_time_stats(trips: TripTable, n_stations: int, bin_seconds: int = 60) -> TravelTimeStats:
    dur = trips.duration
    if len(dur) == 0:
        raise EmptyInput("no trips")
    bins = int(dur.max() // bin_seconds) + 1
    b = dur // bin_seconds
    hist = np.bincount(b, minlength=bins)
    pair = np.bincount(
        (trips.origin * n_stations + trips.destination) * bins + b,
        minlength=n_stations * n_stations * bins,
    ).reshape(n_stations, n_stations, bins)
    qs = {str(q): float(np.quantile(dur, q)) for q in (0.5, 0.9, 0.95, 0.99)}
    return TravelTimeStats(int(dur.min()), int(dur.max()), bin_seconds, hist, pair, qs, np.sort(dur))


def _ratio_with_fallback(total: np.ndarray, unfinished: np.ndarray) -> np.ndarray:
    """unfinished / total per (slot, gap, i, j), with pooled fallbacks.

    Pairs without history take the ratio pooled over all pairs of the same
    slot and gap; empty slots take the ratio pooled over every slot.
    """
    with np.errstate(invalid="ignore", divide="ignore"):
        ratio = unfinished / total[:, None]
        slot_pool = unfinished.sum(axis=(2, 3)) / total.sum(axis=(1, 2))[:, None]
        gap_pool = unfinished.sum(axis=(0, 2, 3)) / total.sum()
    slot_pool = np.where(np.isfinite(slot_pool), slot_pool, gap_pool[None, :])
    ratio = np.where(np.isfinite(ratio), ratio, slot_pool[:, :, None, None])
    return np.clip(ratio, 0.0, 1.0)


class DelayedRatioTable:
    """Historical delayed-ratio matrices indexed by (week class, slot, gap)."""

    def __init__(
        self,
        cube: SlotCube,
        history_days: Sequence[int],
        mode: str = "weekday_weekend",
    ):
        spec = cube.spec
        if len(history_days) == 0:
            raise EmptyHistory("delayed ratios need at least one historical day")
        self.mode = mode
        self.max_gap = cube.max_gap
        n_cls = 2 if mode == "weekday_weekend" else 7
        T, n = spec.slots_per_day, spec.n_stations
        G = cube.max_gap + 1
        total = np.zeros((n_cls, T, n, n))
        unfinished = np.zeros((n_cls, T, G, n, n))
        seen = np.zeros(n_cls, dtype=bool)
        for d in history_days:
            w = spec.week_attribute(d, mode)
            seen[w] = True
            total[w] += cube.full[d]
            unfinished[w] += cube.full[d][:, None] - cube.lagcum[d]
        if total.sum() == 0:
            raise EmptyHistory("historical days contain no trips")
        self.available = seen
        ratio = np.empty_like(unfinished, dtype=np.float64)
        for w in range(n_cls):
            if seen[w]:
                ratio[w] = _ratio_with_fallback(total[w], unfinished[w])
            else:
                # unseen day type borrows the pooled history of every seen class
                ratio[w] = _ratio_with_fallback(total[seen].sum(axis=0), unfinished[seen].sum(axis=0))
        self.ratio = ratio
        self.spec = spec

    def get(self, week_class: int, slot: int, gap: int) -> np.ndarray:
        if not 0 <= gap <= self.max_gap:
            raise ValueError(f"gap {gap} outside [0, {self.max_gap}]")
        return self.ratio[week_class, slot, gap]

    def for_day(self, day: int, slot: int, gap: int) -> np.ndarray:
        return self.get(self.spec.week_attribute(day, self.mode), slot, gap)


def build_delayed_ratio(
    history: Union[TripTable, SlotCube],
    spec: NetworkSpec,
    week_class: int,
    t: int,
    gap: int,
    history_days: Optional[Sequence[int]] = None,
    mode: str = "weekday_weekend",
) -> OdMatrix:
    cube = history if isinstance(history, SlotCube) else SlotCube(history, spec, max_gap=max(gap, 1))
    if history_days is None:
        history_days = range(cube.days)
    if cube.n_trips == 0:
        raise EmptyHistory("no historical trips")
    days = [d for d in history_days if spec.week_attribute(d, mode) == week_class]
    if not days:
        raise EmptyHistory(f"no historical day with week class {week_class}")
    table = DelayedRatioTable(cube, days, mode)
    return OdMatrix(SlotIndex(0, t), OdKind.DELAYED_RATIO, table.get(week_class, t, gap), ref=gap)


@dataclass(frozen=True)
class Normalizer:
    mean: float
    std: float

    @classmethod
    def fit(cls, values) -> "Normalizer":
        v = np.asarray(values, dtype=np.float64).ravel()
        if v.size == 0:
            raise EmptyInput("cannot fit a normalizer on no data")
        mean = float(v.mean())
        std = float(v.std())
        return cls(mean, std if std > 0 else 1.0)

    def apply(self, x):
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.std

    def invert(self, z):
        return np.asarray(z, dtype=np.float64) * self.std + self.mean

    def to_json(self) -> dict:
        return {"mean": self.mean, "std": self.std}

    @classmethod
    def from_json(cls, obj) -> "Normalizer":
        return cls(float(obj["mean"]), float(obj["std"]))


def fit_normalizer(values) -> Normalizer:
    return Normalizer.fit(values)


@dataclass
class Sample:
    target: SlotIndex
    inputs: SlotTensors
    delayed_ratio: np.ndarray  # (P, N, N), entry k for gap P - k
    week_class: int
    label: Optional[np.ndarray] = None  # M_{t'}
    truth_window: Optional[np.ndarray] = None  # true M_t for the P input slots


def split_days(n_days: int) -> tuple[list[int], list[int], list[int]]:
    """Chronological 70/10/20 split of day indices."""
    n_train = int(np.floor(0.7 * n_days))
    n_val = int(np.floor(0.1 * n_days))
    n_test = n_days - n_train - n_val
    if min(n_train, n_val, n_test) < 1:
        raise TooFewDays(f"{n_days} days cannot be split 70/10/20")
    days = list(range(n_days))
    return days[:n_train], days[n_train : n_train + n_val], days[n_train + n_val :]


def make_samples(
    cube: SlotCube, days: Sequence[int], P: int, ratios: DelayedRatioTable
) -> list[Sample]:
    spec = cube.spec
    T = spec.slots_per_day
    out = []
    for d in days:
        for s in range(P, T):
            target = SlotIndex(d, s)
            st = build_slot_tensors(cube, spec, target, P)
            mdr = np.stack([ratios.for_day(d, s - P + k, P - k) for k in range(P)])
            out.append(
                Sample(
                    target=target,
                    inputs=st,
                    delayed_ratio=mdr,
                    week_class=spec.week_attribute(d, ratios.mode),
                    label=cube.full_od(target),
                    truth_window=cube.full[d, s - P : s].astype(np.float64),
                )
            )
    return out


def split_and_window(
    cube: SlotCube, P: int = 8, Q: int = 5, mode: str = "weekday_weekend"
) -> tuple[list[Sample], list[Sample], list[Sample], DelayedRatioTable]:
    """Chronological day split, then sliding windows inside each day.

    Delayed ratios are estimated from the training days only.
    """
    if not 1 <= Q <= P:
        raise ValueError("need 1 <= Q <= P")
    if cube.max_gap < P:
        raise ValueError("slot cube horizon shorter than the window")
    train_d, val_d, test_d = split_days(cube.days)
    ratios = DelayedRatioTable(cube, train_d, mode)
    return (
        make_samples(cube, train_d, P, ratios),
        make_samples(cube, val_d, P, ratios),
        make_samples(cube, test_d, P, ratios),
        ratios,
    )


def write_tensor_cache(cube: SlotCube, out_dir) -> int:
    """Write one matrix file per (kind, slot); returns the file count."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    count = 0
    for d in range(cube.days):
        for s in range(cube.spec.slots_per_day):
            write_matrix(out / f"full_{d}_{s}.odm", cube.full[d, s])
            write_matrix(out / f"odt_{d}_{s}.odm", cube.odt[d, s])
            count += 2
    return count
