import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from odflow.core import KindMismatch, OdKind, OdMatrix, SlotIndex, make_network, slot_start_ts
from odflow.ingestion import (
    CSV_HEADER,
    DelayedRatioTable,
    EmptyHistory,
    EmptyInput,
    InsufficientHistory,
    MalformedHeader,
    Normalizer,
    SlotCube,
    TooFewDays,
    TripTable,
    build_delayed_ratio,
    build_full_od,
    build_slot_tensors,
    completeness,
    fit_normalizer,
    make_samples,
    parse_trips,
    split_and_window,
    split_days,
    travel_time_stats,
    write_trips_csv,
)

SPEC = make_network([(22.5, 114.0), (22.51, 114.0), (22.52, 114.0)], days=14)
HEADER = ",".join(CSV_HEADER) + "\n"


def at(day, slot, offset=0):
    return slot_start_ts(SlotIndex(day, slot), SPEC) + offset


def table(rows):
    """rows of (origin, entry_ts, destination, exit_ts)."""
    return TripTable([f"c{k}" for k in range(len(rows))], *zip(*rows)) if rows else TripTable.empty()


def random_trips(seed, n, days=3, max_minutes=90):
    r = np.random.default_rng(seed)
    day = r.integers(0, days, n)
    offset = r.integers(0, 16 * 3600, n)
    entry = np.array([SPEC.open_ts(int(d)) for d in day]) + offset
    dur = r.integers(60, max_minutes * 60, n)
    o = r.integers(0, 3, n)
    d = r.integers(0, 3, n)
    return TripTable([f"c{k}" for k in range(n)], o, entry, d, entry + dur)


# -- parsing ------------------------------------------------------------------------


def test_parse_one_valid_row():
    text = HEADER + f"card1,S000,{at(0, 0, 10)},S002,{at(0, 1, 10)}\n"
    trips, report = parse_trips(text, SPEC)
    assert len(trips) == 1 and report.total == 0
    rec = trips[0]
    assert (rec.origin, rec.destination, rec.card_id) == (0, 2, "card1")
    assert rec.duration == 900


def test_parse_drop_reasons():
    rows = [
        f"a,S000,{at(0, 0)},S001,{at(0, 0)}",  # zero duration
        f"b,S000,{at(0, 3)},S001,{at(0, 2)}",  # negative duration
        f"c,S009,{at(0, 0)},S001,{at(0, 2)}",  # unknown station
        f"d,S000,{at(0, 0) - 60},S001,{at(0, 2)}",  # enters before open
        "e,S000,notanumber,S001,5",
        "f,S000",
        f"g,S000,{at(0, 63, 800)},S001,{at(0, 63, 800) + 3600}",  # exits after close: kept
    ]
    trips, report = parse_trips((HEADER + "\n".join(rows) + "\n").encode(), SPEC)
    counts = report.to_json()
    assert counts == {"NonPositiveDuration": 2, "UnknownStation": 1, "OutOfWindow": 1, "MalformedRow": 2}
    assert len(trips) == 1 and trips[0].card_id == "g"


def test_parse_binary_handle_and_header():
    data = (HEADER + f"x,S001,{at(1, 5)},S000,{at(1, 7)}\n").encode()
    trips, _ = parse_trips(io.BytesIO(data), SPEC)
    assert len(trips) == 1
    with pytest.raises(MalformedHeader):
        parse_trips("card,o,e,d,x\n", SPEC)
    with pytest.raises(MalformedHeader):
        parse_trips("", SPEC)


def test_csv_round_trip(tmp_path):
    trips = random_trips(0, 50)
    write_trips_csv(trips, SPEC, tmp_path / "t.csv")
    back, report = parse_trips(tmp_path / "t.csv", SPEC)
    assert report.total == 0
    np.testing.assert_array_equal(back.entry_ts, trips.entry_ts)
    np.testing.assert_array_equal(back.destination, trips.destination)


def test_trip_table_save_load(tmp_path):
    trips = random_trips(1, 20)
    trips.save(tmp_path / "t.npz")
    back = TripTable.load(tmp_path / "t.npz")
    assert list(back) == list(trips)


# -- OD tensors ---------------------------------------------------------------------


def test_build_full_od_single_trip():
    t = SlotIndex(0, 4)
    trips = table([(1, at(0, 4, 30), 2, at(0, 6))])
    m = build_full_od(trips, SPEC, t)
    expected = np.zeros((3, 3))
    expected[1, 2] = 1
    np.testing.assert_array_equal(m.values, expected)
    assert m.kind is OdKind.FULL
    assert build_full_od(trips, SPEC, SlotIndex(0, 5)).values.sum() == 0


def test_finished_boundary_is_strict():
    # trip exiting during t'-1 is finished; exiting exactly at the start of t' is not
    trips = table([(0, at(0, 2, 5), 1, at(0, 9, 899)), (0, at(0, 2, 6), 1, at(0, 10, 0))])
    st_ = build_slot_tensors(trips, SPEC, SlotIndex(0, 10), P=8)
    k = 2 - (10 - 8)
    assert st_.finished[k][0, 1] == 1
    assert st_.inflow[k][0] == 2
    assert st_.finished_inflow[k][0] == 1
    assert st_.delayed_inflow[k][0] == 1


def test_insufficient_history():
    with pytest.raises(InsufficientHistory):
        build_slot_tensors(table([]), SPEC, SlotIndex(0, 7), P=8)


def test_odt_counts_exits_by_origin():
    trips = table([(0, at(0, 1, 10), 2, at(0, 3, 100)), (1, at(0, 3, 10), 2, at(0, 3, 500))])
    cube = SlotCube(trips, SPEC, max_gap=8)
    odt = cube.odt_matrix(SlotIndex(0, 3))
    assert odt[0, 2] == 1 and odt[1, 2] == 1 and odt.sum() == 2


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 300))
def test_partition_and_flow_identities(seed, n):
    trips = random_trips(seed, n)
    cube = SlotCube(trips, SPEC, max_gap=8)
    r = np.random.default_rng(seed)
    for _ in range(5):
        d = int(r.integers(0, 3))
        tp = int(r.integers(8, 64))
        target = SlotIndex(d, tp)
        st_ = build_slot_tensors(cube, SPEC, target, P=8)
        for k in range(8):
            s = SlotIndex(d, tp - 8 + k)
            full = cube.full_od(s)
            start = slot_start_ts(target, SPEC)
            entered = (trips.entry_ts >= slot_start_ts(s, SPEC)) & (trips.entry_ts < slot_start_ts(s, SPEC) + 900)
            delayed = np.zeros((3, 3))
            np.add.at(delayed, (trips.origin[entered & (trips.exit_ts >= start)], trips.destination[entered & (trips.exit_ts >= start)]), 1)
            np.testing.assert_array_equal(st_.finished[k] + delayed, full)
            np.testing.assert_array_equal(st_.finished[k].sum(axis=1), st_.finished_inflow[k])
            assert (st_.finished[k] <= full).all()
            assert (st_.delayed_inflow[k] >= 0).all()
            np.testing.assert_array_equal(st_.odt[k].sum(axis=0), st_.outflow[k])
    # every trip enters once; every trip exiting in-window is counted once in O
    in_window_exit = 0
    for tr in trips:
        day = (tr.entry_time - SPEC.day_start_ts(0)) // 86400
        in_window_exit += tr.exit_time < SPEC.open_ts(int(day)) + 64 * 900
    assert cube.full.sum() == n
    assert cube.odt.sum() == in_window_exit


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_completeness_monotone_in_reference(seed):
    trips = random_trips(seed, 200, max_minutes=50)
    cube = SlotCube(trips, SPEC, max_gap=8)
    d, s = 0, 20
    full = OdMatrix(SlotIndex(d, s), OdKind.FULL, cube.full_od(SlotIndex(d, s)))
    values = []
    for g in range(1, 9):
        mf = OdMatrix(SlotIndex(d, s), OdKind.FINISHED, cube.finished_od(SlotIndex(d, s), SlotIndex(d, s + g)))
        values.append(completeness(mf, full))
    assert all(a <= b for a, b in zip(values, values[1:]))
    # trips last under 50 min, so a gap of 5 slots leaves nothing in flight
    assert values[4] == 1.0


def test_completeness_examples():
    s = SlotIndex(0, 0)
    m = OdMatrix(s, OdKind.FULL, np.array([[2.0, 0], [1, 1]]))
    assert completeness(OdMatrix(s, OdKind.FINISHED, m.values), m) == 1.0
    assert completeness(OdMatrix(s, OdKind.FINISHED, np.zeros((2, 2))), m) == 0.0
    z = OdMatrix(s, OdKind.FULL, np.zeros((2, 2)))
    assert completeness(OdMatrix(s, OdKind.FINISHED, np.zeros((2, 2))), z) == 1.0
    with pytest.raises(KindMismatch):
        completeness(m, m)


def test_completeness_half_from_generated_trips(small_synth, small_cube):
    # find a slot where exactly half of the entering trips have finished by some t'
    o = small_synth.oracle
    found = False
    for d in range(small_cube.days):
        for s in range(56):
            for g in range(1, 5):
                t, tp = SlotIndex(d, s), SlotIndex(d, s + g)
                total = o.full(t).sum()
                if total and 2 * o.finished(t, tp).sum() == total:
                    mf = OdMatrix(t, OdKind.FINISHED, small_cube.finished_od(t, tp))
                    assert completeness(mf, OdMatrix(t, OdKind.FULL, small_cube.full_od(t))) == 0.5
                    found = True
                    break
            if found:
                break
        if found:
            break
    assert found


def test_travel_time_stats():
    trips = table([(0, at(0, 0), 1, at(0, 0) + 600), (0, at(0, 1), 1, at(0, 1) + 3000)])
    stats = travel_time_stats(trips, 3)
    assert (stats.min_travel, stats.max_travel) == (600, 3000)
    assert stats.share_within(3600) == 1.0
    assert stats.share_within(600) == 0.5


# -- delayed ratios -------------------------------------------------------------------


def test_delayed_ratio_all_finished_and_none_finished():
    # history on weekdays 0,1 (Thu, Fri); slot 10, gap 2
    short = table([(0, at(d, 10, 5), 1, at(d, 10, 65)) for d in (0, 1)])
    r = build_delayed_ratio(short, SPEC, week_class=0, t=10, gap=2)
    assert r.values[0, 1] == 0.0
    long = table([(0, at(d, 10, 5), 1, at(d, 13, 0)) for d in (0, 1)])
    r = build_delayed_ratio(long, SPEC, week_class=0, t=10, gap=2)
    assert r.values[0, 1] == 1.0
    assert r.kind is OdKind.DELAYED_RATIO


def test_delayed_ratio_three_of_four():
    rows = [(0, at(0, 10, 5), 1, at(0, 12, 100 * k)) for k in range(3)]  # still travelling at slot 12
    rows.append((0, at(1, 10, 5), 1, at(1, 11, 10)))  # finished before slot 12
    r = build_delayed_ratio(table(rows), SPEC, week_class=0, t=10, gap=2)
    assert r.values[0, 1] == pytest.approx(0.75, abs=0)
    # pairs with no history take the ratio pooled over the slot's pairs
    assert r.values[2, 0] == pytest.approx(0.75, abs=0)


def test_delayed_ratio_empty_history():
    with pytest.raises(EmptyHistory):
        build_delayed_ratio(table([]), SPEC, 0, 10, 2)
    weekend_only = table([(0, at(2, 10), 1, at(2, 12))])  # day 2 is a Saturday
    with pytest.raises(EmptyHistory):
        build_delayed_ratio(weekend_only, SPEC, 0, 10, 2)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000))
def test_delayed_ratio_in_unit_interval(seed):
    cube = SlotCube(random_trips(seed, 150, days=4), SPEC, max_gap=8)
    table_ = DelayedRatioTable(cube, range(4))
    assert (table_.ratio >= 0).all() and (table_.ratio <= 1).all()


# -- normalizer and splits --------------------------------------------------------------


def test_normalizer_examples():
    n = fit_normalizer([0.0, 2.0])
    assert (n.mean, n.std) == (1.0, 1.0)
    assert n.apply(2.0) == 1.0
    c = Normalizer.fit([3.0, 3.0, 3.0])
    assert c.std == 1.0 and c.apply(3.0) == 0.0
    with pytest.raises(EmptyInput):
        Normalizer.fit([])
    assert Normalizer.from_json(n.to_json()) == n


@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=50))
def test_normalizer_inverse(xs):
    n = Normalizer.fit(xs)
    x = np.asarray(xs)
    np.testing.assert_allclose(n.invert(n.apply(x)), x, rtol=0, atol=1e-12 * max(1.0, np.abs(x).max()))


def test_split_days():
    tr, va, te = split_days(30)
    assert (len(tr), len(va), len(te)) == (21, 3, 6)
    assert tr[-1] + 1 == va[0] and va[-1] + 1 == te[0]
    with pytest.raises(TooFewDays):
        split_days(5)


def test_split_and_window(small_cube):
    small_cube_days = small_cube.days
    with pytest.raises(TooFewDays):
        split_and_window(small_cube)
    cube = SlotCube(random_trips(3, 3000, days=10), SPEC, max_gap=8, days=10)
    train, val, test, ratios = split_and_window(cube, P=8, Q=5)
    assert len(train) == 7 * 56 and len(val) == 1 * 56 and len(test) == 2 * 56
    assert train[0].target == SlotIndex(0, 8)
    for sm in train[:60]:
        assert sm.label.sum() == cube.full_od(sm.target).sum()
        first = sm.inputs.input_slot(0)
        assert first.day == sm.target.day and first.slot >= 0
        np.testing.assert_array_equal(sm.delayed_ratio[3], ratios.for_day(sm.target.day, sm.target.slot - 5, 5))
    assert small_cube_days == 8
