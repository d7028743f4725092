import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from odflow.core import (
    FlowKind,
    FlowVector,
    KindMismatch,
    NegativeGap,
    NetworkSpec,
    OdKind,
    OdMatrix,
    OutOfPeriod,
    OutOfWindow,
    ShapeMismatch,
    SlotIndex,
    Station,
    delayed_inflow,
    load_network_spec,
    make_network,
    save_network_spec,
    slot_gap,
    slot_of,
    slot_start_ts,
)

SPEC = make_network([(22.5, 114.0), (22.6, 114.1)], days=10)


def ts(day, hh, mm, ss=0):
    return SPEC.day_start_ts(day) + hh * 3600 + mm * 60 + ss


def test_window_shape():
    assert SPEC.slots_per_day == 64
    assert SPEC.slot_seconds == 900
    assert SPEC.station_index("S001") == 1


def test_slot_of_window_edges():
    assert slot_of(ts(0, 7, 0), SPEC) == SlotIndex(0, 0)
    assert slot_of(ts(0, 22, 59), SPEC) == SlotIndex(0, 63)
    with pytest.raises(OutOfWindow):
        slot_of(ts(0, 6, 59), SPEC)
    with pytest.raises(OutOfWindow):
        slot_of(ts(0, 23, 0), SPEC)
    with pytest.raises(OutOfPeriod):
        slot_of(ts(10, 8, 0), SPEC)
    with pytest.raises(OutOfPeriod):
        slot_of(ts(-1, 8, 0), SPEC)


def test_slot_gap_examples():
    assert slot_gap(SlotIndex(0, 5), SlotIndex(0, 8)) == 3
    assert slot_gap(SlotIndex(0, 63), SlotIndex(1, 0)) == 1
    with pytest.raises(NegativeGap):
        slot_gap(SlotIndex(0, 8), SlotIndex(0, 5))


def test_slot_index_order_and_text():
    assert SlotIndex(0, 63) < SlotIndex(1, 0)
    assert SlotIndex(2, 5).successor(64) == SlotIndex(2, 6)
    assert SlotIndex(2, 63).successor(64) == SlotIndex(3, 0)
    assert SlotIndex.parse("4:17") == SlotIndex(4, 17)
    assert str(SlotIndex(4, 17)) == "4:17"


slots = st.builds(SlotIndex, st.integers(0, 9), st.integers(0, 63))


@given(slots)
def test_slot_start_round_trip(s):
    assert slot_of(slot_start_ts(s, SPEC), SPEC) == s


@given(st.integers(0, 9), st.integers(0, 16 * 3600 - 1), st.integers(0, 16 * 3600 - 1))
def test_slot_of_monotone(day, a, b):
    lo, hi = sorted((a, b))
    t0 = SPEC.open_ts(day)
    assert slot_of(t0 + lo, SPEC) <= slot_of(t0 + hi, SPEC)


@given(st.lists(st.integers(0, 640), min_size=3, max_size=3))
def test_slot_gap_additive(ks):
    a, b, c = (SlotIndex.from_linear(k, 64) for k in sorted(ks))
    assert slot_gap(a, c) == slot_gap(a, b) + slot_gap(b, c)


def test_spec_validation():
    with pytest.raises(ValueError):
        NetworkSpec(stations=(Station("A", 0, 0), Station("A", 1, 1)))
    with pytest.raises(ValueError):
        NetworkSpec(stations=(Station("A", 95, 0),))
    with pytest.raises(ValueError):
        NetworkSpec(stations=(Station("A", 0, 0),), open_minutes=420, close_minutes=1381)


def test_spec_json_round_trip(tmp_path):
    path = tmp_path / "spec.json"
    save_network_spec(SPEC, path)
    raw = json.loads(path.read_text())
    assert raw["open"] == "07:00" and raw["close"] == "23:00"
    assert raw["stations"][0] == {"id": "S000", "lat": 22.5, "lon": 114.0}
    assert load_network_spec(path) == SPEC


def test_week_attribute():
    # 2014-05-01 was a Thursday
    assert SPEC.weekday(0) == 3
    assert [SPEC.week_attribute(d) for d in range(4)] == [0, 0, 1, 1]
    assert SPEC.week_attribute(2, "day_of_week") == 5


def test_od_matrix_validation():
    s = SlotIndex(0, 0)
    with pytest.raises(ShapeMismatch):
        OdMatrix(s, OdKind.FULL, np.zeros((2, 3)))
    with pytest.raises(ValueError):
        OdMatrix(s, OdKind.FULL, -np.ones((2, 2)))
    with pytest.raises(ValueError):
        OdMatrix(s, OdKind.DELAYED_PROBABILITY, np.array([[0.5, 0.4], [0.0, 0.0]]))
    with pytest.raises(ValueError):
        OdMatrix(s, OdKind.DELAYED_RATIO, np.array([[1.5, 0], [0, 0]]))
    m = OdMatrix(s, OdKind.PROBABILITY, np.array([[0.5, 0.5], [0.0, 0.0]]))
    with pytest.raises(ValueError):
        m.values[0, 0] = 1.0


def test_delayed_inflow_vector():
    s = SlotIndex(0, 3)
    i = FlowVector(s, FlowKind.INFLOW, np.array([5.0, 2.0]))
    f = FlowVector(s, FlowKind.FINISHED_INFLOW, np.array([3.0, 2.0]))
    d = delayed_inflow(i, f)
    assert d.kind is FlowKind.DELAYED_INFLOW
    np.testing.assert_array_equal(d.values, [2.0, 0.0])
    with pytest.raises(ValueError):
        delayed_inflow(f, i)
