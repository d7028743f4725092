import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from odflow.core import make_network
from odflow.graphs import (
    StaticGraphs,
    build_geo_graph,
    build_profiles,
    build_static_graphs,
    geo_distance,
    haversine_km,
    kl_matrix,
    kl_similarity,
    profiles_from_counts,
)
from odflow.ingestion import EmptyHistory, SlotCube
from odflow.synth import SynthConfig, generate


def test_haversine_one_degree_latitude():
    # independent closed form: arc length of 1 degree on a 6371 km sphere
    assert haversine_km(0.0, 0.0, 1.0, 0.0) == pytest.approx(2 * math.pi * 6371 / 360, rel=1e-12)
    assert haversine_km(0.0, 0.0, 1.0, 0.0) == pytest.approx(111.19492664455873, rel=1e-12)


def test_geo_distance_properties():
    spec = make_network([(22.5, 114.0), (22.5, 114.0), (22.6, 114.2), (22.4, 113.9)])
    d = geo_distance(spec)
    assert (np.diag(d) == 0).all()
    np.testing.assert_array_equal(d, d.T)
    assert d[0, 1] == 0.0


def test_kernel_units_and_threshold(line_network):
    # spacing ~1.112 km: neighbors at 1 hop only with D=1.5
    g = build_geo_graph(line_network, 1.5)
    hop = g.distance[0, 1]
    assert g.distance[0, 2] > 1.5 > hop
    assert g.neighbors.sum() == 4
    # all neighbor distances equal -> zero spread -> bandwidth falls back to D
    assert g.sigma == 1.5
    assert g.kernel[0, 2] == 0.0
    assert g.kernel[0, 1] == pytest.approx(math.exp(-(hop**2) / g.sigma**2))
    np.testing.assert_array_equal(np.diag(g.kernel), 1.0)


def test_kernel_at_sigma_is_inverse_e():
    # distances 1 and 3 km from the middle station: std of {1,1,3,3} is 1
    spec = make_network([(0.0, 0.0), (1 / 111.19492664455873, 0.0), (-3 / 111.19492664455873, 0.0)])
    g = build_geo_graph(spec, 3.5)
    nb = g.distance[g.neighbors]
    assert g.sigma == pytest.approx(np.std(nb))
    d = g.distance / g.sigma
    i, j = np.unravel_index(np.argmin(np.abs(d - 1) + np.eye(3) * 9), d.shape)
    assert g.kernel[i, j] == pytest.approx(math.exp(-d[i, j] ** 2))


def test_no_neighbors_falls_back_to_radius():
    spec = make_network([(0.0, 0.0), (1.0, 0.0)])
    g = build_geo_graph(spec, 2.0)
    assert g.sigma == 2.0
    np.testing.assert_array_equal(g.kernel, np.eye(2))
    with pytest.raises(ValueError):
        build_geo_graph(spec, 0.0)


coords = st.lists(st.tuples(st.floats(22.4, 22.6), st.floats(113.9, 114.1)), min_size=2, max_size=8)


@settings(max_examples=40, deadline=None)
@given(coords, st.floats(0.1, 10.0))
def test_kernel_invariants(pts, radius):
    g = build_geo_graph(make_network(pts), radius)
    k = g.kernel
    assert ((k >= 0) & (k <= 1)).all()
    np.testing.assert_array_equal(k, k.T)
    np.testing.assert_array_equal(np.diag(k), 1.0)
    off = ~np.eye(len(pts), dtype=bool)
    # sparsity pattern: zero beyond the radius; positive inside unless it underflows
    assert (k[off & (g.distance > radius)] == 0).all()
    inside = off & (g.distance <= radius)
    expected = np.exp(-(g.distance**2) / g.sigma**2)
    np.testing.assert_allclose(k[inside], expected[inside], rtol=1e-12)


def test_kl_hand_pair():
    p, q = np.array([0.9, 0.1]), np.array([0.5, 0.5])
    # direct summation
    kl_pq = 0.9 * math.log(0.9 / 0.5) + 0.1 * math.log(0.1 / 0.5)
    kl_qp = 0.5 * math.log(0.5 / 0.9) + 0.5 * math.log(0.5 / 0.1)
    assert kl_pq == pytest.approx(0.368064, abs=1e-6)
    kl = kl_matrix(np.stack([p, q]))
    assert kl[0, 1] == pytest.approx(kl_pq, rel=1e-12)
    assert kl[1, 0] == pytest.approx(kl_qp, rel=1e-12)
    si, so = kl_similarity(profiles_from_counts(np.stack([p, q]), np.stack([q, q]), epsilon=0.0))
    assert si[0, 1] == pytest.approx(1 - kl_pq, rel=1e-12)
    assert si[0, 1] != si[1, 0]
    assert so[0, 1] == 1.0


def test_profile_smoothing_examples():
    counts = np.zeros((1, 64))
    counts[0, 10] = 500
    prof = profiles_from_counts(counts, counts)
    assert prof.inflow[0, 10] == pytest.approx((500 + 1e-6) / (500 + 64e-6), rel=1e-12)
    assert prof.inflow[0, 10] == pytest.approx(1.0, abs=1e-6)
    assert prof.inflow[0, 0] == pytest.approx(1e-6 / (500 + 64e-6), rel=1e-12)
    uni = profiles_from_counts(np.full((2, 64), 7.0), np.ones((2, 64)))
    np.testing.assert_allclose(uni.inflow, 1 / 64, rtol=1e-12)


@settings(max_examples=40, deadline=None)
@given(
    arrays(np.float64, (4, 12), elements=st.floats(0, 1e4)),
    st.floats(0.01, 100.0),
)
def test_similarity_properties(counts, scale):
    prof = profiles_from_counts(counts, counts[::-1])
    np.testing.assert_allclose(prof.inflow.sum(axis=1), 1.0, rtol=0, atol=1e-12)
    assert (prof.inflow > 0).all()
    si, so = kl_similarity(prof)
    np.testing.assert_array_equal(np.diag(si), 1.0)
    np.testing.assert_array_equal(np.diag(so), 1.0)
    assert (si <= 1 + 1e-12).all()
    # without smoothing, scaling a station's counts leaves SI exactly scale-free
    positive = counts + 1.0
    scaled = positive.copy()
    scaled[0] *= scale
    a, _ = kl_similarity(profiles_from_counts(positive, positive, epsilon=0.0))
    b, _ = kl_similarity(profiles_from_counts(scaled, positive, epsilon=0.0))
    np.testing.assert_allclose(a, b, rtol=1e-9, atol=1e-9)


def test_scale_free_with_smoothing():
    r = np.random.default_rng(0)
    counts = r.integers(1, 100, (3, 64)).astype(float)
    scaled = counts.copy()
    scaled[1] *= 10
    a, _ = kl_similarity(profiles_from_counts(counts, counts))
    b, _ = kl_similarity(profiles_from_counts(scaled, counts))
    np.testing.assert_allclose(a, b, atol=1e-6)


def test_build_profiles_and_empty_history(small_cube):
    prof = build_profiles(small_cube, range(small_cube.days), 0)
    np.testing.assert_allclose(prof.inflow.sum(axis=1), 1.0, atol=1e-12)
    weekends = [d for d in range(small_cube.days) if small_cube.spec.week_attribute(d) == 1]
    with pytest.raises(EmptyHistory):
        build_profiles(small_cube, weekends, 0)


def test_static_graphs_round_trip(small_cube, tmp_path):
    g = build_static_graphs(small_cube, range(6))
    assert g.si.shape == (2, 5, 5)
    g.save(tmp_path / "graphs")
    back = StaticGraphs.load(tmp_path / "graphs")
    np.testing.assert_array_equal(back.geo.kernel, g.geo.kernel)
    np.testing.assert_array_equal(back.si, g.si)
    np.testing.assert_array_equal(back.so, g.so)
    assert back.geo.sigma == g.geo.sigma and back.mode == g.mode


def test_function_profile_separation():
    cfg = SynthConfig(seed=5, n_stations=9, days=7, daily_entries=3000.0)
    res = generate(cfg)
    cube = SlotCube(res.trips, res.spec, max_gap=8)
    fns = cfg.functions()
    si, _ = kl_similarity(build_profiles(cube, range(7), 0))
    same, cross = [], []
    for i in range(9):
        for j in range(9):
            if i != j:
                (same if fns[i] == fns[j] else cross).append(si[i, j])
    assert len(same) and len(cross)
    assert np.mean(same) > np.mean(cross)
    # the best business-business pair beats every business-residential pair
    biz = [i for i in range(9) if fns[i] == "business"]
    res_ = [i for i in range(9) if fns[i] == "residential"]
    if len(biz) >= 2 and res_:
        bb = max(si[i, j] for i in biz for j in biz if i != j)
        br = max(si[i, j] for i in biz for j in res_)
        assert bb > br
