"""Static station relations: geographic proximity and flow-profile similarity."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import NetworkSpec
from .ingestion import EmptyHistory, SlotCube
from .io import read_matrix, write_matrix

EARTH_RADIUS_KM = 6371.0
DEFAULT_RADIUS_KM = 2.0
PROFILE_EPSILON = 1e-6


def haversine_km(lat1, lon1, lat2, lon2) -> np.ndarray:
    p1, p2 = np.radians(lat1), np.radians(lat2)
    dphi = p2 - p1
    dlmb = np.radians(lon2) - np.radians(lon1)
    a = np.sin(dphi / 2) ** 2 + np.cos(p1) * np.cos(p2) * np.sin(dlmb / 2) ** 2
    return 2 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(np.clip(a, 0.0, 1.0)))


def geo_distance(spec: NetworkSpec) -> np.ndarray:
    lat = np.array([s.latitude for s in spec.stations])
    lon = np.array([s.longitude for s in spec.stations])
    d = haversine_km(lat[:, None], lon[:, None], lat[None, :], lon[None, :])
    d = 0.5 * (d + d.T)
    np.fill_diagonal(d, 0.0)
    return d


@dataclass
class GeoGraph:
    distance: np.ndarray
    radius_km: float
    sigma: float
    kernel: np.ndarray

    @property
    def neighbors(self) -> np.ndarray:
        """Boolean N x N neighborhood (diagonal excluded)."""
        mask = self.distance <= self.radius_km
        np.fill_diagonal(mask, False)
        return mask


def build_geo_graph(spec: NetworkSpec, radius_km: float = DEFAULT_RADIUS_KM) -> GeoGraph:
    """Thresholded Gaussian kernel over great-circle distances.

    The bandwidth is the standard deviation of all neighbor distances; when
    no station has a neighbor, or that spread is zero, it falls back to the
    radius itself.
    """
    if radius_km <= 0:
        raise ValueError("radius must be positive")
    dist = geo_distance(spec)
    nb = dist <= radius_km
    np.fill_diagonal(nb, False)
    nb_d = dist[nb]
    sigma = float(nb_d.std()) if nb_d.size else 0.0
    # equal neighbor distances give a std that is zero up to rounding
    if sigma <= 1e-9 * radius_km:
        sigma = float(radius_km)
    kernel = np.where(nb, np.exp(-(dist**2) / sigma**2), 0.0)
    np.fill_diagonal(kernel, 1.0)
    return GeoGraph(dist, float(radius_km), sigma, kernel)


@dataclass
class FlowProfiles:
    inflow: np.ndarray  # (N, T), rows sum to 1
    outflow: np.ndarray  # (N, T)
    week_class: int
    epsilon: float


def profiles_from_counts(inflow_counts, outflow_counts, week_class: int = 0, epsilon: float = PROFILE_EPSILON) -> FlowProfiles:
    def norm(c):
        c = np.asarray(c, dtype=np.float64) + epsilon
        return c / c.sum(axis=1, keepdims=True)

    return FlowProfiles(norm(inflow_counts), norm(outflow_counts), week_class, epsilon)


def build_profiles(
    cube: SlotCube,
    history_days: Sequence[int],
    week_class: int,
    mode: str = "weekday_weekend",
    epsilon: float = PROFILE_EPSILON,
) -> FlowProfiles:
    """Daily inflow/outflow shape of each station over days of one week class."""
    spec = cube.spec
    days = [d for d in history_days if spec.week_attribute(d, mode) == week_class]
    if not days:
        raise EmptyHistory(f"no historical day with week class {week_class}")
    full = cube.full[days]  # (D, T, N, N)
    odt = cube.odt[days]
    inflow = full.sum(axis=(0, 3)).T  # (N, T)
    outflow = odt.sum(axis=(0, 2)).T
    return profiles_from_counts(inflow, outflow, week_class, epsilon)


def kl_matrix(profiles: np.ndarray) -> np.ndarray:
    """KL(p_i || p_j) for every pair of rows, natural log."""
    p = np.asarray(profiles, dtype=np.float64)
    logp = np.log(p)
    return (p[:, None, :] * (logp[:, None, :] - logp[None, :, :])).sum(axis=2)


def kl_similarity(profiles: FlowProfiles) -> tuple[np.ndarray, np.ndarray]:
    si = 1.0 - kl_matrix(profiles.inflow)
    so = 1.0 - kl_matrix(profiles.outflow)
    np.fill_diagonal(si, 1.0)
    np.fill_diagonal(so, 1.0)
    return si, so


@dataclass
class StaticGraphs:
    """Geographic kernel plus one (SI, SO) pair per week class."""

    geo: GeoGraph
    si: np.ndarray  # (C, N, N)
    so: np.ndarray  # (C, N, N)
    mode: str
    epsilon: float

    def save(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_matrix(out / "geo_kernel.odm", self.geo.kernel)
        write_matrix(out / "geo_distance.odm", self.geo.distance)
        for c in range(self.si.shape[0]):
            write_matrix(out / f"si_{c}.odm", self.si[c])
            write_matrix(out / f"so_{c}.odm", self.so[c])
        meta = {
            "D": self.geo.radius_km,
            "sigma": self.geo.sigma,
            "epsilon": self.epsilon,
            "week_attribute": self.mode,
            "classes": int(self.si.shape[0]),
        }
        (out / "graphs.json").write_text(json.dumps(meta, indent=2), encoding="utf-8")

    @classmethod
    def load(cls, out_dir) -> "StaticGraphs":
        out = Path(out_dir)
        meta = json.loads((out / "graphs.json").read_text(encoding="utf-8"))
        geo = GeoGraph(
            read_matrix(out / "geo_distance.odm"), meta["D"], meta["sigma"], read_matrix(out / "geo_kernel.odm")
        )
        c = meta["classes"]
        si = np.stack([read_matrix(out / f"si_{k}.odm") for k in range(c)])
        so = np.stack([read_matrix(out / f"so_{k}.odm") for k in range(c)])
        return cls(geo, si, so, meta["week_attribute"], meta["epsilon"])


def build_static_graphs(
    cube: SlotCube,
    history_days: Sequence[int],
    radius_km: float = DEFAULT_RADIUS_KM,
    mode: str = "weekday_weekend",
    epsilon: float = PROFILE_EPSILON,
) -> StaticGraphs:
    spec = cube.spec
    geo = build_geo_graph(spec, radius_km)
    n_cls = 2 if mode == "weekday_weekend" else 7
    present = sorted({spec.week_attribute(d, mode) for d in history_days})
    if not present:
        raise EmptyHistory("no history for functional similarity")
    sims = {}
    for c in present:
        sims[c] = kl_similarity(build_profiles(cube, history_days, c, mode, epsilon))
    # a class never observed in history reuses profiles pooled over all days
    if len(present) < n_cls:
        full = cube.full[list(history_days)]
        odt = cube.odt[list(history_days)]
        pooled = kl_similarity(
            profiles_from_counts(full.sum(axis=(0, 3)).T, odt.sum(axis=(0, 2)).T, -1, epsilon)
        )
    si = np.stack([sims[c][0] if c in sims else pooled[0] for c in range(n_cls)])
    so = np.stack([sims[c][1] if c in sims else pooled[1] for c in range(n_cls)])
    return StaticGraphs(geo, si, so, mode, epsilon)
