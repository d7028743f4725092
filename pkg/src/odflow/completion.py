"""Reconstruct full OD matrices for the still-incomplete recent input slots.

Slots at least Q slots before the target are taken as complete. The Q - 1
most recent slots are filled in one at a time, oldest first: an estimator
network predicts each slot's OD pattern from the K preceding (already
completed) matrices, the historical delayed ratio reweights that pattern
towards pairs that are likely still travelling, and the resulting
destination distribution spreads the known delayed inflow over the row.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .autodiff import no_grad
from .core import OdflowError, OdKind, OdMatrix, ShapeMismatch, SlotIndex
from .graphs import StaticGraphs
from .ingestion import Normalizer, SlotCube, SlotTensors
from .io import write_matrix
from .model import Batch, ModelConfig, ModelParams, ahgcsp_forward
from .training import ArrayDataset, EmptyTrainingSet, TrainLog, TrainSchedule, train

PRIOR = "PriorPassthrough"
ESTIMATED = "Estimated"
OBSERVED = "ObservedComplete"


class NegativeDelayedInflow(OdflowError):
    pass


class SharedParameters(OdflowError):
    pass


@dataclass(frozen=True)
class Provenance:
    kind: str
    gap: Optional[int] = None

    def __str__(self) -> str:
        return f"{self.kind}({self.gap})" if self.kind == ESTIMATED else self.kind


@dataclass
class Estimator:
    """A trained estimator network with what it needs to run on raw counts."""

    params: ModelParams
    normalizer: Normalizer
    graphs: StaticGraphs

    def predict_counts(self, window: np.ndarray, odt: np.ndarray, week_class: np.ndarray) -> np.ndarray:
        """(B, K, N, N) windows in counts -> (B, N, N) nonnegative count predictions."""
        n = self.normalizer
        wc = np.asarray(week_class)
        batch = Batch(n.apply(window), n.apply(odt), self.graphs.si[wc], self.graphs.so[wc], self.graphs.geo.kernel)
        with no_grad():
            z = ahgcsp_forward(batch, self.params).data
        return np.maximum(n.invert(z), 0.0)


@dataclass
class CompletionConfig:
    P: int = 8
    Q: int = 5
    estimator: Optional[Estimator] = None
    mdp_source: str = "estimated"

    def __post_init__(self):
        if not 1 <= self.Q <= self.P:
            raise ValueError("need 1 <= Q <= P")
        if self.mdp_source not in ("estimated", "weekly"):
            raise ValueError(f"unknown mdp source {self.mdp_source!r}")

    @property
    def K(self) -> int:
        return self.P - self.Q + 1

    def check_distinct(self, predictor: ModelParams) -> None:
        if self.estimator is None:
            return
        mine = {id(t) for t in self.estimator.params.tensors.values()}
        if self.estimator.params is predictor or mine & {id(t) for t in predictor.tensors.values()}:
            raise SharedParameters("estimator and predictor must not share parameters")


@dataclass
class CompletedWindow:
    target: SlotIndex
    matrices: np.ndarray  # (P, N, N), oldest first
    provenance: list = field(default_factory=list)

    def slot(self, k: int) -> SlotIndex:
        P = self.matrices.shape[0]
        return SlotIndex(self.target.day, self.target.slot - P + k)

    def counts(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for p in self.provenance:
            if p is not None:
                out[p.kind] = out.get(p.kind, 0) + 1
        return out

    def export(self, out_dir) -> Path:
        """One matrix file per slot plus a JSON sidecar with provenance tags."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        entries = []
        for k in range(self.matrices.shape[0]):
            s = self.slot(k)
            name = f"completed_{s.day}_{s.slot}.odm"
            write_matrix(out / name, self.matrices[k])
            entries.append({"slot": str(s), "file": name, "provenance": str(self.provenance[k])})
        sidecar = out / f"completed_{self.target.day}_{self.target.slot}.json"
        with open(sidecar, "w", encoding="utf-8") as fh:
            json.dump({"target": str(self.target), "slots": entries}, fh, indent=1)
        return sidecar


# -- algebra --------------------------------------------------------------------------


def _row_normalize(x: np.ndarray) -> np.ndarray:
    s = x.sum(axis=-1, keepdims=True)
    return np.divide(x, s, out=np.zeros_like(x, dtype=np.float64), where=s > 0)


def mdp_from_prediction(pred: np.ndarray, mdr: np.ndarray) -> np.ndarray:
    """f_N(f_N(pred) * mdr), with rows whose product vanishes falling back to f_N(pred)."""
    pred = np.asarray(pred, dtype=np.float64)
    mdr = np.asarray(mdr, dtype=np.float64)
    if pred.shape != mdr.shape or pred.shape[-1] != pred.shape[-2]:
        raise ShapeMismatch(f"prediction {pred.shape} vs ratio {mdr.shape}")
    if (pred < 0).any() or (mdr < 0).any():
        raise ValueError("predictions and ratios must be nonnegative")
    inner = _row_normalize(pred)
    prod = inner * mdr
    outer = _row_normalize(prod)
    dead = prod.sum(axis=-1, keepdims=True) == 0
    return np.where(dead, inner, outer)


def estimate_mdp(
    window: np.ndarray,
    odt: np.ndarray,
    mdr: np.ndarray,
    estimator: Estimator,
    week_class: int,
    slot: Optional[SlotIndex] = None,
    gap: Optional[int] = None,
) -> OdMatrix:
    """Delayed-probability estimate for one slot from its K predecessors."""
    window = np.asarray(window, dtype=np.float64)
    if window.ndim != 3 or np.shape(odt) != window.shape:
        raise ShapeMismatch(f"window {window.shape} vs odt {np.shape(odt)}")
    pred = estimator.predict_counts(window[None], np.asarray(odt)[None], np.array([week_class]))[0]
    mdp = mdp_from_prediction(pred, mdr)
    return OdMatrix(slot or SlotIndex(0, 0), OdKind.DELAYED_PROBABILITY, mdp, ref=gap)


def complete_slot(finished, inflow, finished_inflow, mdp) -> np.ndarray:
    """MF + MDP scaled row-wise by the delayed inflow I - IF."""
    mf = np.asarray(getattr(finished, "values", finished), dtype=np.float64)
    i = np.asarray(getattr(inflow, "values", inflow), dtype=np.float64)
    i_f = np.asarray(getattr(finished_inflow, "values", finished_inflow), dtype=np.float64)
    p = np.asarray(getattr(mdp, "values", mdp), dtype=np.float64)
    if mf.shape != p.shape or i.shape != mf.shape[:-1] or i_f.shape != i.shape:
        raise ShapeMismatch(f"complete_slot: MF {mf.shape}, I {i.shape}, IF {i_f.shape}, MDP {p.shape}")
    delayed = i - i_f
    if (delayed < 0).any():
        raise NegativeDelayedInflow("finished inflow exceeds inflow")
    return mf + p * delayed[..., None]


# -- windows --------------------------------------------------------------------------


def complete_arrays(
    finished: np.ndarray,
    inflow: np.ndarray,
    finished_inflow: np.ndarray,
    odt: np.ndarray,
    mdr: np.ndarray,
    week_class: np.ndarray,
    config: CompletionConfig,
    history_mean: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Batched iterative completion.

    All arrays are stacked (B, P, ...) oldest slot first; ``mdr[:, k]`` is the
    delayed ratio of input slot k at gap P - k. ``history_mean`` (same shape as
    ``finished``) replaces the estimator when ``mdp_source == "weekly"``.
    """
    P, Q, K = config.P, config.Q, config.K
    if finished.shape[1] != P:
        raise ShapeMismatch(f"expected {P} input slots, got {finished.shape[1]}")
    out = np.array(finished, dtype=np.float64, copy=True)
    for k in range(P - Q + 1, P):
        if config.mdp_source == "weekly":
            if history_mean is None:
                raise ValueError("weekly delayed probabilities need history_mean")
            pred = history_mean[:, k]
        else:
            if config.estimator is None:
                raise ValueError("estimated delayed probabilities need an estimator")
            pred = config.estimator.predict_counts(out[:, k - K : k], odt[:, k - K : k], week_class)
        mdp = mdp_from_prediction(pred, mdr[:, k])
        out[:, k] = complete_slot(finished[:, k], inflow[:, k], finished_inflow[:, k], mdp)
    return out


def prior_estimate(st: SlotTensors, config: CompletionConfig) -> CompletedWindow:
    """Take every slot at least Q slots old as complete; recent slots left untagged."""
    P = st.P
    if P != config.P:
        raise ShapeMismatch(f"window of {P} slots, config expects {config.P}")
    tags = [Provenance(PRIOR) if P - k >= config.Q else None for k in range(P)]
    return CompletedWindow(st.target, np.array(st.finished, dtype=np.float64, copy=True), tags)


def complete_window(
    st: SlotTensors,
    mdr: np.ndarray,
    config: CompletionConfig,
    week_class: int = 0,
    history_mean: Optional[np.ndarray] = None,
) -> CompletedWindow:
    window = prior_estimate(st, config)
    hm = None if history_mean is None else np.asarray(history_mean)[None]
    window.matrices = complete_arrays(
        st.finished[None],
        st.inflow[None],
        st.finished_inflow[None],
        st.odt[None],
        np.asarray(mdr)[None],
        np.array([week_class]),
        config,
        hm,
    )[0]
    delayed = st.inflow - st.finished_inflow
    for k in range(config.P - config.Q + 1, config.P):
        gap = config.P - k
        window.provenance[k] = Provenance(OBSERVED) if not delayed[k].any() else Provenance(ESTIMATED, gap)
    return window


# -- estimator training ----------------------------------------------------------------


def estimator_dataset(
    cube: SlotCube, days: Sequence[int], K: int, normalizer: Normalizer, graphs: StaticGraphs
) -> ArrayDataset:
    """Teacher-forced windows: K true full matrices predict the next one."""
    T = cube.spec.slots_per_day
    win, odt, wc, lab = [], [], [], []
    for d in days:
        full = cube.full[d].astype(np.float64)
        od = cube.odt[d].astype(np.float64)
        for s in range(K, T):
            win.append(full[s - K : s])
            odt.append(od[s - K : s])
            lab.append(full[s])
            wc.append(cube.spec.week_attribute(d, graphs.mode))
    if not win:
        raise EmptyTrainingSet("no estimator windows")
    n = normalizer
    return ArrayDataset(
        n.apply(np.stack(win)),
        n.apply(np.stack(odt)),
        np.array(wc, dtype=np.int64),
        n.apply(np.stack(lab)),
        graphs.si,
        graphs.so,
        graphs.geo.kernel,
    )


def train_completion_estimator(
    cube: SlotCube,
    train_days: Sequence[int],
    val_days: Sequence[int],
    config: CompletionConfig,
    model_config: ModelConfig,
    schedule: TrainSchedule,
    normalizer: Normalizer,
    graphs: StaticGraphs,
    checkpoint_path=None,
) -> tuple[Estimator, TrainLog]:
    if model_config.window != config.K:
        model_config = model_config.with_(window=config.K)
    tr = estimator_dataset(cube, train_days, config.K, normalizer, graphs)
    va = estimator_dataset(cube, val_days, config.K, normalizer, graphs)
    params, log = train(tr, va, model_config, schedule, normalizer, "estimator", checkpoint_path)
    return Estimator(params, normalizer, graphs), log
