"""Metrics, historical-average baseline and the end-to-end experiment pipeline."""

from __future__ import annotations

import csv
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .completion import (
    CompletionConfig,
    Estimator,
    complete_arrays,
    train_completion_estimator,
)
from .core import NetworkSpec, OdflowError, ShapeMismatch, SlotIndex
from .graphs import DEFAULT_RADIUS_KM, StaticGraphs, build_static_graphs
from .ingestion import (
    DelayedRatioTable,
    Normalizer,
    SlotCube,
    TripTable,
    split_days,
)
from .model import ModelConfig, ModelParams
from .training import ArrayDataset, TrainLog, TrainSchedule, predict_normalized, train


class NoHistory(OdflowError):
    pass


# -- metrics ---------------------------------------------------------------------------


@dataclass
class MetricReport:
    mae: float
    rmse: float
    wmape: Optional[float]
    per_slot: Optional[list] = None

    def to_json(self) -> dict:
        d = {"mae": self.mae, "rmse": self.rmse, "wmape": self.wmape}
        if self.per_slot is not None:
            d["per_slot"] = [m.to_json() for m in self.per_slot]
        return d


def metrics(prediction, truth, per_slot: bool = False) -> MetricReport:
    """MAE, RMSE and WMAPE over every entry; WMAPE is None when the truth sums to 0.

    With ``per_slot`` the leading axis indexes slots and each gets its own report.
    """
    p = np.asarray(prediction, dtype=np.float64)
    t = np.asarray(truth, dtype=np.float64)
    if p.shape != t.shape:
        raise ShapeMismatch(f"prediction {p.shape} vs truth {t.shape}")
    err = p - t
    abs_sum = float(np.abs(err).sum())
    total = float(t.sum())
    report = MetricReport(
        mae=float(np.abs(err).mean()),
        rmse=float(np.sqrt((err * err).mean())),
        wmape=abs_sum / total if total > 0 else None,
    )
    if per_slot:
        report.per_slot = [metrics(p[k], t[k]) for k in range(p.shape[0])]
    return report


def mean_and_stderr(values: Sequence[float]) -> tuple[float, float]:
    v = np.asarray([x for x in values if x is not None], dtype=np.float64)
    if v.size == 0:
        return float("nan"), float("nan")
    se = float(v.std(ddof=1) / np.sqrt(v.size)) if v.size > 1 else 0.0
    return float(v.mean()), se


def summarize_reports(reports: Sequence[MetricReport]) -> dict:
    out = {}
    for name in ("mae", "rmse", "wmape"):
        m, se = mean_and_stderr([getattr(r, name) for r in reports])
        out[name] = {"mean": m, "stderr": se, "runs": [getattr(r, name) for r in reports]}
    return out


# -- historical average ------------------------------------------------------------------


class HistoricalAverage:
    """Per-entry mean over history days sharing the target's week class and slot."""

    def __init__(self, values: np.ndarray, classes: Sequence[int], days: Sequence[int]):
        values = np.asarray(values, dtype=np.float64)
        classes = np.asarray(classes)
        days = list(days)
        self.classes = sorted({int(classes[d]) for d in days})
        self.mean = {}
        for c in self.classes:
            sel = [d for d in days if classes[d] == c]
            self.mean[c] = values[sel].mean(axis=0)

    def predict(self, week_class: int, slot: int) -> np.ndarray:
        if week_class not in self.mean:
            raise NoHistory(f"no history day with week class {week_class}")
        return self.mean[week_class][slot]


def ha_baseline(
    history: SlotCube,
    target: SlotIndex,
    history_days: Sequence[int],
    mode: str = "weekday_weekend",
) -> np.ndarray:
    spec = history.spec
    classes = [spec.week_attribute(d, mode) for d in range(history.days)]
    if not history_days:
        raise NoHistory("empty history")
    ha = HistoricalAverage(history.full, classes, history_days)
    return ha.predict(spec.week_attribute(target.day, mode), target.slot)


# -- data preparation ----------------------------------------------------------------------


@dataclass
class SplitArrays:
    """Raw-count real-time observables for every (day, target slot) of one split."""

    targets: list
    finished: np.ndarray  # (S, P, N, N)
    inflow: np.ndarray  # (S, P, N)
    finished_inflow: np.ndarray  # (S, P, N)
    odt: np.ndarray  # (S, P, N, N)
    mdr: np.ndarray  # (S, P, N, N)
    week_class: np.ndarray  # (S,)
    label: np.ndarray  # (S, N, N)
    truth_window: np.ndarray  # (S, P, N, N)
    history_mean: np.ndarray  # (S, P, N, N) HA of each input slot
    ha: np.ndarray  # (S, N, N) HA of the target

    def __len__(self) -> int:
        return len(self.targets)


def split_arrays(
    cube: SlotCube, days: Sequence[int], P: int, ratios: DelayedRatioTable, ha: HistoricalAverage, mode: str
) -> SplitArrays:
    spec = cube.spec
    T = spec.slots_per_day
    s = np.arange(P, T)
    k = np.arange(P)
    rows = s[:, None] - P + k[None, :]
    gaps = np.broadcast_to(P - k, rows.shape)
    parts = {n: [] for n in ("fin", "full", "odt", "mdr", "lab", "hm", "ha", "wc")}
    targets = []
    for d in days:
        w = spec.week_attribute(d, mode)
        parts["fin"].append(cube.lagcum[d, rows, gaps])
        parts["full"].append(cube.full[d, rows])
        parts["odt"].append(cube.odt[d, rows])
        parts["mdr"].append(ratios.ratio[spec.week_attribute(d, ratios.mode), rows, gaps])
        parts["lab"].append(cube.full[d, s])
        hm = np.stack([ha.predict(w, t) for t in range(T)])
        parts["hm"].append(hm[rows])
        parts["ha"].append(hm[s])
        parts["wc"].append(np.full(len(s), w))
        targets.extend(SlotIndex(d, int(x)) for x in s)
    cat = {n: np.concatenate(v).astype(np.float64) for n, v in parts.items()}
    return SplitArrays(
        targets=targets,
        finished=cat["fin"],
        inflow=cat["full"].sum(axis=-1),
        finished_inflow=cat["fin"].sum(axis=-1),
        odt=cat["odt"],
        mdr=cat["mdr"],
        week_class=cat["wc"].astype(np.int64),
        label=cat["lab"],
        truth_window=cat["full"],
        history_mean=cat["hm"],
        ha=cat["ha"],
    )


@dataclass
class PreparedData:
    spec: NetworkSpec
    cube: SlotCube
    train_days: list
    val_days: list
    test_days: list
    ratios: DelayedRatioTable
    graphs: StaticGraphs
    normalizer: Normalizer
    history: HistoricalAverage
    splits: dict
    P: int
    Q: int
    mode: str


def prepare_data(
    source,
    spec: NetworkSpec,
    P: int = 8,
    Q: int = 5,
    mode: str = "weekday_weekend",
    radius_km: float = DEFAULT_RADIUS_KM,
    graphs: Optional[StaticGraphs] = None,
) -> PreparedData:
    """Slot cube, day split, training-only statistics and per-split arrays."""
    cube = source if isinstance(source, SlotCube) else SlotCube(source, spec, max_gap=P)
    train_d, val_d, test_d = split_days(cube.days)
    ratios = DelayedRatioTable(cube, train_d, mode)
    classes = [spec.week_attribute(d, mode) for d in range(cube.days)]
    ha = HistoricalAverage(cube.full, classes, train_d)
    if graphs is None:
        graphs = build_static_graphs(cube, train_d, radius_km=radius_km, mode=mode)
    normalizer = Normalizer.fit(cube.full[train_d])
    splits = {
        name: split_arrays(cube, days, P, ratios, ha, mode)
        for name, days in (("train", train_d), ("val", val_d), ("test", test_d))
    }
    return PreparedData(spec, cube, train_d, val_d, test_d, ratios, graphs, normalizer, ha, splits, P, Q, mode)


# -- experiments ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ExperimentConfig:
    """Model sizes, schedules and ablation switches for one pipeline run."""

    P: int = 8
    Q: int = 5
    mode: str = "weekday_weekend"
    radius_km: float = DEFAULT_RADIUS_KM
    predictor_gcn_units: int = 16
    predictor_lstm_units: int = 32
    estimator_gcn_units: int = 16
    estimator_lstm_units: int = 32
    use_completion: bool = True
    mdp_source: str = "estimated"
    use_geo: bool = True
    use_functional: bool = True
    use_dynamic: bool = True
    use_gcn: bool = True
    predictor_schedule: TrainSchedule = field(default_factory=TrainSchedule)
    estimator_schedule: TrainSchedule = field(default_factory=TrainSchedule)

    def __post_init__(self):
        for name in ("predictor_schedule", "estimator_schedule"):
            v = getattr(self, name)
            if isinstance(v, dict):
                object.__setattr__(self, name, TrainSchedule.from_json(v))

    def predictor_config(self, n: int, normalizer: Normalizer) -> ModelConfig:
        return ModelConfig(
            n_stations=n,
            window=self.P,
            gcn_units=self.predictor_gcn_units,
            lstm_units=self.predictor_lstm_units,
            use_geo=self.use_geo,
            use_functional=self.use_functional,
            use_dynamic=self.use_dynamic,
            use_gcn=self.use_gcn,
            output_floor=float(normalizer.apply(0.0)),
        )

    def estimator_config(self, n: int, normalizer: Normalizer) -> ModelConfig:
        return ModelConfig(
            n_stations=n,
            window=self.P - self.Q + 1,
            gcn_units=self.estimator_gcn_units,
            lstm_units=self.estimator_lstm_units,
            output_floor=float(normalizer.apply(0.0)),
        )

    def with_(self, **changes) -> "ExperimentConfig":
        return replace(self, **changes)

    def reseeded(self, seed: int) -> "ExperimentConfig":
        return self.with_(
            predictor_schedule=replace(self.predictor_schedule, seed=seed),
            estimator_schedule=replace(self.estimator_schedule, seed=seed),
        )

    def to_json(self) -> dict:
        d = asdict(self)
        return d

    @classmethod
    def from_json(cls, obj: dict) -> "ExperimentConfig":
        return cls(**obj)


def desk_experiment(**changes) -> ExperimentConfig:
    """Small model and short schedules sized for a single CPU core."""
    base = ExperimentConfig(
        predictor_schedule=TrainSchedule(max_epochs=30),
        estimator_schedule=TrainSchedule(max_epochs=15),
    )
    return base.with_(**changes)


def input_windows(
    data: PreparedData, split: str, exp: ExperimentConfig, estimator: Optional[Estimator], chunk: int = 256
) -> np.ndarray:
    """Count-scale model input windows: completed, or raw finished matrices."""
    a = data.splits[split]
    if not exp.use_completion:
        return a.finished.copy()
    cfg = CompletionConfig(P=exp.P, Q=exp.Q, estimator=estimator, mdp_source=exp.mdp_source)
    out = np.empty_like(a.finished)
    for start in range(0, len(a), chunk):
        sl = slice(start, start + chunk)
        out[sl] = complete_arrays(
            a.finished[sl],
            a.inflow[sl],
            a.finished_inflow[sl],
            a.odt[sl],
            a.mdr[sl],
            a.week_class[sl],
            cfg,
            a.history_mean[sl],
        )
    return out


def predictor_dataset(data: PreparedData, split: str, windows: np.ndarray) -> ArrayDataset:
    a = data.splits[split]
    n = data.normalizer
    g = data.graphs
    return ArrayDataset(n.apply(windows), n.apply(a.odt), a.week_class, n.apply(a.label), g.si, g.so, g.geo.kernel)


def fit_estimator(data: PreparedData, exp: ExperimentConfig, checkpoint_path=None) -> tuple[Estimator, TrainLog]:
    cfg = CompletionConfig(P=exp.P, Q=exp.Q)
    return train_completion_estimator(
        data.cube,
        data.train_days,
        data.val_days,
        cfg,
        exp.estimator_config(data.spec.n_stations, data.normalizer),
        exp.estimator_schedule,
        data.normalizer,
        data.graphs,
        checkpoint_path,
    )


def estimator_report(data: PreparedData, split: str, windows: np.ndarray, exp: ExperimentConfig) -> MetricReport:
    """Completed matrices of the estimated slots against the true full matrices."""
    a = data.splits[split]
    k0 = exp.P - exp.Q + 1
    return metrics(windows[:, k0:], a.truth_window[:, k0:])


@dataclass
class RunResult:
    model: MetricReport
    ha: MetricReport
    estimator: Optional[MetricReport]
    raw_window: MetricReport
    predictor_log: TrainLog
    estimator_log: Optional[TrainLog]
    predictor: ModelParams
    estimator_params: Optional[Estimator]
    prediction: np.ndarray
    seconds: float

    def to_json(self) -> dict:
        return {
            "model": self.model.to_json(),
            "ha": self.ha.to_json(),
            "estimator": None if self.estimator is None else self.estimator.to_json(),
            "raw_window": self.raw_window.to_json(),
            "predictor_best_epoch": self.predictor_log.best_epoch,
            "seconds": self.seconds,
        }


def run_pipeline(
    data: PreparedData,
    exp: ExperimentConfig,
    estimator: Optional[Estimator] = None,
    estimator_log: Optional[TrainLog] = None,
    out_dir=None,
) -> RunResult:
    """Train (or reuse) the estimator, complete windows, train and test the predictor."""
    t0 = time.perf_counter()
    need_est = exp.use_completion and exp.mdp_source == "estimated"
    if need_est and estimator is None:
        path = None if out_dir is None else f"{out_dir}/estimator.ckpt"
        estimator, estimator_log = fit_estimator(data, exp, path)
    windows = {s: input_windows(data, s, exp, estimator if need_est else None) for s in ("train", "val", "test")}
    tr = predictor_dataset(data, "train", windows["train"])
    va = predictor_dataset(data, "val", windows["val"])
    te = predictor_dataset(data, "test", windows["test"])
    cfg = exp.predictor_config(data.spec.n_stations, data.normalizer)
    path = None if out_dir is None else f"{out_dir}/predictor.ckpt"
    params, log = train(tr, va, cfg, exp.predictor_schedule, data.normalizer, "predictor", path)
    pred = np.maximum(data.normalizer.invert(predict_normalized(te, params)), 0.0)
    test = data.splits["test"]
    k0 = exp.P - exp.Q + 1
    return RunResult(
        model=metrics(pred, test.label),
        ha=metrics(test.ha, test.label),
        estimator=estimator_report(data, "test", windows["test"], exp) if exp.use_completion else None,
        raw_window=metrics(test.finished[:, k0:], test.truth_window[:, k0:]),
        predictor_log=log,
        estimator_log=estimator_log,
        predictor=params,
        estimator_params=estimator if need_est else None,
        prediction=pred,
        seconds=time.perf_counter() - t0,
    )


def write_pair_csv(path, prediction: np.ndarray, truth: np.ndarray, station_ids: Sequence[str]) -> None:
    """Per-pair error summary over all test samples."""
    err = np.abs(prediction - truth)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["origin_id", "dest_id", "mae", "truth_total", "pred_total"])
        n = len(station_ids)
        for i in range(n):
            for j in range(n):
                w.writerow(
                    [
                        station_ids[i],
                        station_ids[j],
                        f"{err[:, i, j].mean():.6f}",
                        f"{truth[:, i, j].sum():.0f}",
                        f"{prediction[:, i, j].sum():.6f}",
                    ]
                )
