"""Command-line entry point: ``odflow <command> ...``.

Every command prints one JSON report on stdout and writes artifacts under
``--out``. The exit status is 0 only when the command fully succeeded.
"""

from __future__ import annotations

import os

_threads = os.environ.get("ODFLOW_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

import argparse
import json
import sys
from dataclasses import fields, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .completion import CompletionConfig, Estimator, complete_window
from .core import OdflowError, SlotIndex, load_network_spec, save_network_spec
from .graphs import StaticGraphs, build_static_graphs
from .harness import (
    ExperimentConfig,
    PreparedData,
    desk_experiment,
    estimator_report,
    fit_estimator,
    input_windows,
    metrics,
    predictor_dataset,
    prepare_data,
    run_pipeline,
    split_arrays,
    summarize_reports,
    write_pair_csv,
)
from .ingestion import (
    SlotCube,
    SlotTensors,
    TripTable,
    parse_trips,
    split_days,
    travel_time_stats,
    write_tensor_cache,
    write_trips_csv,
)
from .io import write_matrix
from .model import load_checkpoint, save_checkpoint
from .synth import SynthConfig, generate, load_synth_config
from .training import TrainSchedule, predict_normalized, train


class UsageError(OdflowError):
    pass


def _emit(report: dict) -> None:
    json.dump(report, sys.stdout, indent=1, default=_json_default)
    sys.stdout.write("\n")


def _json_default(obj):
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not serializable: {type(obj)}")


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _experiment(args) -> ExperimentConfig:
    exp = desk_experiment()
    if getattr(args, "config", None):
        with open(args.config, encoding="utf-8") as fh:
            exp = ExperimentConfig.from_json(json.load(fh))
    changes = {}
    if getattr(args, "no_completion", False):
        changes["use_completion"] = False
    for flag in ("geo", "functional", "dynamic", "gcn"):
        if getattr(args, f"no_{flag}", False):
            changes[f"use_{flag}"] = False
    if getattr(args, "mdp_source", None):
        changes["mdp_source"] = args.mdp_source
    exp = exp.with_(**changes)
    if getattr(args, "schedule", None):
        with open(args.schedule, encoding="utf-8") as fh:
            sch = TrainSchedule.from_json(json.load(fh))
        kind = getattr(args, "kind", None)
        if kind in (None, "predictor"):
            exp = exp.with_(predictor_schedule=sch)
        if kind in (None, "estimator"):
            exp = exp.with_(estimator_schedule=sch)
    if getattr(args, "seed", None) is not None:
        exp = exp.reseeded(args.seed)
    return exp


def _load_data(data_dir, exp: ExperimentConfig) -> PreparedData:
    d = Path(data_dir)
    spec = load_network_spec(d / "spec.json")
    trips = TripTable.load(d / "trips.npz")
    graphs = StaticGraphs.load(d / "graphs") if (d / "graphs" / "graphs.json").exists() else None
    return prepare_data(trips, spec, P=exp.P, Q=exp.Q, mode=exp.mode, radius_km=exp.radius_km, graphs=graphs)


def _load_estimator(path, data: PreparedData) -> Estimator:
    params, normalizer, meta = load_checkpoint(path)
    if meta.get("kind") != "estimator":
        raise UsageError(f"{path} is not an estimator checkpoint")
    return Estimator(params, normalizer, data.graphs)


def _locate(data: PreparedData, target: SlotIndex):
    """Single-sample arrays for one target slot."""
    if not 0 <= target.day < data.cube.days:
        raise UsageError(f"day {target.day} outside the data")
    if not data.P <= target.slot < data.spec.slots_per_day:
        raise UsageError(f"target slot must lie in [{data.P}, {data.spec.slots_per_day})")
    arr = split_arrays(data.cube, [target.day], data.P, data.ratios, data.history, data.mode)
    return arr, target.slot - data.P


# -- commands ------------------------------------------------------------------------------


def cmd_synth(args) -> dict:
    cfg = load_synth_config(args.config) if args.config else SynthConfig()
    if args.seed is not None:
        cfg = cfg.with_(seed=args.seed)
    out = _out(args)
    res = generate(cfg)
    write_trips_csv(res.trips, res.spec, out / "trips.csv")
    save_network_spec(res.spec, out / "spec.json")
    with open(out / "synth_config.json", "w", encoding="utf-8") as fh:
        json.dump(cfg.to_json(), fh, indent=1)
    return {
        "command": "synth",
        "seed": cfg.seed,
        "stations": res.spec.n_stations,
        "days": cfg.days,
        "trips": len(res.trips),
        "files": ["trips.csv", "spec.json", "synth_config.json"],
    }


def cmd_ingest(args) -> dict:
    spec = load_network_spec(args.spec)
    out = _out(args)
    trips, drops = parse_trips(Path(args.trips), spec)
    trips.save(out / "trips.npz")
    save_network_spec(spec, out / "spec.json")
    cube = SlotCube(trips, spec, max_gap=8)
    if spec.days is None:
        spec = replace(spec, days=cube.days)
        save_network_spec(spec, out / "spec.json")
    stats = travel_time_stats(trips, spec.n_stations) if len(trips) else None
    total = cube.full.sum()
    completeness = {
        str(g): (float(cube.lagcum[:, :, g].sum() / total) if total else 1.0) for g in range(1, cube.max_gap + 1)
    }
    with open(out / "drops.json", "w", encoding="utf-8") as fh:
        json.dump(drops.to_json(), fh, indent=1)
    report = {
        "command": "ingest",
        "trips": len(trips),
        "days": cube.days,
        "dropped": drops.to_json(),
        "completeness_by_gap": completeness,
    }
    if stats is not None:
        report["share_within_60min"] = stats.share_within(3600)
        report["horizon_slots"] = stats.horizon_slots(spec.granularity_minutes)
    if args.cache:
        report["cache_files"] = write_tensor_cache(cube, out / "tensors")
    return report


def cmd_graphs(args) -> dict:
    data_dir = Path(args.data or args.out)
    spec = load_network_spec(data_dir / "spec.json")
    trips = TripTable.load(data_dir / "trips.npz")
    cube = SlotCube(trips, spec, max_gap=1)
    train_d, _, _ = split_days(cube.days)
    g = build_static_graphs(cube, train_d, radius_km=args.radius_km, mode=args.week_attribute)
    out = Path(args.out) / "graphs"
    g.save(out)
    return {
        "command": "graphs",
        "radius_km": args.radius_km,
        "sigma_km": g.geo.sigma,
        "neighbor_pairs": int(g.geo.neighbors.sum()),
        "classes": int(g.si.shape[0]),
        "out": str(out),
    }


def cmd_train(args) -> dict:
    exp = _experiment(args)
    data = _load_data(args.data, exp)
    out = _out(args)
    if args.kind == "estimator":
        est, log = fit_estimator(data, exp, out / "estimator.ckpt")
        log.save(out / "estimator_log.json")
        windows = input_windows(data, "val", exp.with_(use_completion=True, mdp_source="estimated"), est)
        return {
            "command": "train",
            "kind": "estimator",
            "best_epoch": log.best_epoch,
            "best_val_mae": log.best_val_mae,
            "stop_reason": log.stop_reason,
            "val_completed_window": estimator_report(data, "val", windows, exp).to_json(),
            "checkpoint": str(out / "estimator.ckpt"),
        }
    est = None
    if exp.use_completion and exp.mdp_source == "estimated":
        if not args.est:
            raise UsageError("predictor training with completion needs --est (or --no-completion)")
        est = _load_estimator(args.est, data)
    windows = {s: input_windows(data, s, exp, est) for s in ("train", "val")}
    cfg = exp.predictor_config(data.spec.n_stations, data.normalizer)
    params, log = train(
        predictor_dataset(data, "train", windows["train"]),
        predictor_dataset(data, "val", windows["val"]),
        cfg,
        exp.predictor_schedule,
        data.normalizer,
        "predictor",
    )
    save_checkpoint(out / "predictor.ckpt", params, data.normalizer, "predictor", {"experiment": exp.to_json()})
    log.save(out / "predictor_log.json")
    return {
        "command": "train",
        "kind": "predictor",
        "best_epoch": log.best_epoch,
        "best_val_mae": log.best_val_mae,
        "stop_reason": log.stop_reason,
        "checkpoint": str(out / "predictor.ckpt"),
    }


def cmd_complete(args) -> dict:
    exp = _experiment(args)
    data = _load_data(args.data, exp)
    est = _load_estimator(args.checkpoint, data) if exp.mdp_source == "estimated" else None
    target = SlotIndex.parse(args.slot)
    arr, k = _locate(data, target)
    st = SlotTensors(
        target, arr.finished[k], arr.inflow[k], arr.finished_inflow[k], arr.odt[k], arr.odt[k].sum(axis=1)
    )
    cfg = CompletionConfig(P=exp.P, Q=exp.Q, estimator=est, mdp_source=exp.mdp_source)
    win = complete_window(st, arr.mdr[k], cfg, int(arr.week_class[k]), arr.history_mean[k])
    sidecar = win.export(_out(args))
    k0 = exp.P - exp.Q + 1
    return {
        "command": "complete",
        "target": str(target),
        "provenance": [str(p) for p in win.provenance],
        "sidecar": str(sidecar),
        "completed_vs_truth": metrics(win.matrices[k0:], arr.truth_window[k][k0:]).to_json(),
        "finished_vs_truth": metrics(arr.finished[k][k0:], arr.truth_window[k][k0:]).to_json(),
    }


def cmd_predict(args) -> dict:
    exp = _experiment(args)
    data = _load_data(args.data, exp)
    params, normalizer, meta = load_checkpoint(args.pred)
    if meta.get("kind") != "predictor":
        raise UsageError(f"{args.pred} is not a predictor checkpoint")
    saved = meta.get("extra", {}).get("experiment")
    if saved:
        exp = exp.with_(use_completion=saved["use_completion"], mdp_source=saved["mdp_source"])
    est = None
    if exp.use_completion and exp.mdp_source == "estimated":
        if not args.est:
            raise UsageError("this predictor expects completed windows; pass --est")
        est = _load_estimator(args.est, data)
    target = SlotIndex.parse(args.slot)
    arr, k = _locate(data, target)
    one = PreparedData(**{**data.__dict__, "splits": {"one": _subset(arr, k)}})
    windows = input_windows(one, "one", exp, est)
    ds = predictor_dataset(one, "one", windows)
    pred = np.maximum(normalizer.invert(predict_normalized(ds, params)), 0.0)[0]
    out = _out(args)
    path = out / f"prediction_{target.day}_{target.slot}.odm"
    write_matrix(path, pred)
    return {
        "command": "predict",
        "target": str(target),
        "file": str(path),
        "predicted_total": float(pred.sum()),
        "truth_total": float(arr.label[k].sum()),
        "vs_truth": metrics(pred, arr.label[k]).to_json(),
    }


def _subset(arr, k):
    kw = {}
    for f in fields(arr):
        v = getattr(arr, f.name)
        kw[f.name] = [v[k]] if isinstance(v, list) else v[k : k + 1]
    return type(arr)(**kw)


def cmd_evaluate(args) -> dict:
    exp = _experiment(args)
    data = _load_data(args.data, exp)
    out = _out(args)
    base_seed = args.seed if args.seed is not None else exp.predictor_schedule.seed
    runs = []
    preds = []
    for r in range(args.repeats):
        res = run_pipeline(data, exp.reseeded(base_seed + r))
        runs.append(res)
        preds.append(res.prediction)
    test = data.splits["test"]
    write_pair_csv(out / "pairs.csv", preds[0], test.label, data.spec.station_ids)
    report = {
        "command": "evaluate",
        "repeats": args.repeats,
        "experiment": exp.to_json(),
        "model": summarize_reports([r.model for r in runs]),
        "ha": runs[0].ha.to_json(),
        "raw_recent_window": runs[0].raw_window.to_json(),
        "pairs_csv": str(out / "pairs.csv"),
    }
    if exp.use_completion:
        report["completed_recent_window"] = summarize_reports([r.estimator for r in runs])
    with open(out / "evaluation.json", "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=1, default=_json_default)
    return report


# -- parser --------------------------------------------------------------------------------


def _add_experiment_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", required=True, help="directory written by ingest")
    p.add_argument("--config", help="experiment JSON (model sizes, schedules, window)")
    p.add_argument("--schedule", help="training schedule JSON")
    p.add_argument("--seed", type=int)
    p.add_argument("--no-completion", action="store_true")
    p.add_argument("--no-geo", action="store_true")
    p.add_argument("--no-functional", action="store_true")
    p.add_argument("--no-dynamic", action="store_true")
    p.add_argument("--no-gcn", action="store_true")
    p.add_argument("--mdp-source", choices=("weekly", "estimated"))
    p.add_argument("--out", default=".")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="odflow", description="Real-time metro OD matrix forecasting")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic AFC trip file")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("ingest", help="parse AFC trips and build slot tensors")
    p.add_argument("--trips", required=True)
    p.add_argument("--spec", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--cache", action="store_true", help="also write per-slot matrix files")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("graphs", help="build geographic and functional similarity graphs")
    p.add_argument("--data")
    p.add_argument("--radius-km", type=float, default=2.0)
    p.add_argument("--week-attribute", default="weekday_weekend", choices=("weekday_weekend", "day_of_week"))
    p.add_argument("--out", default=".")
    p.set_defaults(func=cmd_graphs)

    p = sub.add_parser("train", help="train the completion estimator or the predictor")
    p.add_argument("--kind", required=True, choices=("estimator", "predictor"))
    p.add_argument("--est", help="estimator checkpoint (predictor training)")
    _add_experiment_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("complete", help="complete the input window of one target slot")
    p.add_argument("--checkpoint", help="estimator checkpoint")
    p.add_argument("--slot", required=True, help="target DAY:SLOT")
    _add_experiment_flags(p)
    p.set_defaults(func=cmd_complete)

    p = sub.add_parser("predict", help="forecast the OD matrix of one target slot")
    p.add_argument("--est")
    p.add_argument("--pred", required=True)
    p.add_argument("--slot", required=True)
    _add_experiment_flags(p)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="train and test the full pipeline, optionally repeated")
    p.add_argument("--repeats", type=int, default=1)
    _add_experiment_flags(p)
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv: Optional[list] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "complete" and not args.checkpoint and args.mdp_source != "weekly":
        parser.error("complete needs --checkpoint unless --mdp-source weekly")
    try:
        report = args.func(args)
    except (OdflowError, OSError, ValueError, KeyError) as exc:
        _emit({"command": args.command, "error": type(exc).__name__, "message": str(exc)})
        return 1
    report["status"] = "ok"
    _emit(report)
    return 0


if __name__ == "__main__":
    sys.exit(main())
