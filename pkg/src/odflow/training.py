"""Mini-batch Adam training with plateau learning-rate decay."""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np

from .autodiff import Adam, NonFiniteDetected, backward, mse_loss, no_grad
from .core import OdflowError
from .ingestion import Normalizer
from .model import Batch, ModelConfig, ModelParams, ahgcsp_forward, save_checkpoint


class EmptyTrainingSet(OdflowError):
    pass


class NonFiniteLoss(OdflowError):
    """Training diverged; ``params`` holds the last finite parameters."""

    def __init__(self, message: str, params: Optional[ModelParams] = None, epoch: int = -1):
        super().__init__(message)
        self.params = params
        self.epoch = epoch


@dataclass(frozen=True)
class TrainSchedule:
    lr: float = 0.01
    decay: float = 0.9
    patience: int = 15
    min_lr: float = 2e-6
    max_epochs: int = 1000
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if not (0 < self.decay < 1 and self.lr > 0 and self.min_lr > 0):
            raise ValueError("invalid learning-rate schedule")
        if self.patience < 1 or self.max_epochs < 1 or self.batch_size < 1:
            raise ValueError("patience, max_epochs and batch_size must be positive")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "TrainSchedule":
        return cls(**obj)


@dataclass
class PlateauState:
    """Learning-rate controller; decays after ``patience`` non-improving epochs."""

    lr: float
    best: float = float("inf")
    bad_epochs: int = 0
    done: bool = False

    def update(self, value: float, schedule: TrainSchedule) -> bool:
        """Record a validation result; returns True if it is a new best."""
        if value < self.best:
            self.best = value
            self.bad_epochs = 0
            return True
        self.bad_epochs += 1
        if self.bad_epochs >= schedule.patience:
            self.bad_epochs = 0
            if self.lr <= schedule.min_lr:
                self.done = True
            else:
                self.lr = max(self.lr * schedule.decay, schedule.min_lr)
        return False


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_mae: float
    lr: float
    wall_time: float


@dataclass
class TrainLog:
    kind: str
    records: list = field(default_factory=list)
    best_epoch: int = -1
    best_val_mae: float = float("inf")
    stop_reason: str = ""

    def loss_sequence(self) -> list[tuple[float, float, float, float]]:
        """Everything but wall time; identical across runs with one seed."""
        return [(r.train_loss, r.val_loss, r.val_mae, r.lr) for r in self.records]

    def to_json(self) -> dict:
        return {
            "kind": self.kind,
            "best_epoch": self.best_epoch,
            "best_val_mae": self.best_val_mae,
            "stop_reason": self.stop_reason,
            "epochs": [asdict(r) for r in self.records],
        }

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, indent=1)


@dataclass
class ArrayDataset:
    """Normalized model inputs for many samples.

    ``week_class`` selects the per-class similarity matrices of ``si``/``so``.
    """

    window: np.ndarray  # (S, P, N, N)
    odt: np.ndarray  # (S, P, N, N)
    week_class: np.ndarray  # (S,)
    label: np.ndarray  # (S, N, N) normalized
    si: np.ndarray  # (C, N, N)
    so: np.ndarray  # (C, N, N)
    geo: np.ndarray  # (N, N)

    def __len__(self) -> int:
        return self.window.shape[0]

    def batch(self, idx) -> Batch:
        wc = self.week_class[idx]
        return Batch(self.window[idx], self.odt[idx], self.si[wc], self.so[wc], self.geo, self.label[idx])

    def take(self, idx) -> "ArrayDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return ArrayDataset(
            self.window[idx], self.odt[idx], self.week_class[idx], self.label[idx], self.si, self.so, self.geo
        )


def predict_normalized(dataset: ArrayDataset, params: ModelParams, batch_size: int = 128) -> np.ndarray:
    """Forward pass over a dataset in fixed order, normalized units."""
    out = []
    with no_grad():
        for start in range(0, len(dataset), batch_size):
            idx = np.arange(start, min(start + batch_size, len(dataset)))
            out.append(ahgcsp_forward(dataset.batch(idx), params).data)
    return np.concatenate(out) if out else np.zeros((0,) + dataset.label.shape[1:])


def _validate(dataset: ArrayDataset, params: ModelParams, normalizer: Normalizer) -> tuple[float, float]:
    z = predict_normalized(dataset, params)
    loss = float(np.mean((z - dataset.label) ** 2))
    pred = np.maximum(normalizer.invert(z), 0.0)
    truth = normalizer.invert(dataset.label)
    return loss, float(np.mean(np.abs(pred - truth)))


def train(
    train_set: ArrayDataset,
    val_set: ArrayDataset,
    config: ModelConfig,
    schedule: TrainSchedule,
    normalizer: Normalizer,
    kind: str = "predictor",
    checkpoint_path=None,
    on_epoch: Optional[Callable[[EpochRecord], None]] = None,
) -> tuple[ModelParams, TrainLog]:
    """Fit a fresh model; returns the best-validation parameters and the log."""
    if len(train_set) == 0:
        raise EmptyTrainingSet(f"no {kind} training samples")
    if len(val_set) == 0:
        raise EmptyTrainingSet(f"no {kind} validation samples")
    params = ModelParams.init(config, seed=schedule.seed)
    opt = Adam(params.tensors, lr=schedule.lr)
    plateau = PlateauState(lr=schedule.lr)
    log = TrainLog(kind=kind)
    best = params.copy()
    t0 = time.perf_counter()
    for epoch in range(schedule.max_epochs):
        order = np.random.default_rng([schedule.seed, epoch]).permutation(len(train_set))
        opt.lr = plateau.lr
        total, count = 0.0, 0
        for start in range(0, len(order), schedule.batch_size):
            idx = order[start : start + schedule.batch_size]
            batch = train_set.batch(idx)
            opt.zero_grad()
            try:
                loss = mse_loss(ahgcsp_forward(batch, params), batch.label)
                backward(loss)
                opt.step()
            except NonFiniteDetected as exc:
                log.stop_reason = "non_finite"
                if checkpoint_path is not None:
                    save_checkpoint(checkpoint_path, best, normalizer, kind, {"log": log.to_json()})
                raise NonFiniteLoss(str(exc), best, epoch) from exc
            total += loss.item() * len(idx)
            count += len(idx)
        val_loss, val_mae = _validate(val_set, params, normalizer)
        rec = EpochRecord(epoch, total / count, val_loss, val_mae, plateau.lr, time.perf_counter() - t0)
        log.records.append(rec)
        if plateau.update(val_mae, schedule):
            best = params.copy()
            log.best_epoch, log.best_val_mae = epoch, val_mae
        if on_epoch is not None:
            on_epoch(rec)
        if plateau.done:
            log.stop_reason = "min_lr"
            break
    else:
        log.stop_reason = "max_epochs"
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, best, normalizer, kind, {"log": log.to_json(), "schedule": schedule.to_json()})
    return best, log
