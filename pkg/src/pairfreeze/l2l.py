"""Layer-to-layer training: paired student/teacher stages with everything
else frozen, a parameter snapshot after every stage, and a snapshot ensemble.

Stage ``k`` (1-based) unfreezes layers ``k`` and ``n + 1 - k`` of the
schedule's layer ordering, working inward from both ends; for odd ``n`` the
middle layer trains alone in the last stage. By default the ordering is the
model's parameterized layers (``mode="trainable_only"``); ``"all_layers"``
indexes every layer, in which case stages made of parameter-free layers
train nothing.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .data import Dataset
from .errors import ConfigError, ScheduleError
from .layers import param_count, set_trainable
from .models import EVAL_BATCH_SIZE, Model
from .report import RunReport, StageRecord, measure
from .train import TrainConfig, _run_peak, check_compatible, run_epochs

logger = logging.getLogger(__name__)

MODES = ("trainable_only", "all_layers")
BUDGETS = ("per-stage", "split")


@dataclass(frozen=True)
class Stage:
    index: int
    student: int
    teacher: Optional[int] = None

    @property
    def positions(self) -> tuple[int, ...]:
        return (self.student,) if self.teacher is None else (self.student, self.teacher)


@dataclass(frozen=True)
class Schedule:
    stages: tuple[Stage, ...]
    n_layers: int
    mode: str = "trainable_only"

    def __len__(self) -> int:
        return len(self.stages)

    def pairs(self) -> list[tuple[int, Optional[int]]]:
        return [(s.student, s.teacher) for s in self.stages]

    def layer_indices(self, model: Model) -> list[list[int]]:
        """Per stage, the 0-based model layer indices it unfreezes."""
        domain = layer_domain(model, self.mode)
        if len(domain) != self.n_layers:
            raise ScheduleError(
                f"schedule covers {self.n_layers} layers but {model.arch} has {len(domain)} in mode {self.mode}"
            )
        return [[domain[p - 1] for p in s.positions] for s in self.stages]


def layer_domain(model: Model, mode: str = "trainable_only") -> list[int]:
    if mode == "trainable_only":
        return model.trainable_layer_indices()
    if mode == "all_layers":
        return list(range(len(model.layers)))
    raise ConfigError(f"unknown schedule mode {mode!r}; expected one of {MODES}")


def make_schedule(n: int, mode: str = "trainable_only") -> Schedule:
    if mode not in MODES:
        raise ConfigError(f"unknown schedule mode {mode!r}; expected one of {MODES}")
    if n < 1:
        raise ScheduleError(f"a schedule needs at least one layer, got {n}")
    stages = []
    for k in range(1, math.ceil(n / 2) + 1):
        partner = n + 1 - k
        stages.append(Stage(k, k, partner if partner != k else None))
    return Schedule(tuple(stages), n, mode)


def schedule_for(model: Model, mode: str = "trainable_only") -> Schedule:
    return make_schedule(len(layer_domain(model, mode)), mode)


def stage_epochs(total: int, n_stages: int, budget: str) -> list[int]:
    """Epochs per stage: ``per-stage`` gives each stage the full count,
    ``split`` divides it with the remainder going to the last stage."""
    if budget == "per-stage":
        return [total] * n_stages
    if budget == "split":
        base, rem = divmod(total, n_stages)
        return [base] * (n_stages - 1) + [base + rem]
    raise ConfigError(f"unknown budget {budget!r}; expected one of {BUDGETS}")


@dataclass(frozen=True, eq=False)
class Snapshot:
    """Read-only copy of every parameter and buffer at the end of a stage."""

    stage: int
    arrays: tuple[np.ndarray, ...]

    @property
    def nbytes(self) -> int:
        return sum(a.nbytes for a in self.arrays)


def take_snapshot(model: Model, stage: int) -> Snapshot:
    return Snapshot(stage, model.capture_state())


def ensemble_predict(
    snapshots: Sequence[Snapshot], architecture: Model, inputs: np.ndarray, batch_size: int = EVAL_BATCH_SIZE
) -> tuple[np.ndarray, np.ndarray]:
    """Average the eval-mode softmax of each snapshot; argmax per row.

    The mean is accumulated incrementally in snapshot order, so averaging
    identical probabilities returns them unchanged bit for bit.
    ``architecture`` is used as a template and is not modified.
    """
    if not snapshots:
        raise ScheduleError("ensemble needs at least one snapshot")
    worker = architecture.clone()
    mean: Optional[np.ndarray] = None
    for k, snap in enumerate(snapshots, start=1):
        worker.load_state(snap.arrays)
        probs = worker.predict_proba(inputs, batch_size).astype(np.float64)
        if mean is None:
            mean = probs
        else:
            mean += (probs - mean) / k
    return mean, mean.argmax(axis=1)


def train_l2l(
    model: Model,
    train_set: Dataset,
    test_set: Dataset,
    cfg: TrainConfig,
    budget: str = "per-stage",
    mode: str = "trainable_only",
    schedule: Optional[Schedule] = None,
) -> tuple[RunReport, list[Snapshot]]:
    """Run every stage of the schedule in order, continuing from the previous
    stage's parameters, and score the snapshot ensemble on ``test_set``.

    Momentum buffers start fresh each stage because the trainable set changes.
    """
    check_compatible(model, train_set)
    check_compatible(model, test_set)
    schedule = schedule if schedule is not None else schedule_for(model, mode)
    stage_layers = schedule.layer_indices(model)
    budgets = stage_epochs(cfg.epochs, len(schedule), budget)

    def run():
        rng = np.random.default_rng(cfg.seed)
        snapshots, records, losses = [], [], []
        all_layers = range(len(model.layers))
        for stage, layers, epochs in zip(schedule.stages, stage_layers, budgets):
            start = time.perf_counter()
            set_trainable(model, all_layers, False)
            set_trainable(model, layers, True)
            n_params = sum(param_count(model.layers[i]) for i in layers)
            if n_params == 0:
                epochs = 0
            label = f"stage {stage.index}/{len(schedule)} "
            stats = run_epochs(model, train_set, cfg, epochs, rng, label)
            snapshots.append(take_snapshot(model, stage.index))
            losses.extend(s.loss for s in stats)
            records.append(
                StageRecord(
                    stage=stage.index,
                    layers=[model.layers[i].name for i in layers],
                    layer_indices=[i + 1 for i in layers],
                    epochs=epochs,
                    seconds=time.perf_counter() - start,
                    final_loss=stats[-1].loss if stats else None,
                    trainable_params=n_params,
                )
            )
        set_trainable(model, all_layers, True)
        _, preds = ensemble_predict(snapshots, model, test_set.images)
        accuracy = float((preds == test_set.labels).mean())
        return snapshots, records, losses, accuracy

    m = measure(run)
    snapshots, records, losses, accuracy = m.result
    report = RunReport(
        method="l2l",
        architecture=model.arch,
        dataset=train_set.name,
        config={**cfg.to_dict(), "budget": budget, "schedule_mode": schedule.mode},
        total_training_seconds=m.seconds,
        peak_memory_bytes=_run_peak(m, model),
        accuracy=accuracy,
        parameter_bytes=model.param_bytes,
        epoch_losses=losses,
        stages=records,
    )
    return report, snapshots
