"""Minibatch SGD, evaluation and the standard whole-network baseline."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Iterable, Optional

import numpy as np

from .data import Dataset
from .errors import ConfigError, GradientError
from .layers import Parameter, set_trainable
from .memory import track
from .models import EVAL_BATCH_SIZE, Model
from .ops import softmax_cross_entropy
from .report import RunReport, measure
from .tensor import Tape, Tensor, backward

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 64
    learning_rate: float = 0.01
    momentum: float = 0.9
    seed: int = 42
    shuffle: bool = True

    def __post_init__(self) -> None:
        if self.epochs < 0:
            raise ConfigError(f"epochs must be non-negative, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be positive, got {self.batch_size}")
        if self.learning_rate < 0:
            raise ConfigError(f"learning_rate must be non-negative, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.seed < 0:
            raise ConfigError(f"seed must be non-negative, got {self.seed}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class OptimizerState:
    """Momentum buffers, created on first use for trainable parameters only."""

    velocity: dict[int, np.ndarray] = field(default_factory=dict)

    def buffer_for(self, p: Parameter) -> np.ndarray:
        v = self.velocity.get(id(p))
        if v is None:
            v = self.velocity[id(p)] = track(np.zeros_like(p.data))
        return v


@dataclass
class EpochStats:
    epoch: int
    loss: float
    seconds: float
    batches: int


def sgd_step(params: Iterable[Parameter], state: OptimizerState, lr: float, momentum: float) -> None:
    """``v = momentum * v + grad; p -= lr * v`` for trainable parameters,
    then drop their gradients. Frozen parameters are skipped entirely."""
    params = [p for p in params if p.trainable]
    missing = [p.name for p in params if p.grad is None]
    if missing:
        raise GradientError(f"sgd_step before backward: no gradient for {len(missing)} trainable parameter(s)")
    for p in params:
        v = state.buffer_for(p)
        if momentum:
            v *= momentum
            v += p.grad
        else:
            v[...] = p.grad
        p.data[...] -= p.data.dtype.type(lr) * v
        p.tensor.grad = None


def iterate_batches(n: int, batch_size: int, rng: Optional[np.random.Generator], shuffle: bool):
    order = rng.permutation(n) if shuffle else np.arange(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def train_epoch(
    model: Model,
    dataset: Dataset,
    cfg: TrainConfig,
    state: OptimizerState,
    rng: np.random.Generator,
    epoch: int = 0,
) -> EpochStats:
    """One pass over ``dataset``; the last, possibly smaller, batch is kept."""
    start = time.perf_counter()
    params = model.trainable_parameters()
    total, batches = 0.0, 0
    for idx in iterate_batches(len(dataset), cfg.batch_size, rng, cfg.shuffle):
        x = Tensor(dataset.images[idx], dtype=model.dtype)
        labels = dataset.labels[idx]
        with Tape() as tape:
            logits = model.forward(x, "train", rng)
            loss, _ = softmax_cross_entropy(logits, labels)
            del logits
            if loss.requires_grad:
                backward(loss, tape)
                sgd_step(params, state, cfg.learning_rate, cfg.momentum)
        total += loss.item() * len(idx)
        batches += 1
        del x, loss
    return EpochStats(epoch, total / len(dataset), time.perf_counter() - start, batches)


def run_epochs(
    model: Model,
    dataset: Dataset,
    cfg: TrainConfig,
    epochs: int,
    rng: np.random.Generator,
    label: str = "",
) -> list[EpochStats]:
    state = OptimizerState()
    stats = []
    for e in range(1, epochs + 1):
        s = train_epoch(model, dataset, cfg, state, rng, e)
        logger.info("%sepoch %d/%d loss=%.4f secs=%.2f", label, e, epochs, s.loss, s.seconds)
        stats.append(s)
    return stats


def evaluate(model: Model, dataset: Dataset, batch_size: int = EVAL_BATCH_SIZE) -> float:
    """Top-1 accuracy in eval mode. Does not touch parameters or batchnorm
    running statistics."""
    if len(dataset) == 0:
        raise ConfigError("cannot evaluate on an empty dataset")
    probs = model.predict_proba(dataset.images, batch_size)
    return float((probs.argmax(axis=1) == dataset.labels).mean())


def check_compatible(model: Model, dataset: Dataset) -> None:
    if tuple(dataset.image_shape) != tuple(model.input_shape):
        raise ConfigError(f"dataset images are {dataset.image_shape}, model expects {model.input_shape}")
    if dataset.num_classes > model.num_classes:
        raise ConfigError(f"dataset has {dataset.num_classes} classes, model outputs {model.num_classes}")


def train_standard(model: Model, train_set: Dataset, test_set: Dataset, cfg: TrainConfig) -> RunReport:
    """Train every layer at once for ``cfg.epochs`` epochs, then evaluate."""
    check_compatible(model, train_set)
    check_compatible(model, test_set)
    set_trainable(model, range(len(model.layers)), True)

    def run():
        rng = np.random.default_rng(cfg.seed)
        stats = run_epochs(model, train_set, cfg, cfg.epochs, rng)
        return stats, evaluate(model, test_set)

    m = measure(run)
    stats, accuracy = m.result
    return RunReport(
        method="standard",
        architecture=model.arch,
        dataset=train_set.name,
        config={**cfg.to_dict(), "budget": None, "schedule_mode": None},
        total_training_seconds=m.seconds,
        peak_memory_bytes=_run_peak(m, model),
        accuracy=accuracy,
        parameter_bytes=model.param_bytes,
        epoch_losses=[s.loss for s in stats],
    )


def _run_peak(m, model: Model) -> int:
    """High-water mark attributable to the run: the model's own state plus
    everything allocated above the entry baseline. Unrelated objects alive
    in the process do not leak into the figure."""
    return model.param_bytes + (m.peak_bytes - m.baseline_bytes)
