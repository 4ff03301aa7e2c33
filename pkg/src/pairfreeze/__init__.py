"""Layer-to-layer (paired layer freezing) training versus standard training,
on a small numpy deep-learning framework with a time/memory benchmark harness."""

from .data import Dataset, load_cifar, parse_cifar_records, subset, synth_dataset
from .l2l import Schedule, Snapshot, Stage, ensemble_predict, make_schedule, train_l2l
from .layers import Layer, Parameter, layer_forward, param_count, set_trainable
from .memory import ALLOC, AllocCounter
from .models import ARCHITECTURES, Model, build_model
from .report import RunReport, compare, measure, write_report
from .tensor import Tape, Tensor, backward, no_grad, precision
from .train import TrainConfig, evaluate, sgd_step, train_epoch, train_standard

__version__ = "0.1.0"

__all__ = [
    "ALLOC", "ARCHITECTURES", "AllocCounter", "Dataset", "Layer", "Model", "Parameter", "RunReport", "Schedule",
    "Snapshot", "Stage", "Tape", "Tensor", "TrainConfig", "backward", "build_model", "compare", "ensemble_predict",
    "evaluate", "layer_forward", "load_cifar", "make_schedule", "measure", "no_grad", "param_count",
    "parse_cifar_records", "precision", "set_trainable", "sgd_step", "subset", "synth_dataset", "train_epoch",
    "train_l2l", "train_standard", "write_report",
]
