"""Layers: named, freezable parameters bound to the primitive ops."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Iterable, Optional, Sequence, Union

import numpy as np

from . import ops
from .errors import ConfigError, LayerIndexError
from .tensor import Tensor

if TYPE_CHECKING:
    from .models import Model

KINDS = ("conv2d", "maxpool", "dropout", "flatten", "dense", "batchnorm", "globalavgpool", "concat", "relu")
PARAMETERIZED = ("conv2d", "dense", "batchnorm")


@dataclass(eq=False)
class Parameter:
    """A named tensor plus the ``trainable`` flag that implements freezing.

    The flag is stored on the tensor as ``requires_grad``: a frozen parameter
    never gets a gradient buffer, yet gradients still flow through the layer
    to earlier ones since the activations keep requiring grad.
    """

    name: str
    tensor: Tensor

    @property
    def trainable(self) -> bool:
        return self.tensor.requires_grad

    @trainable.setter
    def trainable(self, flag: bool) -> None:
        self.tensor.requires_grad = bool(flag)

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @property
    def grad(self) -> Optional[np.ndarray]:
        return self.tensor.grad

    @property
    def nbytes(self) -> int:
        return self.tensor.data.nbytes


@dataclass(eq=False)
class Layer:
    """One entry of a model.

    ``inputs`` lists the indices of the layers whose outputs feed this one;
    ``None`` means "the previous layer" (or the model input for layer 0).
    ``activation`` is applied inside conv2d/dense layers, so a conv with ReLU
    counts as one layer. ``"softmax"`` marks the output layer and is applied
    by the loss, not by the forward pass.
    """

    kind: str
    name: str
    hyper: dict = field(default_factory=dict)
    params: list[Parameter] = field(default_factory=list)
    buffers: dict[str, Tensor] = field(default_factory=dict)
    inputs: Optional[tuple[int, ...]] = None
    activation: Optional[str] = None
    output_shape: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ConfigError(f"unknown layer kind {self.kind!r}")

    @property
    def has_params(self) -> bool:
        return bool(self.params)

    def param(self, name: str) -> Parameter:
        for p in self.params:
            if p.name == name:
                return p
        raise KeyError(name)


def layer_forward(
    layer: Layer,
    x: Union[Tensor, Sequence[Tensor]],
    mode: str = "eval",
    rng: Optional[np.random.Generator] = None,
) -> Tensor:
    kind, hp = layer.kind, layer.hyper
    if kind == "concat":
        return ops.concat_channels(list(x) if not isinstance(x, Tensor) else [x])
    if not isinstance(x, Tensor):
        (x,) = x
    if kind == "conv2d":
        out = ops.conv2d(x, layer.param("weight").tensor, layer.param("bias").tensor, hp.get("padding", "same"))
    elif kind == "dense":
        out = ops.dense(x, layer.param("weight").tensor, layer.param("bias").tensor)
    elif kind == "maxpool":
        out = ops.max_pool2d(x, hp.get("pool", 2))
    elif kind == "dropout":
        out = ops.dropout(x, hp["rate"], mode, rng)
    elif kind == "flatten":
        out = ops.flatten(x)
    elif kind == "batchnorm":
        out = ops.batch_norm2d(
            x,
            layer.param("gamma").tensor,
            layer.param("beta").tensor,
            layer.buffers["running_mean"].data,
            layer.buffers["running_var"].data,
            mode,
            hp.get("momentum", 0.1),
            hp.get("eps", 1e-5),
        )
    elif kind == "globalavgpool":
        out = ops.global_avg_pool(x)
    elif kind == "relu":
        out = ops.relu(x)
    else:  # pragma: no cover - KINDS is closed
        raise ConfigError(kind)
    if layer.activation == "relu":
        out = ops.relu(out)
    return out


def param_count(layer: Layer) -> int:
    """Trainable parameter count; batchnorm running stats are excluded."""
    hp = layer.hyper
    if layer.kind == "conv2d":
        kh, kw = hp["kernel"]
        return (kh * kw * hp["in_channels"] + 1) * hp["filters"]
    if layer.kind == "dense":
        return (hp["in_features"] + 1) * hp["units"]
    if layer.kind == "batchnorm":
        return 2 * hp["channels"]
    return 0


def buffer_count(layer: Layer) -> int:
    return sum(b.size for b in layer.buffers.values())


def set_trainable(model: "Model", layer_indices: Iterable[int], flag: bool) -> None:
    """Set ``trainable`` on every parameter of the given layers (0-based)."""
    indices = list(layer_indices)
    n = len(model.layers)
    for i in indices:
        if not 0 <= i < n:
            raise LayerIndexError(f"layer index {i} out of range for a {n}-layer model")
    for i in indices:
        for p in model.layers[i].params:
            p.trainable = flag


def _fmt_shape(shape: tuple[int, ...]) -> str:
    return "(None, " + ", ".join(str(s) for s in shape) + ")"


def summary(model: "Model") -> str:
    """Text table with one row per layer: index, name, kind, output shape,
    parameter count and trainable flag."""
    rows = [("#", "name", "kind", "output shape", "params", "trainable")]
    for i, layer in enumerate(model.layers):
        if layer.has_params:
            flag = "yes" if all(p.trainable for p in layer.params) else (
                "no" if not any(p.trainable for p in layer.params) else "partial"
            )
        else:
            flag = "-"
        kind = layer.kind + (f"+{layer.activation}" if layer.activation else "")
        rows.append((str(i + 1), layer.name, kind, _fmt_shape(layer.output_shape), str(param_count(layer)), flag))
    widths = [max(len(r[c]) for r in rows) for c in range(len(rows[0]))]
    lines = ["  ".join(cell.ljust(wd) if c < 4 else cell.rjust(wd) for c, (cell, wd) in enumerate(zip(r, widths))) for r in rows]
    lines.insert(1, "-" * len(lines[0]))
    total = sum(param_count(layer) for layer in model.layers)
    frozen = sum(param_count(layer) for layer in model.layers if layer.has_params and not layer.params[0].trainable)
    lines.append("-" * len(lines[0]))
    lines.append(f"total trainable-kind params: {total}")
    lines.append(f"frozen params: {frozen}")
    lines.append(f"parameterized layers: {len(model.trainable_layer_indices())}")
    return "\n".join(lines)

