"""Model container and seeded builders for the four benchmark architectures.

Initialization is He-uniform over fan-in for conv/dense weights with zero
biases; batchnorm starts at gamma=1, beta=0. Every layer draws from its own
PCG64 stream keyed by ``(seed, layer_index)``, so adding a layer never shifts
the weights of the layers before it.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ConfigError, ShapeError
from .layers import Layer, Parameter, layer_forward, param_count
from .memory import track
from .ops import softmax
from .tensor import Tensor, get_default_dtype, no_grad, precision

EVAL_BATCH_SIZE = 256
# He-uniform scale for the softmax classifier. Kept small so a fresh model
# starts near-uniform (loss close to ln K) despite He-scaled hidden layers.
CLASSIFIER_GAIN = 0.01


def layer_rng(seed: int, layer_index: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, layer_index])))


@dataclass(eq=False)
class Model:
    arch: str
    layers: list[Layer]
    input_shape: tuple[int, int, int]
    num_classes: int
    seed: int
    build_kwargs: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        n = len(self.layers)
        self._last_use = list(range(n))
        for i, layer in enumerate(self.layers):
            for j in self._sources(i):
                if j >= 0:
                    self._last_use[j] = max(self._last_use[j], i)

    def _sources(self, i: int) -> tuple[int, ...]:
        inputs = self.layers[i].inputs
        return inputs if inputs is not None else (i - 1,)

    @property
    def dtype(self) -> np.dtype:
        for p in self.parameters():
            return p.data.dtype
        return get_default_dtype()

    def parameters(self) -> list[Parameter]:
        return [p for layer in self.layers for p in layer.params]

    def trainable_parameters(self) -> list[Parameter]:
        return [p for p in self.parameters() if p.trainable]

    def trainable_layer_indices(self) -> list[int]:
        """0-based indices of layers that own parameters, in forward order."""
        return [i for i, layer in enumerate(self.layers) if layer.has_params]

    def param_count(self) -> int:
        return sum(param_count(layer) for layer in self.layers)

    @property
    def param_bytes(self) -> int:
        return sum(t.data.nbytes for t in self.state_tensors())

    def forward(self, x: Tensor, mode: str = "eval", rng: Optional[np.random.Generator] = None) -> Tensor:
        """Return logits of shape (N, num_classes)."""
        if tuple(x.shape[1:]) != tuple(self.input_shape):
            raise ShapeError(f"{self.arch}: expected input (N, {', '.join(map(str, self.input_shape))}), got {x.shape}")
        outs: list[Optional[Tensor]] = [None] * len(self.layers)
        for i, layer in enumerate(self.layers):
            srcs = [x if j < 0 else outs[j] for j in self._sources(i)]
            try:
                outs[i] = layer_forward(layer, srcs, mode, rng)
            except ShapeError as exc:
                raise ShapeError(f"layer {i + 1} ({layer.kind} {layer.name!r}): {exc}") from exc
            for j in self._sources(i):
                if j >= 0 and self._last_use[j] <= i:
                    outs[j] = None
        return outs[-1]

    def predict_proba(self, images: np.ndarray, batch_size: int = EVAL_BATCH_SIZE) -> np.ndarray:
        """Eval-mode softmax probabilities, computed in chunks without recording."""
        chunks = []
        with no_grad():
            for start in range(0, len(images), batch_size):
                x = Tensor(images[start : start + batch_size], dtype=self.dtype)
                chunks.append(softmax(self.forward(x, "eval").data))
                del x
        if not chunks:
            return np.zeros((0, self.num_classes), dtype=self.dtype)
        return np.concatenate(chunks, axis=0)

    def state_tensors(self) -> list[Tensor]:
        """Parameters and buffers (batchnorm running stats), in layer order."""
        out = []
        for layer in self.layers:
            out.extend(p.tensor for p in layer.params)
            out.extend(layer.buffers[k] for k in sorted(layer.buffers))
        return out

    def capture_state(self) -> tuple[np.ndarray, ...]:
        arrays = []
        for t in self.state_tensors():
            a = track(t.data.copy())
            a.setflags(write=False)
            arrays.append(a)
        return tuple(arrays)

    def load_state(self, arrays: Sequence[np.ndarray]) -> None:
        tensors = self.state_tensors()
        if len(arrays) != len(tensors):
            raise ShapeError(f"state has {len(arrays)} arrays, model expects {len(tensors)}")
        for i, (t, a) in enumerate(zip(tensors, arrays)):
            if a.shape != t.shape:
                raise ShapeError(f"state array {i} has shape {a.shape}, model expects {t.shape}")
        for t, a in zip(tensors, arrays):
            np.copyto(t.data, a)

    def clone(self) -> "Model":
        """Same architecture and current state, independent storage."""
        with precision(self.dtype):
            twin = ARCHITECTURES[self.arch](self.input_shape, self.num_classes, self.seed, **self.build_kwargs)
        twin.load_state([t.data for t in self.state_tensors()])
        for mine, theirs in zip(self.parameters(), twin.parameters()):
            theirs.trainable = mine.trainable
        return twin


class _Builder:
    def __init__(self, arch: str, input_shape, num_classes: int, seed: int, build_kwargs=None) -> None:
        input_shape = tuple(int(s) for s in input_shape)
        if len(input_shape) != 3 or min(input_shape) < 1:
            raise ConfigError(f"input_shape must be (C, H, W) with positive entries, got {input_shape}")
        if num_classes < 1:
            raise ConfigError(f"num_classes must be positive, got {num_classes}")
        if seed < 0:
            raise ConfigError(f"seed must be non-negative, got {seed}")
        self.arch = arch
        self.input_shape = input_shape
        self.num_classes = int(num_classes)
        self.seed = int(seed)
        self.build_kwargs = build_kwargs or {}
        self.layers: list[Layer] = []
        self.shape: tuple[int, ...] = input_shape
        self._counts: dict[str, int] = {}
        self.dtype = get_default_dtype()

    def _name(self, kind: str) -> str:
        self._counts[kind] = self._counts.get(kind, 0) + 1
        return f"{kind}_{self._counts[kind]}"

    def _push(self, layer: Layer, shape: tuple[int, ...]) -> int:
        layer.output_shape = shape
        self.layers.append(layer)
        self.shape = shape
        return len(self.layers) - 1

    def _uniform(self, shape, fan_in: int, gain: float = 1.0) -> Tensor:
        rng = layer_rng(self.seed, len(self.layers))
        limit = gain * np.sqrt(6.0 / fan_in)
        return Tensor(rng.uniform(-limit, limit, size=shape).astype(self.dtype), requires_grad=True)

    def _zeros(self, n: int, requires_grad: bool = True) -> Tensor:
        return Tensor(np.zeros(n, dtype=self.dtype), requires_grad=requires_grad)

    def conv(self, filters: int, kernel: int = 3, activation: Optional[str] = "relu", padding: str = "same") -> int:
        c, h, w = self.shape
        if padding == "valid":
            h, w = h - kernel + 1, w - kernel + 1
        weight = self._uniform((filters, c, kernel, kernel), c * kernel * kernel)
        layer = Layer(
            "conv2d",
            self._name("conv2d"),
            {"filters": filters, "kernel": (kernel, kernel), "in_channels": c, "padding": padding},
            [Parameter("weight", weight), Parameter("bias", self._zeros(filters))],
            activation=activation,
        )
        return self._push(layer, (filters, h, w))

    def batchnorm(self) -> int:
        c = self.shape[0]
        layer = Layer(
            "batchnorm",
            self._name("batchnorm"),
            {"channels": c, "momentum": 0.1, "eps": 1e-5},
            [
                Parameter("gamma", Tensor(np.ones(c, dtype=self.dtype), requires_grad=True)),
                Parameter("beta", self._zeros(c)),
            ],
            buffers={
                "running_mean": self._zeros(c, requires_grad=False),
                "running_var": Tensor(np.ones(c, dtype=self.dtype)),
            },
        )
        return self._push(layer, self.shape)

    def relu(self) -> int:
        return self._push(Layer("relu", self._name("relu")), self.shape)

    def maxpool(self, pool: int = 2) -> int:
        c, h, w = self.shape
        if h % pool or w % pool:
            raise ShapeError(f"{self.arch}: spatial size {h}x{w} not divisible by pool {pool} at layer {len(self.layers) + 1}")
        return self._push(Layer("maxpool", self._name("maxpool"), {"pool": pool}), (c, h // pool, w // pool))

    def dropout(self, rate: float) -> int:
        return self._push(Layer("dropout", self._name("dropout"), {"rate": rate}), self.shape)

    def flatten(self) -> int:
        return self._push(Layer("flatten", self._name("flatten")), (int(np.prod(self.shape)),))

    def global_avg_pool(self) -> int:
        return self._push(Layer("globalavgpool", self._name("globalavgpool")), (self.shape[0],))

    def dense(self, units: int, activation: Optional[str] = "relu") -> int:
        (d,) = self.shape
        layer = Layer(
            "dense",
            self._name("dense"),
            {"units": units, "in_features": d},
            [
                Parameter("weight", self._uniform((d, units), d, CLASSIFIER_GAIN if activation == "softmax" else 1.0)),
                Parameter("bias", self._zeros(units)),
            ],
            activation=activation,
        )
        return self._push(layer, (units,))

    def concat(self, sources: Sequence[int]) -> int:
        shapes = [self.layers[j].output_shape for j in sources]
        channels = sum(s[0] for s in shapes)
        layer = Layer("concat", self._name("concat"), {}, inputs=tuple(sources))
        return self._push(layer, (channels,) + tuple(shapes[0][1:]))

    def build(self) -> Model:
        return Model(self.arch, self.layers, self.input_shape, self.num_classes, self.seed, dict(self.build_kwargs))


def _require_divisible(arch: str, input_shape, divisor: int) -> None:
    _, h, w = input_shape
    if h % divisor or w % divisor:
        raise ShapeError(f"{arch}: input H={h}, W={w} must be divisible by {divisor}")


def build_cnn12(input_shape=(3, 32, 32), num_classes: int = 100, seed: int = 42) -> Model:
    """The 12-layer baseline CNN: two conv-conv-pool-dropout stages, then a
    512-unit dense layer, dropout and the softmax classifier."""
    _require_divisible("cnn12", input_shape, 4)
    b = _Builder("cnn12", input_shape, num_classes, seed)
    b.conv(32)
    b.conv(32)
    b.maxpool()
    b.dropout(0.25)
    b.conv(64)
    b.conv(64)
    b.maxpool()
    b.dropout(0.25)
    b.flatten()
    b.dense(512)
    b.dropout(0.5)
    b.dense(num_classes, activation="softmax")
    return b.build()


def build_vgg_style(input_shape=(3, 32, 32), num_classes: int = 100, seed: int = 42) -> Model:
    """VGG16 conv plan (2-2-3-3-3 convs of 64/128/256/512/512 filters, each
    block closed by a 2x2 max-pool) with a single dense-512 head."""
    _require_divisible("vgg16", input_shape, 32)
    b = _Builder("vgg16", input_shape, num_classes, seed)
    for convs, filters in ((2, 64), (2, 128), (3, 256), (3, 512), (3, 512)):
        for _ in range(convs):
            b.conv(filters)
        b.maxpool()
    b.flatten()
    b.dense(512)
    b.dropout(0.5)
    b.dense(num_classes, activation="softmax")
    return b.build()


def build_groupconv_net(input_shape=(3, 32, 32), num_classes: int = 100, seed: int = 42) -> Model:
    """Four groups of two conv-batchnorm-relu units (64, 128, 256, 512
    filters), a max-pool after each group, global average pooling and the
    softmax classifier. No residual branches: this is the "ResNext" network
    exactly as far as its layer list goes."""
    _require_divisible("resnext", input_shape, 16)
    b = _Builder("resnext", input_shape, num_classes, seed)
    for filters in (64, 128, 256, 512):
        for _ in range(2):
            b.conv(filters, activation=None)
            b.batchnorm()
            b.relu()
        b.maxpool()
    b.global_avg_pool()
    b.dense(num_classes, activation="softmax")
    return b.build()


def build_densenet_style(
    input_shape=(3, 32, 32),
    num_classes: int = 100,
    seed: int = 42,
    growth_rate: int = 12,
    block_sizes: Sequence[int] = (4, 4, 4),
) -> Model:
    """Dense blocks of bottleneck (1x1, 4k filters) + 3x3 (k filters) units
    whose outputs are concatenated onto the block's running feature map.

    Between blocks a transition halves the spatial size (max-pool) and the
    channel count (1x1 conv). ``k`` is ``growth_rate``.
    """
    block_sizes = tuple(int(s) for s in block_sizes)
    if growth_rate < 1 or not block_sizes or min(block_sizes) < 1:
        raise ConfigError("densenet: growth_rate and every block size must be positive")
    _require_divisible("densenet", input_shape, 2 ** (len(block_sizes) - 1))
    kwargs = {"growth_rate": growth_rate, "block_sizes": list(block_sizes)}
    b = _Builder("densenet", input_shape, num_classes, seed, kwargs)
    b.conv(2 * growth_rate, activation=None)
    b.batchnorm()
    running = b.relu()
    for bi, size in enumerate(block_sizes):
        for _ in range(size):
            b.conv(4 * growth_rate, kernel=1, activation=None)
            b.batchnorm()
            b.relu()
            b.conv(growth_rate, activation=None)
            b.batchnorm()
            new = b.relu()
            running = b.concat([running, new])
        if bi < len(block_sizes) - 1:
            b.maxpool()
            running = b.conv(max(1, b.shape[0] // 2), kernel=1)
    b.global_avg_pool()
    b.dense(num_classes, activation="softmax")
    return b.build()


ARCHITECTURES: dict[str, Callable[..., Model]] = {
    "cnn12": build_cnn12,
    "vgg16": build_vgg_style,
    "resnext": build_groupconv_net,
    "densenet": build_densenet_style,
}


def build_model(arch: str, input_shape=(3, 32, 32), num_classes: int = 100, seed: int = 42, **kwargs) -> Model:
    try:
        builder = ARCHITECTURES[arch]
    except KeyError:
        raise ConfigError(f"unknown architecture {arch!r}; choose from {', '.join(ARCHITECTURES)}") from None
    return builder(input_shape, num_classes, seed, **kwargs)
