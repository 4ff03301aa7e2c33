"""Tensor type, the recording tape and reverse-mode backward."""

from __future__ import annotations

import contextlib
import os
import threading
import weakref
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

from .errors import GradientError, NumericalError
from .memory import track


class _State(threading.local):
    def __init__(self) -> None:
        self.dtype = np.dtype(np.float32)
        self.grad_enabled = True
        self.tapes: list[Tape] = []


_state = _State()


def get_default_dtype() -> np.dtype:
    return _state.dtype


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily change the dtype new tensors are created with.

    ``precision(np.float64)`` is how gradient checks get enough digits for
    central differences; training always runs in float32.
    """
    prev = _state.dtype
    _state.dtype = np.dtype(dtype)
    try:
        yield
    finally:
        _state.dtype = prev


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


def grad_enabled() -> bool:
    return _state.grad_enabled


def nan_checks_enabled() -> bool:
    return os.environ.get("PAIRFREEZE_CHECK_NANS", "") not in ("", "0")


class Tensor:
    """An n-d float array with an optional gradient buffer.

    Tensors produced by recorded ops remember their position on the tape
    (``_idx``) so backward can find them; leaves have ``_idx is None``.
    """

    __slots__ = ("data", "requires_grad", "_grad", "_tape", "_gen", "_idx", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None) -> None:
        arr = np.asarray(data, dtype=dtype if dtype is not None else _state.dtype)
        self.data: np.ndarray = track(arr)
        self.requires_grad = bool(requires_grad)
        self._grad: Optional[np.ndarray] = None
        self._tape: Optional[weakref.ref] = None
        self._gen = -1
        self._idx: Optional[int] = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def grad(self) -> Optional[np.ndarray]:
        return self._grad

    @grad.setter
    def grad(self, value: Optional[np.ndarray]) -> None:
        if value is not None:
            value = np.asarray(value, dtype=self.data.dtype)
            if value.shape != self.data.shape:
                raise GradientError(
                    f"grad shape {value.shape} does not match tensor shape {self.data.shape}"
                )
            track(value)
        self._grad = value

    @property
    def is_leaf(self) -> bool:
        return self._idx is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class _Node:
    __slots__ = ("op", "parents", "backward")

    def __init__(self, op: str, parents: tuple[Tensor, ...], backward: BackwardFn) -> None:
        self.op = op
        self.parents = parents
        self.backward = backward


class Tape:
    """Append-only record of the ops applied since the last backward.

    A node can only reference tensors that already exist, so the node list
    is topologically ordered by construction. Use as a context manager to
    make it the recording target; otherwise a per-thread default is used.
    """

    def __init__(self) -> None:
        self.nodes: list[_Node] = []
        self.generation = 0

    def __len__(self) -> int:
        return len(self.nodes)

    def __enter__(self) -> "Tape":
        _state.tapes.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state.tapes.pop()

    def clear(self) -> None:
        self.nodes.clear()
        self.generation += 1

    def record(self, op: str, out: Tensor, parents: tuple[Tensor, ...], backward: BackwardFn) -> None:
        out._tape = weakref.ref(self)
        out._gen = self.generation
        out._idx = len(self.nodes)
        self.nodes.append(_Node(op, parents, backward))

    def owns(self, t: Tensor) -> bool:
        return t._tape is not None and t._tape() is self and t._gen == self.generation


_default_tapes = threading.local()


def current_tape() -> Tape:
    if _state.tapes:
        return _state.tapes[-1]
    tape = getattr(_default_tapes, "tape", None)
    if tape is None:
        tape = _default_tapes.tape = Tape()
    return tape


def make_result(
    op: str,
    data: np.ndarray,
    parents: tuple[Tensor, ...],
    backward: Optional[BackwardFn],
) -> Tensor:
    """Wrap an op's output, recording it when any parent needs a gradient."""
    if nan_checks_enabled() and not np.all(np.isfinite(data)):
        raise NumericalError(f"{op} produced non-finite values")
    needs = backward is not None and _state.grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs, dtype=data.dtype)
    if needs:
        current_tape().record(op, out, parents, backward)
    return out


def backward(loss: Tensor, tape: Optional[Tape] = None, retain_graph: bool = False) -> None:
    """Populate ``.grad`` on every leaf tensor with ``requires_grad`` that
    ``loss`` depends on. Gradients accumulate into existing buffers."""
    if loss.size != 1:
        raise GradientError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.is_leaf:
        if tape is not None:
            raise GradientError("loss was not produced on the given tape")
        if loss.requires_grad:
            _accumulate(loss, np.ones_like(loss.data))
        return
    owner = loss._tape() if loss._tape is not None else None
    if owner is None or not owner.owns(loss):
        raise GradientError("loss belongs to a tape that was cleared or discarded")
    if tape is not None and tape is not owner:
        raise GradientError("loss was recorded on a different tape")

    pending: dict[int, np.ndarray] = {loss._idx: np.ones_like(loss.data)}
    for i in range(loss._idx, -1, -1):
        g = pending.pop(i, None)
        if g is None:
            continue
        node = owner.nodes[i]
        for parent, pg in zip(node.parents, node.backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent.is_leaf:
                _accumulate(parent, pg)
            elif owner.owns(parent):
                j = parent._idx
                pending[j] = pending[j] + pg if j in pending else pg
            else:
                raise GradientError(f"{node.op} input was recorded on a different tape")
    if not retain_graph:
        owner.clear()


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.array(g, dtype=t.dtype, copy=True)
    else:
        t.grad += g
