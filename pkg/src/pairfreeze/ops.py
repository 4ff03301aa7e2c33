"""Differentiable primitives over NCHW tensors.

Each op computes its forward result with numpy, then registers a closure
that maps the output gradient to one gradient per input (``None`` for
inputs that do not need one). Values needed only for a gradient nobody
asked for are not saved.
"""

from __future__ import annotations

import contextlib
from typing import Iterator, Optional, Sequence

import numpy as np

from .errors import ConfigError, ShapeError
from .memory import track
from .tensor import Tensor, make_result

# Set by record_switches(); relu and max-pool append their branch decisions
# so gradient checks can discard stencils that straddle a kink.
_switch_log: Optional[list] = None


@contextlib.contextmanager
def record_switches() -> Iterator[list]:
    global _switch_log
    prev, _switch_log = _switch_log, []
    try:
        yield _switch_log
    finally:
        _switch_log = prev


def _log_switch(arr: np.ndarray) -> None:
    if _switch_log is not None:
        _switch_log.append(arr.tobytes())


def _check_ndim(name: str, t: Tensor, ndim: int, layout: str) -> None:
    if t.data.ndim != ndim:
        raise ShapeError(f"{name}: expected {layout} input, got shape {t.shape}")


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, padding: str = "same") -> Tensor:
    """Stride-1 2-D convolution (cross-correlation) via im2col."""
    _check_ndim("conv2d", x, 4, "N,C,H,W")
    _check_ndim("conv2d weight", weight, 4, "O,C,kH,kW")
    n, c, h, w = x.shape
    o, cw, kh, kw = weight.shape
    if c != cw:
        raise ShapeError(f"conv2d: input has C={c} channels but weight expects C={cw}")
    if bias.shape != (o,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} does not match O={o}")
    if padding == "same":
        if kh % 2 == 0 or kw % 2 == 0:
            raise ShapeError(f"conv2d: 'same' padding needs odd kernel, got {kh}x{kw}")
        ph, pw = (kh - 1) // 2, (kw - 1) // 2
    elif padding == "valid":
        ph = pw = 0
    else:
        raise ConfigError(f"conv2d: unknown padding {padding!r}")
    ho, wo = h + 2 * ph - kh + 1, w + 2 * pw - kw + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than input H={h}, W={w}")

    # work in NHWC so every im2col slice copy is contiguous over channels
    xp = np.zeros((n, h + 2 * ph, w + 2 * pw, c), dtype=x.dtype)
    xp[:, ph : ph + h, pw : pw + w, :] = x.data.transpose(0, 2, 3, 1)
    cols = _im2col(xp, kh, kw, ho, wo)
    wmat = weight.data.transpose(0, 2, 3, 1).reshape(o, kh * kw * c)
    del xp
    out = cols @ wmat.T
    out += bias.data
    out = np.ascontiguousarray(out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2))

    need_x, need_w, need_b = x.requires_grad, weight.requires_grad, bias.requires_grad
    saved_cols = cols if need_w else None
    del cols

    def backward(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, o)
        gx = gw = gb = None
        if need_b:
            gb = gm.sum(axis=0)
        if need_w:
            gw = np.ascontiguousarray((gm.T @ saved_cols).reshape(o, kh, kw, c).transpose(0, 3, 1, 2))
        if need_x:
            dcols = (gm @ wmat).reshape(n, ho, wo, kh, kw, c)
            dxp = np.zeros((n, h + 2 * ph, w + 2 * pw, c), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, i : i + ho, j : j + wo, :] += dcols[:, :, :, i, j, :]
            gx = np.ascontiguousarray(dxp[:, ph : ph + h, pw : pw + w, :].transpose(0, 3, 1, 2))
        return gx, gw, gb

    return make_result("conv2d", out, (x, weight, bias), backward)


def _im2col(xp: np.ndarray, kh: int, kw: int, ho: int, wo: int) -> np.ndarray:
    """Rows are output pixels (n, y, x); columns are ordered (i, j, channel)."""
    n, c = xp.shape[0], xp.shape[3]
    cols = np.empty((n, ho, wo, kh, kw, c), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j, :] = xp[:, i : i + ho, j : j + wo, :]
    track(cols)
    return cols.reshape(n * ho * wo, kh * kw * c)


def max_pool2d(x: Tensor, pool: int = 2) -> Tensor:
    _check_ndim("max_pool2d", x, 4, "N,C,H,W")
    n, c, h, w = x.shape
    if h % pool or w % pool:
        raise ShapeError(f"max_pool2d: H={h}, W={w} not divisible by pool={pool}")
    ho, wo = h // pool, w // pool
    win = x.data.reshape(n, c, ho, pool, wo, pool).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, pool * pool)
    # argmax returns the first maximum, which fixes the tie-break rule
    idx = track(win.argmax(axis=-1))
    _log_switch(idx)
    out = win.max(axis=-1)

    def backward(g):
        gw = np.zeros((n, c, ho, wo, pool * pool), dtype=g.dtype)
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
        return (gw.reshape(n, c, ho, wo, pool, pool).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w),)

    return make_result("max_pool2d", out, (x,), backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    _log_switch(mask)
    out = np.where(mask, x.data, 0).astype(x.dtype, copy=False)

    def backward(g):
        return (g * mask,)

    if x.requires_grad:
        track(mask)
    return make_result("relu", out, (x,), backward)


def dense(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    _check_ndim("dense", x, 2, "N,D")
    if weight.data.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"dense: input has D={x.shape[1]} features but weight is {weight.shape}")
    if bias.shape != (weight.shape[1],):
        raise ShapeError(f"dense: bias shape {bias.shape} does not match U={weight.shape[1]}")
    out = x.data @ weight.data
    out += bias.data
    need_x, need_w, need_b = x.requires_grad, weight.requires_grad, bias.requires_grad
    xin = x.data if need_w else None

    def backward(g):
        return (
            g @ weight.data.T if need_x else None,
            xin.T @ g if need_w else None,
            g.sum(axis=0) if need_b else None,
        )

    return make_result("dense", out, (x, weight, bias), backward)


def dropout(x: Tensor, rate: float, mode: str, rng: Optional[np.random.Generator]) -> Tensor:
    """Inverted dropout: survivors are scaled by 1/(1-rate) so eval is identity."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout: rate must be in [0, 1), got {rate}")
    if mode == "eval" or rate == 0.0:
        return x
    if mode != "train":
        raise ConfigError(f"dropout: unknown mode {mode!r}")
    if rng is None:
        raise ConfigError("dropout: train mode needs a random generator")
    keep = rng.random(x.shape, dtype=x.dtype) >= rate
    mask = track(keep.astype(x.dtype) * x.dtype.type(1.0 / (1.0 - rate)))
    out = x.data * mask

    def backward(g):
        return (g * mask,)

    return make_result("dropout", out, (x,), backward)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    in_shape = x.shape
    out = x.data.reshape(shape)

    def backward(g):
        return (g.reshape(in_shape),)

    return make_result("reshape", out, (x,), backward)


def flatten(x: Tensor) -> Tensor:
    """Collapse every non-batch dim, channel-major (C, then H, then W)."""
    return reshape(x, (x.shape[0], -1))


def batch_norm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    mode: str,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalization.

    In train mode the running statistics are updated in place (running
    variance uses the unbiased batch variance).
    """
    _check_ndim("batch_norm2d", x, 4, "N,C,H,W")
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch_norm2d: gamma/beta must have shape ({c},)")
    m = n * h * w
    bshape = (1, c, 1, 1)
    if mode == "train":
        if m < 2:
            raise ShapeError("batch_norm2d: train mode needs N*H*W >= 2 to estimate a variance")
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        running_mean *= 1 - momentum
        running_mean += momentum * mean
        running_var *= 1 - momentum
        running_var += momentum * var * (m / (m - 1))
    elif mode == "eval":
        mean, var = running_mean, running_var
    else:
        raise ConfigError(f"batch_norm2d: unknown mode {mode!r}")
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = track((x.data - mean.reshape(bshape)) * inv_std.reshape(bshape))
    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)
    need_x, need_g, need_b = x.requires_grad, gamma.requires_grad, beta.requires_grad
    train = mode == "train"

    def backward(g):
        gg = (g * xhat).sum(axis=(0, 2, 3)) if need_g else None
        gb = g.sum(axis=(0, 2, 3)) if need_b else None
        gx = None
        if need_x:
            dxhat = g * gamma.data.reshape(bshape)
            if train:
                s1 = dxhat.sum(axis=(0, 2, 3)).reshape(bshape)
                s2 = (dxhat * xhat).sum(axis=(0, 2, 3)).reshape(bshape)
                gx = (inv_std.reshape(bshape) / m) * (m * dxhat - s1 - xhat * s2)
            else:
                gx = dxhat * inv_std.reshape(bshape)
        return gx, gg, gb

    return make_result("batch_norm2d", out, (x, gamma, beta), backward)


def global_avg_pool(x: Tensor) -> Tensor:
    _check_ndim("global_avg_pool", x, 4, "N,C,H,W")
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3))

    def backward(g):
        return (np.ascontiguousarray(np.broadcast_to((g / (h * w))[:, :, None, None], (n, c, h, w))),)

    return make_result("global_avg_pool", out, (x,), backward)


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    if not xs:
        raise ShapeError("concat_channels: need at least one input")
    for i, t in enumerate(xs):
        _check_ndim(f"concat_channels input {i}", t, 4, "N,C,H,W")
    ref = xs[0].shape
    for i, t in enumerate(xs[1:], start=1):
        for axis, label in ((0, "N"), (2, "H"), (3, "W")):
            if t.shape[axis] != ref[axis]:
                raise ShapeError(
                    f"concat_channels: input {i} has {label}={t.shape[axis]}, expected {ref[axis]}"
                )
    if len(xs) == 1:
        return xs[0]
    out = np.concatenate([t.data for t in xs], axis=1)
    bounds = np.cumsum([0] + [t.shape[1] for t in xs])

    def backward(g):
        return tuple(g[:, bounds[i] : bounds[i + 1]] for i in range(len(xs)))

    return make_result("concat_channels", out, tuple(xs), backward)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, labels) -> tuple[Tensor, Tensor]:
    """Mean cross-entropy of row-wise softmax; returns ``(loss, probs)``."""
    _check_ndim("softmax_cross_entropy", logits, 2, "N,K")
    n, k = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ShapeError(f"softmax_cross_entropy: expected {n} labels, got shape {labels.shape}")
    if not np.issubdtype(labels.dtype, np.integer):
        raise ShapeError("softmax_cross_entropy: labels must be integers")
    bad = np.nonzero((labels < 0) | (labels >= k))[0]
    if bad.size:
        i = int(bad[0])
        raise ShapeError(f"softmax_cross_entropy: label {int(labels[i])} at row {i} outside [0, {k})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    probs = np.exp(logp)
    rows = np.arange(n)
    loss = np.asarray(-logp[rows, labels].mean(), dtype=logits.dtype)

    def backward(g):
        d = probs.copy()
        d[rows, labels] -= 1
        return (d * (g / n),)

    return make_result("softmax_cross_entropy", loss, (logits,), backward), Tensor(probs, dtype=logits.dtype)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")

    def backward(g):
        return g, g

    return make_result("add", a.data + b.data, (a, b), backward)


def tensor_sum(x: Tensor) -> Tensor:
    shape = x.shape

    def backward(g):
        return (np.full(shape, g, dtype=x.dtype),)

    return make_result("sum", np.asarray(x.data.sum(), dtype=x.dtype), (x,), backward)


def weighted_sum(x: Tensor, weights: np.ndarray) -> Tensor:
    """``sum(x * weights)`` with ``weights`` held constant."""
    weights = np.asarray(weights, dtype=x.dtype)
    if weights.shape != x.shape:
        raise ShapeError(f"weighted_sum: weights {weights.shape} vs input {x.shape}")

    def backward(g):
        return (weights * g,)

    return make_result("weighted_sum", np.asarray((x.data * weights).sum(), dtype=x.dtype), (x,), backward)
