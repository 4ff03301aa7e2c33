"""Central-difference gradient checks for every primitive and whole models.

Checks run in float64. A coordinate whose +h / -h evaluations take a
different ReLU or max-pool branch than the unperturbed point is not
differentiable within the stencil; it is discarded and another coordinate
is drawn in its place.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from . import ops
from .models import Model, build_model
from .tensor import Tensor, backward, no_grad, precision

STEP = 1e-5
TOLERANCE = 1e-4


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(1e-8, abs(numeric))


def _evaluate(loss_fn: Callable[[], Tensor]) -> tuple[float, list]:
    with no_grad(), ops.record_switches() as switches:
        value = loss_fn().item()
    return value, switches


def check_gradients(
    loss_fn: Callable[[], Tensor],
    tensors: Sequence[Tensor],
    coords: int = 20,
    step: float = STEP,
    seed: int = 0,
    max_attempts: int = 10,
) -> float:
    """Max relative error between backward and central differences over up
    to ``coords`` sampled coordinates of each tensor.

    ``loss_fn`` must rebuild the scalar loss from the tensors' current data.
    """
    rng = np.random.default_rng(seed)
    for t in tensors:
        t.grad = None
    backward(loss_fn())
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in tensors]
    _, base_switches = _evaluate(loss_fn)

    worst = 0.0
    for t, grad in zip(tensors, analytic):
        flat = t.data.reshape(-1)
        want = min(coords, flat.size)
        candidates = rng.permutation(flat.size)
        checked, pos = 0, 0
        budget = want * max_attempts
        while checked < want and pos < min(len(candidates), budget):
            i = candidates[pos]
            pos += 1
            orig = flat[i]
            flat[i] = orig + step
            f_plus, sw_plus = _evaluate(loss_fn)
            flat[i] = orig - step
            f_minus, sw_minus = _evaluate(loss_fn)
            flat[i] = orig
            if sw_plus != base_switches or sw_minus != base_switches:
                continue
            numeric = (f_plus - f_minus) / (2 * step)
            worst = max(worst, relative_error(float(grad.reshape(-1)[i]), numeric))
            checked += 1
        if checked < want:
            raise RuntimeError(f"only {checked} of {want} coordinates were away from kinks")
    for t in tensors:
        t.grad = None
    return worst


def _leaf(rng: np.random.Generator, *shape: int, scale: float = 1.0) -> Tensor:
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True)


def _projected(out_fn: Callable[[], Tensor], shape: tuple[int, ...], rng: np.random.Generator) -> Callable[[], Tensor]:
    """Scalar loss ``sum(out * R)`` for a fixed random ``R``."""
    weights = rng.standard_normal(shape)
    return lambda: ops.weighted_sum(out_fn(), weights)


def op_checks(seed: int = 0, coords: int = 20) -> dict[str, float]:
    """Max relative error per primitive."""
    rng = np.random.default_rng(seed)
    results: dict[str, float] = {}
    with precision(np.float64):
        x = _leaf(rng, 2, 3, 6, 6)
        w = _leaf(rng, 4, 3, 3, 3, scale=0.5)
        b = _leaf(rng, 4)
        err_same = check_gradients(
            _projected(lambda: ops.conv2d(x, w, b, "same"), (2, 4, 6, 6), rng), [x, w, b], coords, seed=seed
        )
        err_valid = check_gradients(
            _projected(lambda: ops.conv2d(x, w, b, "valid"), (2, 4, 4, 4), rng), [x, w, b], coords, seed=seed
        )
        results["conv2d"] = max(err_same, err_valid)

        xd = _leaf(rng, 3, 5)
        wd = _leaf(rng, 5, 4)
        bd = _leaf(rng, 4)
        results["dense"] = check_gradients(_projected(lambda: ops.dense(xd, wd, bd), (3, 4), rng), [xd, wd, bd], coords)

        xr = _leaf(rng, 2, 3, 4, 4)
        results["relu"] = check_gradients(_projected(lambda: ops.relu(xr), (2, 3, 4, 4), rng), [xr], coords)

        xp = _leaf(rng, 2, 3, 4, 4)
        results["max_pool2d"] = check_gradients(_projected(lambda: ops.max_pool2d(xp), (2, 3, 2, 2), rng), [xp], coords)

        xo = _leaf(rng, 4, 6)
        results["dropout"] = check_gradients(
            _projected(lambda: ops.dropout(xo, 0.3, "train", np.random.default_rng(7)), (4, 6), rng), [xo], coords
        )

        xf = _leaf(rng, 2, 3, 2, 2)
        results["flatten"] = check_gradients(_projected(lambda: ops.flatten(xf), (2, 12), rng), [xf], coords)

        xb = _leaf(rng, 3, 2, 3, 3)
        gamma = Tensor(1.0 + 0.1 * rng.standard_normal(2), requires_grad=True)
        beta = _leaf(rng, 2)
        rm, rv = rng.standard_normal(2), 1.0 + rng.random(2)

        def bn(mode):
            return lambda: ops.batch_norm2d(xb, gamma, beta, rm.copy(), rv.copy(), mode)

        results["batch_norm2d"] = max(
            check_gradients(_projected(bn("train"), (3, 2, 3, 3), rng), [xb, gamma, beta], coords),
            check_gradients(_projected(bn("eval"), (3, 2, 3, 3), rng), [xb, gamma, beta], coords),
        )

        xg = _leaf(rng, 2, 3, 3, 4)
        results["global_avg_pool"] = check_gradients(_projected(lambda: ops.global_avg_pool(xg), (2, 3), rng), [xg], coords)

        parts = [_leaf(rng, 2, c, 3, 3) for c in (1, 2, 3)]
        results["concat_channels"] = check_gradients(
            _projected(lambda: ops.concat_channels(parts), (2, 6, 3, 3), rng), parts, coords
        )

        logits = _leaf(rng, 5, 7)
        labels = rng.integers(0, 7, size=5)
        results["softmax_cross_entropy"] = check_gradients(
            lambda: ops.softmax_cross_entropy(logits, labels)[0], [logits], coords
        )
    return results


def model_check(
    model: Model,
    n_images: int = 2,
    coords: int = 20,
    seed: int = 0,
    mode: Optional[str] = None,
) -> float:
    """Check every parameter tensor of a float64 model under cross-entropy.

    ``mode`` defaults to eval for models with dropout (dropout disabled) and
    to train otherwise, so batchnorm is checked on batch statistics.
    """
    rng = np.random.default_rng(seed)
    if mode is None:
        mode = "eval" if any(layer.kind == "dropout" for layer in model.layers) else "train"
    x = Tensor(rng.standard_normal((n_images,) + tuple(model.input_shape)), dtype=model.dtype)
    labels = rng.integers(0, model.num_classes, size=n_images)
    tensors = [p.tensor for p in model.parameters()]
    for t in tensors:
        t.requires_grad = True
    buffers = [(t, t.data.copy()) for layer in model.layers for t in layer.buffers.values()]

    def loss_fn():
        for t, saved in buffers:  # keep running stats fixed between evaluations
            np.copyto(t.data, saved)
        return ops.softmax_cross_entropy(model.forward(x, mode), labels)[0]

    return check_gradients(loss_fn, tensors, coords, seed=seed)


def cnn12_check(seed: int = 0, coords: int = 20, n_images: int = 4) -> float:
    with precision(np.float64):
        model = build_model("cnn12", (3, 32, 32), 10, seed)
    return model_check(model, n_images=n_images, coords=coords, seed=seed)


def run_suite(seed: int = 0, coords: int = 20) -> dict[str, float]:
    results = op_checks(seed, coords)
    results["cnn12"] = cnn12_check(seed, coords)
    return results
