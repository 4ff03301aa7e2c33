import gc
import threading

import numpy as np
import pytest

from pairfreeze import ops
from pairfreeze.errors import GradientError, NumericalError
from pairfreeze.memory import AllocCounter
from pairfreeze.tensor import Tape, Tensor, backward, get_default_dtype, no_grad, precision


def test_default_dtype_is_float32_and_precision_switches():
    assert get_default_dtype() == np.float32
    with precision(np.float64):
        assert Tensor([1.0]).dtype == np.float64
    assert Tensor([1.0]).dtype == np.float32


def test_chain_rule_through_two_ops():
    x = Tensor(np.array([[1.0, -2.0, 3.0]]), requires_grad=True)
    with Tape() as tape:
        loss = ops.weighted_sum(ops.relu(x), np.array([[2.0, 2.0, 5.0]]))
        backward(loss, tape)
    np.testing.assert_array_equal(x.grad, [[2.0, 0.0, 5.0]])


def test_leaf_reused_twice_accumulates():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    with Tape() as tape:
        backward(ops.tensor_sum(ops.add(x, x)), tape)
    np.testing.assert_array_equal(x.grad, [2.0, 2.0])


def test_gradients_accumulate_across_backward_calls():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    for _ in range(2):
        with Tape() as tape:
            backward(ops.tensor_sum(x), tape)
    np.testing.assert_array_equal(x.grad, [2.0, 2.0])


def test_frozen_tensor_gets_no_grad_and_no_recording():
    w = Tensor(np.ones(3), requires_grad=False)
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        out = ops.tensor_sum(ops.add(x, w))
        backward(out, tape)
    assert w.grad is None
    np.testing.assert_array_equal(x.grad, np.ones(3))
    with Tape() as tape:
        ops.tensor_sum(w)
        assert len(tape) == 0


def test_no_grad_records_nothing():
    x = Tensor(np.ones(2), requires_grad=True)
    with Tape() as tape, no_grad():
        y = ops.tensor_sum(x)
    assert len(tape) == 0 and not y.requires_grad


def test_non_scalar_loss_rejected():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape():
        y = ops.relu(x)
        with pytest.raises(GradientError, match="scalar"):
            backward(y)


def test_backward_twice_without_retain_fails():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        loss = ops.tensor_sum(x)
        backward(loss, tape)
        with pytest.raises(GradientError, match="cleared"):
            backward(loss, tape)


def test_retain_graph_allows_second_backward():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        loss = ops.tensor_sum(x)
        backward(loss, tape, retain_graph=True)
        backward(loss, tape)
    np.testing.assert_array_equal(x.grad, 2 * np.ones(3))


def test_wrong_tape_rejected():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as owner:
        loss = ops.tensor_sum(x)
    assert owner.owns(loss)
    with pytest.raises(GradientError, match="different tape"):
        backward(loss, Tape())


def test_cross_tape_parent_rejected():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape():
        y = ops.relu(x)
    with Tape() as t2:
        loss = ops.tensor_sum(y)
        with pytest.raises(GradientError, match="different tape"):
            backward(loss, t2)


def test_grad_shape_validated():
    x = Tensor(np.ones(3))
    with pytest.raises(GradientError):
        x.grad = np.ones(4)


def test_nan_check_env(monkeypatch):
    monkeypatch.setenv("PAIRFREEZE_CHECK_NANS", "1")
    with pytest.raises(NumericalError):
        ops.tensor_sum(Tensor(np.array([np.inf, -np.inf])))
    monkeypatch.setenv("PAIRFREEZE_CHECK_NANS", "0")
    ops.tensor_sum(Tensor(np.array([np.inf, -np.inf])))


def test_threads_have_independent_tapes():
    errors = []

    def work(seed):
        try:
            r = np.random.default_rng(seed)
            data = r.standard_normal(5)
            x = Tensor(data, requires_grad=True)
            for _ in range(50):
                x.grad = None
                with Tape() as tape:
                    backward(ops.weighted_sum(x, data), tape)
                np.testing.assert_allclose(x.grad, data.astype(np.float32))
        except Exception as exc:  # pragma: no cover - reported below
            errors.append(exc)

    threads = [threading.Thread(target=work, args=(s,)) for s in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert not errors


def test_alloc_counter_tracks_owned_arrays_only():
    counter = AllocCounter()
    a = counter.track(np.zeros(100, dtype=np.float64))
    counter.track(a[:10])  # view: ignored
    counter.track(a)  # duplicate: ignored
    assert counter.live_bytes == 800 and counter.peak_bytes == 800
    del a
    gc.collect()
    assert counter.live_bytes == 0 and counter.peak_bytes == 800
    counter.reset_peak()
    assert counter.peak_bytes == 0
