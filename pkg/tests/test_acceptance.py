"""Acceptance criteria, one test each, at the stated tolerances.

Every test records a ``criterion N: PASS|FAIL ...`` line that is printed in
the terminal summary. Run standalone with ``python3 tests/test_acceptance.py``.
"""

import json
import math
import os
import re
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from pairfreeze.cli import main as cli_main
from pairfreeze.data import (
    PIXELS,
    encode_cifar_records,
    parse_cifar_records,
    read_split,
    record_size,
    synth_dataset,
)
from pairfreeze.errors import DataFormatError
from pairfreeze.gradcheck import TOLERANCE
from pairfreeze.l2l import ensemble_predict, make_schedule, schedule_for, take_snapshot, train_l2l
from pairfreeze.models import ARCHITECTURES, build_model
from pairfreeze.ops import softmax_cross_entropy
from pairfreeze.report import strip_times
from pairfreeze.tensor import Tensor
from pairfreeze.train import TrainConfig, evaluate, iterate_batches, train_standard

try:
    from conftest import ACCEPTANCE_LINES
except ImportError:  # pragma: no cover - standalone run
    ACCEPTANCE_LINES = []


def record(n, passed, detail, seconds, limit):
    within = seconds < limit
    ok = passed and within
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'} ({detail}; {seconds:.1f}s of {limit:g}s)"
    print(line)
    ACCEPTANCE_LINES.append(line)
    assert passed, line
    assert within, line


def describe_counts(capsys, arch="cnn12"):
    assert cli_main(["describe", "--arch", arch]) == 0
    out = capsys.readouterr().out
    counts, n_param_layers = [], None
    for line in out.splitlines():
        m = re.match(r"^\d+\s+\S+\s+(\S+)\s+\(.*\)\s+(\d+)\s+(yes|no|partial|-)$", line)
        if m and m.group(3) != "-":
            counts.append(int(m.group(2)))
        m = re.match(r"parameterized layers: (\d+)", line)
        if m:
            n_param_layers = int(m.group(1))
    return counts, n_param_layers


# -- 1 -----------------------------------------------------------------------


def test_criterion_1_parameter_counts(capsys):
    start = time.perf_counter()
    counts, _ = describe_counts(capsys)
    expected = [896, 896, 18496, 18496, 2097664, 513 * 100]
    record(1, counts == expected, f"describe {counts} vs required {expected}", time.perf_counter() - start, 1)


# -- 2 -----------------------------------------------------------------------


REQUIRED_OPS = ("conv2d", "dense", "relu", "max_pool2d", "batch_norm2d", "global_avg_pool",
                "concat_channels", "softmax_cross_entropy", "cnn12")


def test_criterion_2_gradient_suite(capsys):
    start = time.perf_counter()
    code = cli_main(["gradcheck", "--coords", "20"])
    out = capsys.readouterr().out
    errs = {m.group(1): float(m.group(2)) for m in re.finditer(r"^(\S+)\s+max_rel_err=(\S+)", out, re.M)}
    ok = code == 0 and all(errs.get(k, 1.0) < TOLERANCE for k in REQUIRED_OPS)
    worst = max(errs, key=errs.get)
    record(2, ok, f"{len(errs)} checks, worst {worst}={errs[worst]:.2e} < {TOLERANCE:g}", time.perf_counter() - start, 60)


# -- 3 -----------------------------------------------------------------------


def enumerate_pairs(n):
    """Brute force: try every (a, b) pair and keep the mirror pairs a + b = n + 1, a <= b."""
    out = []
    for a in range(1, n + 1):
        for b in range(a, n + 1):
            if a + b == n + 1:
                out.append((a, None if a == b else b))
    return out


def test_criterion_3_schedule_oracle():
    start = time.perf_counter()
    ok = True
    for n in range(1, 65):
        sched = make_schedule(n)
        positions = [p for s in sched.stages for p in s.positions]
        ok &= sched.pairs() == enumerate_pairs(n)
        ok &= sorted(positions) == list(range(1, n + 1)) and len(set(positions)) == len(positions)
        ok &= len(sched) == math.ceil(n / 2)
    record(3, ok, "n = 1..64 match enumeration, coverage and disjointness", time.perf_counter() - start, 1)


# -- 4 -----------------------------------------------------------------------


def test_criterion_4_freezing_exactness():
    start = time.perf_counter()
    train, test = synth_dataset(250, 2, 32, seed=42), synth_dataset(100, 2, 32, seed=43)
    model = build_model("cnn12", train.image_shape, 2, 42)
    initial = model.capture_state()
    _, snaps = train_l2l(model, train, test, TrainConfig(epochs=1, batch_size=64, seed=42))
    owner = [i for i, layer in enumerate(model.layers) for _ in layer.params]
    states = [initial] + [s.arrays for s in snaps]
    ok = True
    for k, layers in enumerate(schedule_for(model).layer_indices(model)):
        for before, after, li in zip(states[k], states[k + 1], owner):
            unchanged = np.array_equal(before, after)
            ok &= (not unchanged) if li in layers else unchanged
    record(4, ok, f"{len(snaps)} stages checked bitwise", time.perf_counter() - start, 120)


# -- 5 and 6 share runs --------------------------------------------------------

SEEDS = (41, 42, 43)
_RUNS: dict = {}


def paired_runs(seed):
    if seed not in _RUNS:
        train = synth_dataset(250, 2, 32, seed=seed, noise=0.1)
        test = synth_dataset(100, 2, 32, seed=seed + 1, noise=0.1)
        cfg = TrainConfig(epochs=10, batch_size=32, learning_rate=0.01, momentum=0.9, seed=seed)
        std = train_standard(build_model("cnn12", train.image_shape, 2, seed), train, test, cfg)
        l2l, _ = train_l2l(build_model("cnn12", train.image_shape, 2, seed), train, test, cfg, budget="per-stage")
        _RUNS[seed] = (std, l2l)
    return _RUNS[seed]


def test_criterion_5_learning_sanity():
    start = time.perf_counter()
    std_acc, l2l_acc = [], []
    for seed in SEEDS:
        std, l2l = paired_runs(seed)
        std_acc.append(std.accuracy)
        l2l_acc.append(l2l.accuracy)
    std_ok = sum(a >= 0.9 for a in std_acc) >= 2
    l2l_ok = sum(a >= 0.7 for a in l2l_acc) >= 2
    detail = f"standard {std_acc} (>=0.9), l2l {l2l_acc} (>=0.7)"
    record(5, std_ok and l2l_ok, detail, time.perf_counter() - start, 600)


def test_criterion_6_directional_trends():
    start = time.perf_counter()
    std, l2l = paired_runs(42)
    slower = l2l.total_training_seconds > std.total_training_seconds
    margin = l2l.peak_memory_bytes - std.peak_memory_bytes
    bigger = margin >= 2 * std.parameter_bytes
    detail = (
        f"time {l2l.total_training_seconds:.1f}s vs {std.total_training_seconds:.1f}s, "
        f"peak margin {margin / std.parameter_bytes:.2f}x params (>=2), "
        f"accuracy delta {100 * (l2l.accuracy - std.accuracy):+.1f} points (not gated)"
    )
    elapsed = time.perf_counter() - start
    if 42 in _RUNS and elapsed < 1:  # shared with criterion 5; charge the seed-42 run time
        elapsed = std.total_training_seconds + l2l.total_training_seconds
    record(6, slower and bigger, detail, elapsed, 600)


# -- 7 -----------------------------------------------------------------------


def test_criterion_7_ensemble_normalization():
    start = time.perf_counter()
    images = synth_dataset(50, 2, 32, seed=0).images
    model = build_model("cnn12", (3, 32, 32), 2, 0)
    snaps = []
    for seed in (0, 1, 2):
        donor = build_model("cnn12", (3, 32, 32), 2, seed)
        for p in donor.parameters():  # spread the heads so members disagree
            if p.data.ndim == 2 and p.data.shape[1] == 2:
                p.data[...] *= 100
        snaps.append(take_snapshot(donor, seed + 1))
    probs, _ = ensemble_predict(snaps, model, images)
    sums_ok = np.abs(probs.sum(axis=1) - 1).max() <= 1e-6
    single, single_pred = ensemble_predict([snaps[0]], model, images)
    repeated, repeated_pred = ensemble_predict([snaps[0]] * 5, model, images)
    model.load_state(snaps[0].arrays)
    plain = model.predict_proba(images).astype(np.float64)
    idem = np.array_equal(repeated, single) and np.array_equal(single, plain) and np.array_equal(repeated_pred, single_pred)
    record(7, sums_ok and idem, f"max |row sum - 1| = {np.abs(probs.sum(axis=1) - 1).max():.1e}, K=5 copies identical",
           time.perf_counter() - start, 10)


# -- 8 -----------------------------------------------------------------------


def _handmade(variant, seed):
    r = np.random.default_rng(seed)
    pixels = r.integers(0, 256, size=(3, PIXELS), dtype=np.uint8)
    fine = r.integers(0, 100 if variant == "cifar100" else 10, size=3)
    raw = bytearray()
    for i in range(3):
        if variant == "cifar100":
            raw.append(int(fine[i]) % 20)
        raw.append(int(fine[i]))
        raw += pixels[i].tobytes()
    return bytes(raw), pixels.reshape(3, 3, 32, 32), fine


def _real_cifar100_dir():
    for cand in (os.environ.get("PAIRFREEZE_CIFAR100_DIR"), "data/cifar-100-binary", "/root/data/cifar-100-binary"):
        if cand and (Path(cand) / "train.bin").is_file():
            return Path(cand)
    return None


def test_criterion_8_cifar_parser():
    start = time.perf_counter()
    ok = True
    for variant in ("cifar10", "cifar100"):
        raw, pixels, labels = _handmade(variant, 5)
        ds = parse_cifar_records(raw, variant)
        ok &= np.array_equal(ds.labels, labels)
        ok &= np.array_equal(np.rint(ds.images * 255).astype(np.uint8), pixels)
        coarse = labels % 20 if variant == "cifar100" else None
        ok &= encode_cifar_records(ds.images, ds.labels, variant, coarse) == raw
    rng = np.random.default_rng(0)
    mutated = errors = 0
    for i in range(1500):
        variant = ("cifar10", "cifar100")[i % 2]
        data = bytearray(_handmade(variant, i)[0])
        op = rng.integers(0, 4)
        if op == 0:
            data = data[: rng.integers(0, len(data))]
        elif op == 1:
            rec = record_size(variant)
            data[rng.integers(0, 3) * rec + (1 if variant == "cifar100" else 0)] = rng.integers(100, 256)
        elif op == 2:
            for _ in range(rng.integers(1, 30)):
                data[rng.integers(0, len(data))] = rng.integers(0, 256)
        else:
            data += bytes(rng.integers(0, 256, size=rng.integers(1, 4000), dtype=np.uint8))
        mutated += 1
        try:
            parse_cifar_records(bytes(data), variant)
        except DataFormatError:
            errors += 1
        except Exception:  # anything else is a crash
            ok = False
    detail = f"round trips exact, {mutated} mutated inputs ({errors} structured errors, 0 crashes)"
    real = _real_cifar100_dir()
    if real is not None:
        train, test = read_split(real, "cifar100", "train"), read_split(real, "cifar100", "test")
        ok &= len(train) == 50000 and len(test) == 10000 and np.all(np.bincount(train.labels, minlength=100) == 500)
        detail += "; real CIFAR-100 counts verified"
    else:
        detail += "; real CIFAR-100 files absent, optional check skipped"
    record(8, ok and mutated >= 1000, detail, time.perf_counter() - start, 30)


# -- 9 -----------------------------------------------------------------------


def test_criterion_9_determinism(tmp_path):
    start = time.perf_counter()
    docs = []
    for run in range(2):
        out = tmp_path / f"run{run}.json"
        cmd = [sys.executable, "-m", "pairfreeze", "compare", "--arch", "cnn12", "--dataset", "synthetic",
               "--epochs", "2", "--seed", "42", "--threads", "1", "--out", str(out)]
        proc = subprocess.run(cmd, capture_output=True, text=True, check=False)
        assert proc.returncode == 0, proc.stderr
        docs.append(json.dumps(strip_times(json.loads(out.read_text())), indent=2))
    record(9, docs[0] == docs[1], "two compare invocations identical modulo time fields", time.perf_counter() - start, 300)


# -- 10 ----------------------------------------------------------------------


def test_criterion_10_chance_behavior():
    start = time.perf_counter()
    data = synth_dataset(10, 100, 32, seed=42)
    model = build_model("cnn12", data.image_shape, 100, 42)
    rng = np.random.default_rng(42)
    first = next(iterate_batches(len(data), 64, rng, True))
    loss, _ = softmax_cross_entropy(model.forward(Tensor(data.images[first]), "train", rng), data.labels[first])
    acc = evaluate(model, data)
    gap = abs(loss.item() - math.log(100))
    ok = gap <= 0.2 and abs(acc - 0.01) <= 0.01
    record(10, ok, f"first-batch loss {loss.item():.4f} vs ln(100) {math.log(100):.4f}, accuracy {acc:.3f} on {len(data)}",
           time.perf_counter() - start, 30)


# -- 11 ----------------------------------------------------------------------


def test_criterion_11_all_builders(capsys):
    start = time.perf_counter()
    train, test = synth_dataset(100, 2, 32, seed=7), synth_dataset(20, 2, 32, seed=8)
    cfg = TrainConfig(epochs=1, batch_size=32, seed=7)
    ok, parts = True, []
    for arch in ARCHITECTURES:
        _, n_layers = describe_counts(capsys, arch)
        std = train_standard(build_model(arch, train.image_shape, 2, 7), train, test, cfg)
        l2l, snaps = train_l2l(build_model(arch, train.image_shape, 2, 7), train, test, cfg)
        stages_ok = len(l2l.stages) == len(snaps) == math.ceil(n_layers / 2)
        ok &= stages_ok and std.accuracy >= 0 and l2l.accuracy >= 0
        parts.append(f"{arch} {len(snaps)}/{n_layers} stages")
    record(11, ok, ", ".join(parts), time.perf_counter() - start, 900)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(pytest.main([__file__, "-q", "-s"]))
