"""Command-line entry point.

Exit codes: 0 success, 1 runtime failure (a structured error), 2 usage error.
Diagnostics go to stderr; reports go to ``--out`` or stdout.
"""

from __future__ import annotations

import argparse
import logging
import sys
from typing import Optional, Sequence

from threadpoolctl import threadpool_limits

from . import data as data_mod
from .errors import PairFreezeError
from .gradcheck import TOLERANCE, run_suite
from .l2l import schedule_for, train_l2l
from .layers import param_count, summary
from .models import ARCHITECTURES, build_model
from .report import compare, format_bytes, write_atomic, write_report
from .train import TrainConfig, train_standard

log = logging.getLogger("pairfreeze")

SYNTH_TRAIN_PER_CLASS = 250
SYNTH_TEST_PER_CLASS = 100
SCHEDULE_MODES = {"trainable": "trainable_only", "all": "all_layers"}


def _int_list(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _arch_list(text: str) -> list[str]:
    names = [t.strip() for t in text.split(",") if t.strip()]
    bad = [n for n in names if n not in ARCHITECTURES]
    if bad or not names:
        raise argparse.ArgumentTypeError(f"unknown architecture {', '.join(bad) or text!r}; choose from {', '.join(ARCHITECTURES)}")
    return names


def _experiment_flags() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("experiment")
    g.add_argument("--dataset", choices=("cifar100", "cifar10", "synthetic"), default="synthetic", help="data source (default: %(default)s)")
    g.add_argument("--data-dir", default=None, help="directory holding the CIFAR binary files (required for cifar10/cifar100)")
    g.add_argument("--classes", type=_int_list, default=None, help="comma-separated class ids to keep; for synthetic data only the count matters (default: all / 2 synthetic)")
    g.add_argument("--per-class", type=int, default=None, help=f"training samples per class (default: all; {SYNTH_TRAIN_PER_CLASS} synthetic)")
    g.add_argument("--epochs", type=int, default=10, help="epochs (per stage for --budget per-stage) (default: %(default)s)")
    g.add_argument("--batch-size", type=int, default=64, help="minibatch size (default: %(default)s)")
    g.add_argument("--lr", type=float, default=0.01, help="SGD learning rate (default: %(default)s)")
    g.add_argument("--momentum", type=float, default=0.9, help="SGD momentum (default: %(default)s)")
    g.add_argument("--budget", choices=("per-stage", "split"), default="per-stage", help="l2l epoch budget: every stage gets --epochs, or --epochs is split across stages (default: %(default)s)")
    g.add_argument("--schedule-mode", choices=tuple(SCHEDULE_MODES), default="trainable", help="index parameterized layers only, or every layer (default: %(default)s)")
    g.add_argument("--seed", type=int, default=42, help="seed for init, sampling, shuffling and dropout (default: %(default)s)")
    g.add_argument("--threads", type=int, default=1, help="BLAS threads (default: %(default)s)")
    g.add_argument("--format", choices=("json", "csv"), default="json", help="report format for --out (default: %(default)s)")
    g.add_argument("--quiet", action="store_true", help="suppress per-epoch progress lines")
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pairfreeze", description="Layer-to-layer vs standard training benchmark.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    exp = _experiment_flags()

    p = sub.add_parser("train", parents=[exp], help="train one architecture with one method")
    p.add_argument("--arch", choices=tuple(ARCHITECTURES), default="cnn12", help="architecture (default: %(default)s)")
    p.add_argument("--method", choices=("standard", "l2l"), default="standard", help="training method (default: %(default)s)")
    p.add_argument("--out", default=None, help="write the report here (default: stdout)")

    p = sub.add_parser("compare", parents=[exp], help="run both methods with the same config and compare")
    p.add_argument("--arch", type=_arch_list, default=["cnn12"], help="architecture or comma-separated list (default: cnn12)")
    p.add_argument("--out", default=None, help="write reports and comparison as JSON here (default: not written)")

    for name, text in (("schedule", "print the l2l stage table"), ("describe", "print the layer summary")):
        p = sub.add_parser(name, help=text)
        p.add_argument("--arch", choices=tuple(ARCHITECTURES), default="cnn12", help="architecture (default: %(default)s)")
        p.add_argument("--num-classes", type=int, default=100, help="classifier width (default: %(default)s)")
        if name == "schedule":
            p.add_argument("--schedule-mode", choices=tuple(SCHEDULE_MODES), default="trainable", help="(default: %(default)s)")

    p = sub.add_parser("gradcheck", help="finite-difference check of every op and CNN-12 (float64)")
    p.add_argument("--seed", type=int, default=0, help="sampling seed (default: %(default)s)")
    p.add_argument("--coords", type=int, default=20, help="coordinates sampled per tensor (default: %(default)s)")
    return parser


def _validate(parser: argparse.ArgumentParser, args: argparse.Namespace) -> None:
    checks = [
        (args.epochs < 0, "--epochs must be >= 0"),
        (args.batch_size < 1, "--batch-size must be >= 1"),
        (args.lr < 0, "--lr must be >= 0"),
        (not 0 <= args.momentum < 1, "--momentum must be in [0, 1)"),
        (args.seed < 0, "--seed must be >= 0"),
        (args.threads < 1, "--threads must be >= 1"),
        (args.per_class is not None and args.per_class < 1, "--per-class must be >= 1"),
        (args.dataset != "synthetic" and not args.data_dir, f"--data-dir is required for --dataset {args.dataset}"),
        (args.dataset == "synthetic" and args.classes is not None and len(args.classes) < 2, "synthetic data needs at least 2 classes"),
    ]
    for failed, message in checks:
        if failed:
            parser.error(message)


def load_data(args: argparse.Namespace):
    if args.dataset == "synthetic":
        n_classes = len(args.classes) if args.classes else 2
        per_class = args.per_class or SYNTH_TRAIN_PER_CLASS
        train = data_mod.synth_dataset(per_class, n_classes, 32, seed=args.seed)
        test = data_mod.synth_dataset(SYNTH_TEST_PER_CLASS, n_classes, 32, seed=args.seed + 1)
        return train, test
    train, test = data_mod.load_cifar(args.data_dir, args.dataset)
    if args.classes is not None:
        train = data_mod.subset(train, args.classes, args.per_class, args.seed)
        test = data_mod.subset(test, args.classes, None, args.seed)
    elif args.per_class is not None:
        train = data_mod.subset(train, range(train.num_classes), args.per_class, args.seed)
    return train, test


def _config(args: argparse.Namespace) -> TrainConfig:
    return TrainConfig(args.epochs, args.batch_size, args.lr, args.momentum, args.seed, shuffle=True)


def run_method(arch: str, method: str, train, test, args: argparse.Namespace):
    model = build_model(arch, train.image_shape, train.num_classes, args.seed)
    cfg = _config(args)
    if method == "standard":
        return train_standard(model, train, test, cfg)
    report, _ = train_l2l(model, train, test, cfg, args.budget, SCHEDULE_MODES[args.schedule_mode])
    return report


def _emit(report_bytes: bytes, out: Optional[str]) -> None:
    if out:
        write_atomic(out, report_bytes)
    else:
        sys.stdout.write(report_bytes.decode())


def cmd_train(args: argparse.Namespace) -> int:
    train, test = load_data(args)
    report = run_method(args.arch, args.method, train, test, args)
    log.info(
        "%s/%s accuracy=%.4f time=%.2fs peak=%s",
        report.architecture, report.method, report.accuracy, report.total_training_seconds, format_bytes(report.peak_memory_bytes),
    )
    _emit(write_report([report], args.format), args.out)
    return 0


def cmd_compare(args: argparse.Namespace) -> int:
    train, test = load_data(args)
    reports = []
    for arch in args.arch:
        for method in ("standard", "l2l"):
            reports.append(run_method(arch, method, train, test, args))
    table = compare(reports)
    for q in table.ratios:
        if q.l2l_less_accurate:
            log.warning("%s: l2l accuracy below standard (%.2f points)", q.architecture, q.accuracy_delta_points)
    sys.stdout.write(table.to_csv())
    if args.out:
        write_atomic(args.out, write_report(reports, "json", {"comparison": table.to_dict()}))
    return 0


def cmd_schedule(args: argparse.Namespace) -> int:
    model = build_model(args.arch, (3, 32, 32), args.num_classes, 0)
    schedule = schedule_for(model, SCHEDULE_MODES[args.schedule_mode])
    domain_note = "parameterized layers" if schedule.mode == "trainable_only" else "all layers"
    print(f"{args.arch}: {len(schedule)} stages over {schedule.n_layers} {domain_note}")
    rows = [("stage", "student", "teacher", "trainable params")]
    for stage, layers in zip(schedule.stages, schedule.layer_indices(model)):
        cells = []
        for pos, li in zip(stage.positions, layers):
            cells.append(f"#{pos} {model.layers[li].name} (layer {li + 1})")
        if stage.teacher is None:
            cells.append("-")
        rows.append((str(stage.index), cells[0], cells[1], str(sum(param_count(model.layers[i]) for i in layers))))
    widths = [max(len(r[c]) for r in rows) for c in range(4)]
    for r in rows:
        print("  ".join(cell.ljust(w) for cell, w in zip(r, widths)).rstrip())
    return 0


def cmd_describe(args: argparse.Namespace) -> int:
    model = build_model(args.arch, (3, 32, 32), args.num_classes, 0)
    print(f"{args.arch}: input (3, 32, 32), {args.num_classes} classes")
    print(summary(model))
    return 0


def cmd_gradcheck(args: argparse.Namespace) -> int:
    results = run_suite(args.seed, args.coords)
    ok = True
    width = max(len(k) for k in results)
    for name, err in results.items():
        passed = err < TOLERANCE
        ok &= passed
        print(f"{name.ljust(width)}  max_rel_err={err:.3e}  {'ok' if passed else 'FAIL'}")
    print(f"tolerance {TOLERANCE:g}: {'all passed' if ok else 'FAILED'}")
    return 0 if ok else 1


COMMANDS = {
    "train": cmd_train,
    "compare": cmd_compare,
    "schedule": cmd_schedule,
    "describe": cmd_describe,
    "gradcheck": cmd_gradcheck,
}


def _log_to_stderr(level: int) -> None:
    # rebind on every call so the handler follows the current sys.stderr
    for h in [h for h in log.handlers if getattr(h, "_pairfreeze", False)]:
        log.removeHandler(h)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(message)s"))
    handler._pairfreeze = True
    log.addHandler(handler)
    log.setLevel(level)
    log.propagate = False


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command in ("train", "compare"):
        _validate(parser, args)
        _log_to_stderr(logging.WARNING if args.quiet else logging.INFO)
    try:
        threads = getattr(args, "threads", 1)
        with threadpool_limits(limits=threads):
            return COMMANDS[args.command](args)
    except PairFreezeError as exc:
        print(f"pairfreeze: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
