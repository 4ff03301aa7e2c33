"""Run measurement, report serialization and method comparison."""

from __future__ import annotations

import csv
import gc
import io
import json
import os
import tempfile
import time
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, NamedTuple, Optional, Sequence, TypeVar, Union

from .errors import ReportError
from .memory import ALLOC, AllocCounter

SCHEMA = "pairfreeze/v1"
CSV_HEADER = ("architecture", "method", "total_training_seconds", "accuracy", "peak_memory_bytes")
TIME_FIELDS = ("total_training_seconds", "seconds", "time_ratio")
METHODS = ("standard", "l2l")

T = TypeVar("T")


class Measurement(NamedTuple):
    result: Any
    seconds: float
    peak_bytes: int
    baseline_bytes: int


def measure(run: Callable[[], T], counter: AllocCounter = ALLOC) -> Measurement:
    """Run ``run()`` and return its result, wall seconds and the allocation
    high-water mark reached while it ran.

    ``peak_bytes`` is absolute (it includes whatever was live on entry);
    ``baseline_bytes`` is what was live on entry. Not reentrant.
    """
    gc.collect()
    counter.reset_peak()
    baseline = counter.live_bytes
    start = time.perf_counter()
    result = run()
    seconds = time.perf_counter() - start
    return Measurement(result, seconds, counter.peak_bytes, baseline)


@dataclass
class StageRecord:
    stage: int
    layers: list[str]
    layer_indices: list[int]
    epochs: int
    seconds: float
    final_loss: Optional[float]
    trainable_params: int


@dataclass
class RunReport:
    method: str
    architecture: str
    dataset: str
    config: dict
    total_training_seconds: float
    peak_memory_bytes: int
    accuracy: float
    parameter_bytes: int
    epoch_losses: list[float] = field(default_factory=list)
    stages: Optional[list[StageRecord]] = None

    def __post_init__(self) -> None:
        if self.method not in METHODS:
            raise ReportError(f"unknown method {self.method!r}")
        if not 0.0 <= self.accuracy <= 1.0:
            raise ReportError(f"accuracy {self.accuracy} outside [0, 1]")
        if self.total_training_seconds < 0:
            raise ReportError("negative training time")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunReport":
        d = dict(d)
        stages = d.get("stages")
        if stages is not None:
            d["stages"] = [StageRecord(**s) for s in stages]
        try:
            return cls(**d)
        except TypeError as exc:
            raise ReportError(f"malformed report: {exc}") from exc


def write_report(reports: Sequence[RunReport], fmt: str = "json", extra: Optional[dict] = None) -> bytes:
    """Serialize reports. JSON keeps field order; CSV holds the summary
    columns only, reals with six decimals, rows in input order."""
    if fmt == "json":
        doc = OrderedDict([("schema", SCHEMA), ("reports", [r.to_dict() for r in reports])])
        if extra:
            doc.update(extra)
        return (json.dumps(doc, indent=2) + "\n").encode()
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in reports:
            w.writerow(
                [r.architecture, r.method, f"{r.total_training_seconds:.6f}", f"{r.accuracy:.6f}", r.peak_memory_bytes]
            )
        return buf.getvalue().encode()
    raise ReportError(f"unknown report format {fmt!r}")


def read_reports(data: Union[bytes, str]) -> list[RunReport]:
    doc = json.loads(data)
    if doc.get("schema") != SCHEMA:
        raise ReportError(f"unsupported schema {doc.get('schema')!r}")
    return [RunReport.from_dict(r) for r in doc["reports"]]


def read_csv_rows(data: Union[bytes, str]) -> list[dict]:
    text = data.decode() if isinstance(data, bytes) else data
    rows = list(csv.DictReader(io.StringIO(text)))
    out = []
    for row in rows:
        out.append(
            {
                "architecture": row["architecture"],
                "method": row["method"],
                "total_training_seconds": float(row["total_training_seconds"]),
                "accuracy": float(row["accuracy"]),
                "peak_memory_bytes": int(row["peak_memory_bytes"]),
            }
        )
    return out


def strip_times(obj):
    """Copy of a decoded report document with every time field set to None."""
    if isinstance(obj, dict):
        return {k: (None if k in TIME_FIELDS else strip_times(v)) for k, v in obj.items()}
    if isinstance(obj, list):
        return [strip_times(v) for v in obj]
    return obj


def write_atomic(path: Union[str, Path], data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


@dataclass
class ComparisonRow:
    architecture: str
    method: str
    total_training_seconds: float
    accuracy: float
    peak_memory_bytes: int


@dataclass
class ArchitectureRatios:
    architecture: str
    time_ratio: float  # l2l / standard
    memory_ratio: float  # l2l / standard
    accuracy_delta_points: float  # 100 * (l2l - standard)
    l2l_less_accurate: bool


@dataclass
class ComparisonTable:
    rows: list[ComparisonRow]
    ratios: list[ArchitectureRatios]

    def to_dict(self) -> dict:
        return {"rows": [asdict(r) for r in self.rows], "ratios": [asdict(r) for r in self.ratios]}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in self.rows:
            w.writerow(
                [r.architecture, r.method, f"{r.total_training_seconds:.6f}", f"{r.accuracy:.6f}", r.peak_memory_bytes]
            )
        w.writerow([])
        w.writerow(["architecture", "time_ratio", "memory_ratio", "accuracy_delta_points", "l2l_less_accurate"])
        for q in self.ratios:
            w.writerow(
                [
                    q.architecture,
                    f"{q.time_ratio:.6f}",
                    f"{q.memory_ratio:.6f}",
                    f"{q.accuracy_delta_points:.6f}",
                    str(q.l2l_less_accurate).lower(),
                ]
            )
        return buf.getvalue()


def compare(reports: Sequence[RunReport]) -> ComparisonTable:
    """Group reports by architecture and compute l2l/standard ratios where
    both methods are present. An l2l run that is less accurate is flagged,
    not treated as an error."""
    rows = [
        ComparisonRow(r.architecture, r.method, r.total_training_seconds, r.accuracy, r.peak_memory_bytes)
        for r in reports
    ]
    by_arch: "OrderedDict[str, dict[str, RunReport]]" = OrderedDict()
    for r in reports:
        by_arch.setdefault(r.architecture, {})[r.method] = r
    ratios = []
    for arch, methods in by_arch.items():
        if "standard" not in methods or "l2l" not in methods:
            continue
        std, l2l = methods["standard"], methods["l2l"]
        if std.dataset != l2l.dataset:
            raise ReportError(f"{arch}: cannot compare runs on {std.dataset!r} and {l2l.dataset!r}")
        ratios.append(
            ArchitectureRatios(
                arch,
                _ratio(l2l.total_training_seconds, std.total_training_seconds),
                _ratio(l2l.peak_memory_bytes, std.peak_memory_bytes),
                100.0 * (l2l.accuracy - std.accuracy),
                l2l.accuracy < std.accuracy,
            )
        )
    return ComparisonTable(rows, ratios)


def _ratio(a: float, b: float) -> float:
    if b == 0:
        return 1.0 if a == 0 else float("inf")
    return a / b


def format_bytes(n: int) -> str:
    """Human-readable size using binary units (MiB shown as MB, as in most tools)."""
    size = float(n)
    for unit in ("B", "KB", "MB", "GB"):
        if abs(size) < 1024 or unit == "GB":
            return f"{size:.2f} {unit}" if unit != "B" else f"{int(size)} B"
        size /= 1024
    return f"{size:.2f} GB"  # pragma: no cover
