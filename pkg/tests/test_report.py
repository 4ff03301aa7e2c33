import json

import pytest

from pairfreeze.errors import ReportError
from pairfreeze.report import (
    CSV_HEADER,
    SCHEMA,
    RunReport,
    StageRecord,
    compare,
    format_bytes,
    measure,
    read_csv_rows,
    read_reports,
    strip_times,
    write_atomic,
    write_report,
)
from pairfreeze.memory import AllocCounter


def make(method="standard", arch="cnn12", secs=1.5, acc=0.8, peak=1000, dataset="synthetic"):
    stages = [StageRecord(1, ["conv2d_1", "dense_2"], [1, 12], 1, 0.5, 0.69, 52196)] if method == "l2l" else None
    return RunReport(method, arch, dataset, {"epochs": 1}, secs, peak, acc, 400, [0.7], stages)


def test_json_round_trip_and_schema():
    reports = [make(), make("l2l", secs=3.25, acc=0.82, peak=2000)]
    data = write_report(reports)
    doc = json.loads(data)
    assert list(doc)[0] == "schema" and doc["schema"] == SCHEMA
    back = read_reports(data)
    assert [r.to_dict() for r in back] == [r.to_dict() for r in reports]
    assert isinstance(back[1].stages[0], StageRecord)


def test_csv_columns_and_precision():
    rows = read_csv_rows(write_report([make(secs=1.23456789)], "csv"))
    assert list(rows[0]) == list(CSV_HEADER)
    assert rows[0]["total_training_seconds"] == 1.234568


def test_compare_ratios_and_flag():
    table = compare([make(secs=2.0, peak=1000, acc=0.8), make("l2l", secs=5.0, peak=2500, acc=0.78)])
    (q,) = table.ratios
    assert q.time_ratio == 2.5 and q.memory_ratio == 2.5
    assert q.accuracy_delta_points == pytest.approx(-2.0)
    assert q.l2l_less_accurate
    text = table.to_csv()
    assert text.splitlines()[0] == ",".join(CSV_HEADER) and "true" in text


def test_compare_rejects_mixed_datasets():
    with pytest.raises(ReportError):
        compare([make(), make("l2l", dataset="cifar100")])


def test_report_validation():
    with pytest.raises(ReportError):
        make(acc=1.5)
    with pytest.raises(ReportError):
        make(method="adam")
    with pytest.raises(ReportError):
        read_reports(json.dumps({"schema": "other", "reports": []}))
    with pytest.raises(ReportError):
        write_report([make()], "xml")


def test_strip_times_only_touches_time_fields():
    doc = json.loads(write_report([make("l2l")], "json", {"comparison": {"ratios": [{"time_ratio": 2.0, "memory_ratio": 1.5}]}}))
    s = strip_times(doc)
    assert s["reports"][0]["total_training_seconds"] is None
    assert s["reports"][0]["stages"][0]["seconds"] is None
    assert s["comparison"]["ratios"][0] == {"time_ratio": None, "memory_ratio": 1.5}
    assert s["reports"][0]["accuracy"] == 0.8


def test_measure_counts_high_water_mark():
    import numpy as np

    counter = AllocCounter()
    keep = counter.track(np.zeros(10))

    def run():
        tmp = counter.track(np.zeros(100))
        del tmp
        return "done"

    m = measure(run, counter)
    assert m.result == "done" and m.baseline_bytes == 80 and m.peak_bytes == 880 and m.seconds >= 0
    del keep


def test_write_atomic(tmp_path):
    path = tmp_path / "sub" / "r.json"
    write_atomic(path, b"abc")
    write_atomic(path, b"xyz")
    assert path.read_bytes() == b"xyz"
    assert [p.name for p in path.parent.iterdir()] == ["r.json"]


def test_format_bytes():
    assert format_bytes(512) == "512 B"
    assert format_bytes(5 * 1024 * 1024) == "5.00 MB"
