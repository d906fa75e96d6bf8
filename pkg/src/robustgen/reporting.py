"""Report emission: JSON keeps full precision, CSV rounds floats to 6 significant digits.

Absent values are written as ``null`` in both formats, never as 0.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .analysis import LandscapeGrid, SparsityReport
from .evaluation import CorruptionReport, RobustnessReport
from .training import TrainLog


def fmt(value) -> str:
    if value is None:
        return "null"
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return f"{float(value):.6g}"
    return str(value)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if np.isfinite(v) else ("inf" if v > 0 else "-inf" if v < 0 else "nan")
    return obj


def write_json(path, obj) -> Path:
    path = Path(path)
    path.write_text(json.dumps(_jsonable(obj), indent=2) + "\n")
    return path


def write_csv(path, header: Iterable[str], rows: Iterable[Iterable]) -> Path:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(list(header))
    for row in rows:
        w.writerow([fmt(v) for v in row])
    path = Path(path)
    path.write_text(buf.getvalue())
    return path


# ---------------------------------------------------------------- per type


def robustness_rows(report: RobustnessReport):
    yield ("clean_acc", "", report.clean_acc)
    for name, acc in report.per_attack_acc.items():
        yield ("per_attack_acc", name, acc)
    yield ("worst_case_acc", "", report.worst_case_acc)


def parse_robustness_csv(path) -> dict:
    """Read back a robustness CSV into {clean_acc, per_attack_acc, worst_case_acc}."""
    out: dict = {"per_attack_acc": {}}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            value = None if row["value"] == "null" else float(row["value"])
            if row["field"] == "per_attack_acc":
                out["per_attack_acc"][row["attack"]] = value
            else:
                out[row["field"]] = value
    return out


def sparsity_rows(reports: Mapping[str, SparsityReport]):
    for group, r in reports.items():
        yield (group, r.ratio, r.threshold, r.max_abs_weight, r.size)


def histogram_rows(reports: Mapping[str, SparsityReport]):
    for group, r in reports.items():
        for lo, hi, c in zip(r.bin_edges[:-1], r.bin_edges[1:], r.counts):
            yield (group, lo, hi, int(c))


def emit_report(reports: Mapping[str, object], out_dir, fmt_name: str = "json") -> list[Path]:
    """Write each named report as ``<name>.json`` or ``<name>.csv``; returns the paths written."""
    if fmt_name not in ("json", "csv"):
        raise ValueError(f"format must be json or csv, got {fmt_name!r}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for name, report in reports.items():
        path = out_dir / f"{name}.{fmt_name}"
        if isinstance(report, RobustnessReport):
            if fmt_name == "json":
                written.append(write_json(path, report.to_dict()))
            else:
                written.append(write_csv(path, ("field", "attack", "value"), robustness_rows(report)))
        elif isinstance(report, TrainLog):
            if fmt_name == "json":
                written.append(write_json(path, {"records": [r.__dict__ for r in report.records], "lr_trace": report.lr_trace}))
            else:
                written.append(write_csv(path, ("epoch", "split", "metric", "value"), report.rows()))
        elif isinstance(report, LandscapeGrid):
            if fmt_name == "json":
                written.append(write_json(path, {"alphas": report.alphas, "betas": report.betas, "loss": report.loss, "direction_seed": report.direction_seed}))
            else:
                written.append(write_csv(path, ("alpha", "beta", "loss"), report.rows()))
        elif isinstance(report, CorruptionReport):
            if fmt_name == "json":
                written.append(write_json(path, report.to_dict()))
            else:
                rows = [(n, s, e) for (n, s), e in report.per_corruption_error.items()]
                rows += [("mce", "", report.mce), ("one_minus_mce", "", report.one_minus_mce)]
                written.append(write_csv(path, ("corruption", "severity", "error"), rows))
        elif isinstance(report, Mapping) and report and all(isinstance(v, SparsityReport) for v in report.values()):
            if fmt_name == "json":
                written.append(write_json(path, {g: {"ratio": r.ratio, "threshold": r.threshold, "max_abs_weight": r.max_abs_weight, "size": r.size, "bin_edges": r.bin_edges, "counts": r.counts} for g, r in report.items()}))
            else:
                written.append(write_csv(path, ("group", "ratio", "threshold", "max_abs_weight", "size"), sparsity_rows(report)))
        else:
            if fmt_name == "csv":
                raise TypeError(f"no CSV layout for report {name!r} of type {type(report).__name__}")
            written.append(write_json(path, report))
    return written


def sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
