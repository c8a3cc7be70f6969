"""Run-directory I/O: metrics CSV, JSON manifests, matrices, long-format export."""

from __future__ import annotations

import csv
import json
import math
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import __version__
from .models import file_digest
from .trainer import MetricsRecord

METRICS_FILE = "metrics.csv"
MANIFEST_FILE = "manifest.json"
LONG_HEADER = ["run", "method", "seed", "epoch", "metric", "value"]

_argv: Optional[List[str]] = None


def set_invocation_argv(argv: Optional[Sequence[str]]) -> None:
    """Record the command line that manifests should echo (defaults to ``sys.argv``)."""
    global _argv
    _argv = None if argv is None else list(argv)


def _current_argv() -> List[str]:
    return list(_argv) if _argv is not None else list(sys.argv[1:])


def write_metrics_csv(records: Sequence[MetricsRecord], path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(MetricsRecord.header())
        for r in records:
            w.writerow(r.row())


def read_metrics_csv(path) -> List[MetricsRecord]:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    if rows and list(rows[0]) != MetricsRecord.header():
        raise ValueError(f"{path}: unexpected header {list(rows[0])}")
    return [MetricsRecord(epoch=int(r["epoch"]), **{k: float(r[k]) for k in MetricsRecord.header()[1:]})
            for r in rows]


def _fmt(x) -> str:
    return "" if isinstance(x, float) and math.isnan(x) else repr(float(x))


def write_matrix_csv(D: np.ndarray, path, counts: Optional[Sequence[int]] = None) -> None:
    """Rows ``true_class, n_samples, c0..c{C-1}``; a class without samples has blank cells."""
    C = D.shape[1]
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["true_class", "n_samples"] + [f"c{j}" for j in range(C)])
        for i, row in enumerate(D):
            n = counts[i] if counts is not None else ""
            w.writerow([i, n] + [_fmt(v) for v in row])


def write_table_csv(rows: List[Dict], path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (_fmt(v) if isinstance(v, float) else v) for k, v in r.items()})


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: Optional[int]
    argv: List[str] = field(default_factory=_current_argv)
    inputs: Dict[str, str] = field(default_factory=dict)  # path -> sha256
    outputs: Dict[str, str] = field(default_factory=dict)
    tool_version: str = __version__
    status: str = "started"
    wall_time_s: Optional[float] = None
    extra: dict = field(default_factory=dict)
    _t0: float = field(default_factory=time.time, repr=False)

    def add_inputs(self, paths) -> None:
        for p in paths:
            self.inputs[str(p)] = file_digest(p)

    def to_dict(self) -> dict:
        d = {k: v for k, v in self.__dict__.items() if not k.startswith("_")}
        return d

    def write(self, out_dir) -> Path:
        path = Path(out_dir) / MANIFEST_FILE
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
            f.write("\n")
        return path

    def finish(self, out_dir, status: str = "ok") -> Path:
        self.status = status
        self.wall_time_s = round(time.time() - self._t0, 3)
        return self.write(out_dir)


def read_manifest(run_dir) -> dict:
    with open(Path(run_dir) / MANIFEST_FILE) as f:
        return json.load(f)


def long_rows(run_dirs: Sequence) -> List[Dict]:
    """One row per (run, epoch, metric) across the given run directories."""
    rows = []
    for d in run_dirs:
        d = Path(d)
        man = read_manifest(d)
        method = man["extra"].get("method", man["command"])
        seed = man.get("seed")
        for rec in read_metrics_csv(d / METRICS_FILE):
            for metric in MetricsRecord.header()[1:]:
                rows.append({"run": d.name, "method": method, "seed": seed, "epoch": rec.epoch,
                             "metric": metric, "value": getattr(rec, metric)})
    return rows


def write_long_csv(rows: List[Dict], path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(LONG_HEADER)
        for r in rows:
            w.writerow([r["run"], r["method"], r["seed"], r["epoch"], r["metric"], _fmt(r["value"])])


def read_long_csv(path) -> List[Dict]:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    for r in rows:
        r["value"] = float(r["value"]) if r["value"] != "" else math.nan
    return rows
