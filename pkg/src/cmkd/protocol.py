"""Reproducible run directories for every CLI action, plus the multi-seed protocol.

Each ``run_*`` function writes ``manifest.json`` before any training or
evaluation starts, then its artifacts, and finally rewrites the manifest with
the output paths, status and wall time. Metrics CSVs and checkpoints depend
only on (config, seed, dataset), so re-running a manifest reproduces them
byte for byte.
"""

from __future__ import annotations

import copy
import csv
import json
import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import models
from .config import RunConfig, parse_config
from .data import CORRUPTIONS
from .losses import METHODS
from .plotting import plot_correlation_curves, plot_logit_diff, plot_metric_curves, plot_robustness
from .runs import (METRICS_FILE, RunManifest, long_rows, read_manifest, read_metrics_csv,
                   write_long_csv, write_matrix_csv, write_metrics_csv, write_table_csv)
from .trainer import (MetricsRecord, corruption_average, distill, evaluate, logit_confusion_diff,
                      robustness_eval, train_teacher)

logger = logging.getLogger(__name__)

CHECKPOINT = "model.ckpt"
ABLATION = ("kd", "pearson", "pearson_z", "cmkd")


def _require(paths) -> List[Path]:
    out = []
    for p in paths:
        p = Path(p)
        if not p.is_file():
            raise FileNotFoundError(f"input file not found: {p}")
        out.append(p)
    return out


def _materialize(cfg: RunConfig, method: Optional[str] = None, seed: Optional[int] = None) -> RunConfig:
    """Copy of ``cfg`` with overrides applied and the data root made explicit.

    A seed override drives both the batch order and the weight init.
    """
    doc = cfg.to_dict()
    doc["data"]["root"] = str(cfg.data.resolved_root())
    if method is not None:
        doc["distill"]["method"] = method
    if seed is not None:
        doc["train"]["seed"] = seed
        doc["model"]["init_seed"] = seed
    return parse_config(doc)


def _start(command: str, cfg: Optional[RunConfig], out_dir, seed, inputs, **extra):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    man = RunManifest(command=command, config=cfg.to_dict() if cfg else {}, seed=seed, extra=extra)
    try:
        man.add_inputs(_require(inputs))
    except OSError as e:
        man.status = f"error: {e}"
        man.write(out)
        raise
    man.write(out)
    return out, man


def _finish(man: RunManifest, out: Path, outputs: Dict[str, Path]) -> RunManifest:
    man.outputs.update({k: str(v) for k, v in outputs.items()})
    man.finish(out)
    return man


def run_teacher(cfg: RunConfig, out_dir) -> RunManifest:
    cfg = _materialize(cfg)
    out, man = _start("train-teacher", cfg, out_dir, cfg.train.seed, cfg.data.input_files())
    train, test = cfg.data.load()
    result = train_teacher(cfg.model, train, test, cfg.train)
    ckpt, metrics = out / CHECKPOINT, out / METRICS_FILE
    models.save(result.model, ckpt)
    write_metrics_csv(result.metrics, metrics)
    return _finish(man, out, {"checkpoint": ckpt, "metrics": metrics})


def run_distill(teacher_path, cfg: RunConfig, out_dir, method: Optional[str] = None,
                seed: Optional[int] = None, gate_log: bool = False,
                diagnostics: bool = True) -> RunManifest:
    """Distill a student; with ``diagnostics`` also write eval, logit-gap and robustness tables."""
    cfg = _materialize(cfg, method, seed)
    method = cfg.distill.method
    out, man = _start("distill", cfg, out_dir, cfg.train.seed,
                      cfg.data.input_files() + [Path(teacher_path)],
                      teacher=str(teacher_path), method=method, gate_log=gate_log,
                      diagnostics=diagnostics)
    teacher = models.load(teacher_path)
    train, test = cfg.data.load()
    result = distill(teacher, cfg.model, train, test, cfg.train, gate_log=gate_log)
    result.model.metadata["teacher_hash"] = teacher.param_hash()
    outputs = {"checkpoint": out / CHECKPOINT, "metrics": out / METRICS_FILE}
    models.save(result.model, outputs["checkpoint"])
    write_metrics_csv(result.metrics, outputs["metrics"])
    if gate_log:
        gdir = out / "gate_log"
        gdir.mkdir(exist_ok=True)
        for epoch, reports in enumerate(result.gate_reports, start=1):
            doc = {"epoch": epoch, "batches": [r.to_dict() for r in reports]}
            (gdir / f"epoch_{epoch:03d}.json").write_text(json.dumps(doc, sort_keys=True) + "\n")
        outputs["gate_log"] = gdir
    if diagnostics:
        outputs.update(_write_eval(result.model, test, out))
        outputs.update(_write_logit_diff(teacher, result.model, test, out))
        outputs.update(_write_robustness(result.model, test, out, CORRUPTIONS, (1, 2, 3, 4, 5),
                                         cfg.train.seed))
    rows = long_rows_from(result.metrics, out.name, method, cfg.train.seed)
    outputs["correlation_figure"] = plot_correlation_curves(rows, out / "correlation_curves.png")
    return _finish(man, out, outputs)


def long_rows_from(records, run: str, method: str, seed) -> List[dict]:
    return [{"run": run, "method": method, "seed": seed, "epoch": r.epoch, "metric": m,
             "value": getattr(r, m)} for r in records for m in MetricsRecord.header()[1:]]


def _write_eval(model, ds, out: Path) -> Dict[str, Path]:
    res = evaluate(model, ds)
    rows = [{"metric": "top1", "value": res.top1},
            {"metric": "top5", "value": res.top5 if res.top5 is not None else float("nan")}]
    rows += [{"metric": f"class_{c}", "value": a} for c, a in enumerate(res.per_class)]
    path = out / "eval.csv"
    write_table_csv(rows, path)
    return {"eval": path}


def _write_logit_diff(teacher, student, ds, out: Path) -> Dict[str, Path]:
    D = logit_confusion_diff(teacher, student, ds)
    counts = np.bincount(ds.labels, minlength=ds.num_classes)
    path = out / "logit_diff.csv"
    write_matrix_csv(D, path, counts)
    fig = plot_logit_diff(D, out / "logit_diff.png", title=f"|teacher - student| logits, mean {np.nanmean(D):.3f}")
    return {"logit_diff": path, "logit_diff_figure": fig}


def _write_robustness(model, ds, out: Path, kinds, severities, seed) -> Dict[str, Path]:
    table = robustness_eval(model, ds, kinds, severities, seed)
    path = out / "robustness.csv"
    write_table_csv([table], path)
    fig = plot_robustness({"model": table}, out / "robustness.png")
    return {"robustness": path, "robustness_figure": fig}


def _eval_cfg(cfg: Optional[RunConfig]) -> RunConfig:
    return _materialize(cfg or RunConfig())


def run_eval(checkpoint, cfg: Optional[RunConfig], out_dir) -> tuple:
    cfg = _eval_cfg(cfg)
    out, man = _start("eval", cfg, out_dir, None, cfg.data.input_files() + [Path(checkpoint)],
                      checkpoint=str(checkpoint))
    model = models.load(checkpoint)
    _, test = cfg.data.load()
    res = evaluate(model, test)
    outputs = _write_eval(model, test, out)
    return _finish(man, out, outputs), res


def run_robustness(checkpoint, cfg: Optional[RunConfig], out_dir, kinds: Sequence[str] = CORRUPTIONS,
                   severities: Sequence[int] = (1, 2, 3, 4, 5), seed: int = 0) -> tuple:
    cfg = _eval_cfg(cfg)
    out, man = _start("robustness", cfg, out_dir, seed, cfg.data.input_files() + [Path(checkpoint)],
                      checkpoint=str(checkpoint), kinds=list(kinds), severities=list(severities))
    model = models.load(checkpoint)
    _, test = cfg.data.load()
    outputs = _write_robustness(model, test, out, kinds, severities, seed)
    return _finish(man, out, outputs), outputs["robustness"]


def run_logit_diff(teacher_path, student_path, cfg: Optional[RunConfig], out_dir) -> RunManifest:
    cfg = _eval_cfg(cfg)
    out, man = _start("logit-diff", cfg, out_dir, None,
                      cfg.data.input_files() + [Path(teacher_path), Path(student_path)],
                      teacher=str(teacher_path), student=str(student_path))
    teacher, student = models.load(teacher_path), models.load(student_path)
    _, test = cfg.data.load()
    return _finish(man, out, _write_logit_diff(teacher, student, test, out))


def export_metrics(run_dirs: Sequence, out_csv) -> tuple:
    """Merge run directories into one long-format CSV with curve figures beside it."""
    run_dirs = [Path(d) for d in run_dirs]
    _require([d / METRICS_FILE for d in run_dirs])
    out_csv = Path(out_csv)
    out_csv.parent.mkdir(parents=True, exist_ok=True)
    rows = long_rows(run_dirs)
    write_long_csv(rows, out_csv)
    stem = out_csv.with_suffix("")
    figs = [plot_correlation_curves(rows, f"{stem}_correlation.png"),
            plot_metric_curves(rows, "test_accuracy", f"{stem}_accuracy.png", "test accuracy"),
            plot_metric_curves(rows, "train_loss", f"{stem}_train_loss.png", "train loss")]
    return rows, figs


def run_protocol(teacher_cfg: RunConfig, student_cfg: RunConfig, out_dir,
                 methods: Sequence[str] = ABLATION, seeds: Sequence[int] = (0, 1, 2)) -> dict:
    """Train one teacher, distill every (method, seed) from it, and summarize.

    Writes ``teacher/``, ``runs/<method>_seed<k>/``, ``metrics_long.csv``,
    ``summary.csv`` / ``summary.json`` and the comparison figures.
    """
    for m in methods:
        if m not in METHODS:
            raise ValueError(f"unknown method {m!r} (valid: {', '.join(METHODS)})")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    man = RunManifest(command="protocol", config={"teacher": _materialize(teacher_cfg).to_dict(),
                                                  "student": _materialize(student_cfg).to_dict()},
                      seed=None, extra={"methods": list(methods), "seeds": list(seeds)})
    man.add_inputs(_require(teacher_cfg.data.input_files()))
    man.write(out)

    teacher_dir = out / "teacher"
    run_teacher(teacher_cfg, teacher_dir)
    teacher_ckpt = teacher_dir / CHECKPOINT
    run_dirs = []
    for seed in seeds:
        for m in methods:
            d = out / "runs" / f"{m}_seed{seed}"
            logger.info("protocol: %s seed %d", m, seed)
            run_distill(teacher_ckpt, student_cfg, d, method=m, seed=seed)
            run_dirs.append(d)
    rows, figs = export_metrics(run_dirs, out / "metrics_long.csv")
    summary = summarize(run_dirs)
    summary["teacher"] = {"checkpoint": str(teacher_ckpt),
                          "test_accuracy": models.load(teacher_ckpt).metadata["final_accuracy"]}
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    flat = []
    for m, v in summary["methods"].items():
        row = {"method": m, **{k: x for k, x in v.items() if not isinstance(x, (dict, list))}}
        row.update({f"robustness_{c}": x for c, x in v["robustness"].items()})
        flat.append(row)
    write_table_csv(flat, out / "summary.csv")

    mean_tables = {m: v["robustness"] for m, v in summary["methods"].items()}
    figs.append(plot_robustness(mean_tables, out / "robustness.png"))
    for m in methods:
        mats = [_read_matrix(d / "logit_diff.csv") for d in run_dirs if read_manifest(d)["extra"]["method"] == m]
        D = np.nanmean(mats, axis=0)
        figs.append(plot_logit_diff(D, out / f"logit_diff_{m}.png", title=f"{m}: mean {np.nanmean(D):.3f}"))
    _finish(man, out, {"summary": out / "summary.json", "metrics_long": out / "metrics_long.csv",
                       **{Path(f).stem: f for f in figs}})
    return summary


def _read_matrix(path) -> np.ndarray:
    with open(path, newline="") as f:
        rows = list(csv.reader(f))[1:]
    return np.array([[float(v) if v else np.nan for v in r[2:]] for r in rows])


def _read_table(path) -> dict:
    with open(path, newline="") as f:
        (row,) = list(csv.DictReader(f))
    return {k: float(v) for k, v in row.items()}


def summarize(run_dirs: Sequence) -> dict:
    """Seed-averaged final metrics per method, plus the per-run values."""
    per: Dict[str, List[dict]] = {}
    for d in map(Path, run_dirs):
        man = read_manifest(d)
        last = read_metrics_csv(d / METRICS_FILE)[-1]
        rob = _read_table(d / "robustness.csv")
        per.setdefault(man["extra"]["method"], []).append({
            "seed": man["seed"],
            "test_accuracy": last.test_accuracy,
            "mean_spearman_ts": last.mean_spearman_ts,
            "mean_pearson_ts": last.mean_pearson_ts,
            "logit_diff_mean": float(np.nanmean(_read_matrix(d / "logit_diff.csv"))),
            "corruption_average": corruption_average(rob),
            "robustness": rob,
        })
    methods = {}
    for m, runs in per.items():
        keys = ("test_accuracy", "mean_spearman_ts", "mean_pearson_ts", "logit_diff_mean", "corruption_average")
        agg = {k: float(np.mean([r[k] for r in runs])) for k in keys}
        agg["robustness"] = {c: float(np.mean([r["robustness"][c] for r in runs])) for c in runs[0]["robustness"]}
        agg["runs"] = runs
        methods[m] = agg
    return {"methods": methods}


def rerun(manifest_path, out_dir):
    """Replay the command recorded in a manifest into ``out_dir``."""
    man = json.loads(Path(manifest_path).read_text())
    cmd, extra = man["command"], man.get("extra", {})
    cfg = parse_config(copy.deepcopy(man["config"])) if man["command"] != "protocol" else None
    if cmd == "train-teacher":
        return run_teacher(cfg, out_dir)
    if cmd == "distill":
        return run_distill(extra["teacher"], cfg, out_dir, gate_log=extra.get("gate_log", False),
                           diagnostics=extra.get("diagnostics", True))
    if cmd == "eval":
        return run_eval(extra["checkpoint"], cfg, out_dir)[0]
    if cmd == "robustness":
        return run_robustness(extra["checkpoint"], cfg, out_dir, extra["kinds"], extra["severities"],
                              man["seed"])[0]
    if cmd == "logit-diff":
        return run_logit_diff(extra["teacher"], extra["student"], cfg, out_dir)
    if cmd == "protocol":
        return run_protocol(parse_config(man["config"]["teacher"]), parse_config(man["config"]["student"]),
                            out_dir, extra["methods"], extra["seeds"])
    raise ValueError(f"manifest command {cmd!r} cannot be replayed")
