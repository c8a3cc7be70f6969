"""Teacher pretraining, distillation loops, evaluation and mechanism diagnostics."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .data import CORRUPTIONS, CorruptionSpec, Dataset, corrupt, epoch_permutation
from .errors import ConfigError, ParameterError
from .losses import DistillConfig, GateReport, cross_entropy, distillation_loss, entropy_gate
from .models import Model, ModelSpec, build
from .optim import SGD, step_lr
from .stats import pearson_rows, spearman_rows
from .tensor import Tape, backward

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr_decay_epochs: List[int] = field(default_factory=lambda: [15, 22, 27])
    lr_decay_factor: float = 0.1
    seed: int = 0
    heldout_size: int = 1000
    distill: DistillConfig = field(default_factory=DistillConfig)

    def __post_init__(self):
        if self.epochs < 1:
            raise ParameterError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ParameterError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.lr > 0:
            raise ParameterError(f"lr must be > 0, got {self.lr}")
        if not 0 <= self.momentum < 1:
            raise ParameterError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ParameterError(f"weight_decay must be >= 0, got {self.weight_decay}")
        d = self.lr_decay_epochs
        if any(b <= a for a, b in zip(d, d[1:])) or any(m >= self.epochs or m < 0 for m in d):
            raise ParameterError(f"lr_decay_epochs must be strictly increasing and < epochs, got {d}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class MetricsRecord:
    epoch: int
    train_loss: float
    test_accuracy: float
    mean_pearson_ts: float = math.nan
    mean_spearman_ts: float = math.nan
    gate_high_entropy_fraction: float = math.nan

    @classmethod
    def header(cls) -> List[str]:
        return [f.name for f in fields(cls)]

    def row(self) -> List[str]:
        return [str(self.epoch)] + [repr(float(getattr(self, k))) for k in self.header()[1:]]


@dataclass
class TrainResult:
    model: Model
    metrics: List[MetricsRecord]
    gate_reports: List[List[GateReport]] = field(default_factory=list)


@dataclass
class EvalResult:
    top1: float
    top5: Optional[float]
    per_class: List[float]


def input_stats(ds: Dataset) -> Tuple[float, float]:
    return float(ds.images.mean()), float(ds.images.std())


def normalize(images: np.ndarray, model: Model) -> np.ndarray:
    mean = model.metadata.get("input_mean", 0.0)
    std = model.metadata.get("input_std", 1.0)
    return (images - mean) / std


def model_logits(model: Model, images: np.ndarray, batch_size: int = 1000) -> np.ndarray:
    return model.logits(normalize(images, model), batch_size)


def heldout_indices(n_test: int, size: int, seed: int) -> np.ndarray:
    size = min(size, n_test)
    return np.sort(np.random.default_rng(seed).choice(n_test, size=size, replace=False))


def _check_classes(model: Model, ds: Dataset, what: str):
    if model.spec.num_classes != ds.num_classes:
        raise ConfigError(f"{what} has {model.spec.num_classes} classes but dataset {ds.name!r} has {ds.num_classes}")


def _fit(model: Model, train: Dataset, test: Dataset, cfg: TrainConfig, method: str,
         teacher: Optional[Model] = None, gate_log: bool = False) -> TrainResult:
    dcfg = cfg.distill if teacher is not None else None
    teacher_train = model_logits(teacher, train.images) if teacher is not None else None
    if teacher is not None:
        held = heldout_indices(len(test), cfg.heldout_size, cfg.seed)
        held_images = test.images[held]
        teacher_held = model_logits(teacher, held_images)
        gate_T = dcfg.T if dcfg.gate_at_temperature else 1.0

    opt = SGD(model.parameters(), lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    metrics: List[MetricsRecord] = []
    all_reports: List[List[GateReport]] = []
    n = len(train)
    for epoch in range(cfg.epochs):
        opt.lr = step_lr(cfg.lr, epoch, cfg.lr_decay_epochs, cfg.lr_decay_factor)
        order = epoch_permutation(n, cfg.seed, epoch)
        total, high, reports = 0.0, 0, []
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            x = normalize(train.images[idx], model)
            y = train.labels[idx]
            with Tape():
                logits = model(x)
                if teacher is None:
                    loss = cross_entropy(logits, y)
                    report = None
                else:
                    loss, report = distillation_loss(logits, teacher_train[idx], y, dcfg)
            opt.zero_grad()
            backward(loss)
            opt.step()
            total += loss.item() * len(idx)
            if teacher is not None:
                if report is None:
                    report = entropy_gate(teacher_train[idx], gate_T)
                high += report.counts["high"]
                if gate_log:
                    reports.append(report)
        acc = evaluate(model, test).top1
        rec = MetricsRecord(epoch=epoch + 1, train_loss=total / n, test_accuracy=acc)
        if teacher is not None:
            student_held = model_logits(model, held_images)
            rec.mean_pearson_ts = float(np.nanmean(pearson_rows(teacher_held, student_held)))
            rec.mean_spearman_ts = float(np.nanmean(spearman_rows(teacher_held, student_held)))
            rec.gate_high_entropy_fraction = high / n
            if gate_log:
                all_reports.append(reports)
        logger.info("%s epoch %d: loss %.4f acc %.4f spearman %.4f", method, rec.epoch,
                    rec.train_loss, rec.test_accuracy, rec.mean_spearman_ts)
        metrics.append(rec)
    model.metadata.update(epochs=cfg.epochs, final_accuracy=metrics[-1].test_accuracy,
                          seed=cfg.seed, method=method)
    return TrainResult(model, metrics, all_reports)


def train_teacher(spec: ModelSpec, train: Dataset, test: Dataset, cfg: TrainConfig) -> TrainResult:
    """Plain cross-entropy training with SGD, momentum, weight decay and step decay."""
    model = build(spec)
    _check_classes(model, train, "model spec")
    mean, std = input_stats(train)
    model.metadata.update(input_mean=mean, input_std=std)
    return _fit(model, train, test, cfg, "teacher")


def distill(teacher: Model, student_spec: ModelSpec, train: Dataset, test: Dataset,
            cfg: TrainConfig, gate_log: bool = False) -> TrainResult:
    """Train a fresh student from ``student_spec`` against a frozen teacher."""
    if teacher.spec.num_classes != student_spec.num_classes:
        raise ConfigError(f"teacher has {teacher.spec.num_classes} classes, "
                          f"student spec has {student_spec.num_classes}", path="model.num_classes")
    student = build(student_spec)
    _check_classes(student, train, "student spec")
    mean, std = input_stats(train)
    student.metadata.update(input_mean=mean, input_std=std)
    before = teacher.param_hash()
    result = _fit(student, train, test, cfg, cfg.distill.method, teacher=teacher, gate_log=gate_log)
    if teacher.param_hash() != before:
        raise RuntimeError("teacher parameters changed during distillation")
    return result


def evaluate(model: Model, ds: Dataset) -> EvalResult:
    """Top-1, Top-5 (when at least 5 classes) and per-class accuracy."""
    _check_classes(model, ds, "checkpoint")
    logits = model_logits(model, ds.images)
    pred = logits.argmax(axis=1)
    correct = pred == ds.labels
    top5 = None
    if logits.shape[1] >= 5:
        top = np.argsort(-logits, axis=1, kind="stable")[:, :5]
        top5 = float((top == ds.labels[:, None]).any(axis=1).mean())
    per_class = []
    for c in range(ds.num_classes):
        mask = ds.labels == c
        per_class.append(float(correct[mask].mean()) if mask.any() else math.nan)
    return EvalResult(top1=float(correct.mean()), top5=top5, per_class=per_class)


def logit_confusion_diff(teacher: Model, student: Model, ds: Dataset) -> np.ndarray:
    """``D[i, j]`` = mean |z_T[j] - z_S[j]| over samples of true class ``i``; NaN rows mark empty classes."""
    if teacher.spec.num_classes != student.spec.num_classes:
        raise ConfigError("teacher and student class counts differ")
    _check_classes(teacher, ds, "teacher")
    diff = np.abs(model_logits(teacher, ds.images) - model_logits(student, ds.images))
    C = ds.num_classes
    D = np.full((C, C), math.nan)
    for i in range(C):
        mask = ds.labels == i
        if mask.any():
            D[i] = diff[mask].mean(axis=0)
    return D


def robustness_eval(model: Model, ds: Dataset, kinds: Sequence[str] = CORRUPTIONS,
                    severities: Sequence[int] = (1, 2, 3, 4, 5), seed: int = 0) -> Dict[str, float]:
    """Clean accuracy plus, per corruption kind, the accuracy averaged over ``severities``."""
    table = {"clean": evaluate(model, ds).top1}
    for kind in kinds:
        accs = [evaluate(model, corrupt(ds, CorruptionSpec(kind, s, seed=seed + s))).top1 for s in severities]
        table[kind] = float(np.mean(accs))
    return table


def corruption_average(table: Dict[str, float]) -> float:
    return float(np.mean([v for k, v in table.items() if k != "clean"]))
