"""Training objectives: cross-entropy, temperature KL, correlation losses, CMKD.

Student logits are :class:`~cmkd.tensor.Tensor` objects on the active tape;
teacher logits are plain arrays (or detached tensors) and never receive
gradient.

Correlation pipeline (Pearson): Z-score both logit rows, soften both with
temperature ``T``, then ``1 - r`` on the probability rows. Spearman: Z-score
both rows, soft-rank the student row, hard-rank the teacher row, then
``1 - r`` between the two rank vectors.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Tuple

import numpy as np
from scipy.stats import rankdata

from .errors import DegenerateInputError, DimensionError, ParameterError
from .softrank import soft_rank_rows
from .stats import entropy_rows
from .tensor import Tensor, log_softmax_rows, softmax_rows

logger = logging.getLogger(__name__)

METHODS = ("ce_only", "kd", "pearson", "pearson_z", "cmkd")
SPEARMAN_INPUTS = ("zscored_logits", "softened_probs")


@dataclass
class DistillConfig:
    T: float = 4.0
    alpha: float = 1.0
    beta: float = 4.0
    gamma: float = 1.0
    epsilon: float = 1.0
    spearman_input: str = "zscored_logits"
    method: str = "cmkd"
    # gate on teacher entropy at temperature T (True) or at T = 1 (False)
    gate_at_temperature: bool = True

    def __post_init__(self):
        if not self.T > 0:
            raise ParameterError(f"T must be > 0, got {self.T}")
        if not self.epsilon > 0:
            raise ParameterError(f"epsilon must be > 0, got {self.epsilon}")
        for name in ("alpha", "beta", "gamma"):
            if getattr(self, name) < 0:
                raise ParameterError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.spearman_input not in SPEARMAN_INPUTS:
            raise ParameterError(f"spearman_input must be one of {SPEARMAN_INPUTS}, got {self.spearman_input!r}")
        if self.method not in METHODS:
            raise ParameterError(f"method must be one of {METHODS}, got {self.method!r}")


@dataclass
class GateReport:
    """Per-sample entropy gate decisions for one batch.

    ``branches[i]`` is ``"high"`` when the teacher entropy ``H_i >= mean``
    (weights beta on Pearson, gamma on Spearman) and ``"low"`` otherwise
    (gamma on Pearson, beta on Spearman).
    """

    entropies: List[float]
    mean_entropy: float
    branches: List[str]
    temperature: float
    counts: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.counts:
            self.counts = {"high": self.branches.count("high"), "low": self.branches.count("low")}

    @property
    def high_fraction(self) -> float:
        return self.counts["high"] / len(self.branches)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def _teacher_array(teacher) -> np.ndarray:
    return np.asarray(teacher.data if isinstance(teacher, Tensor) else teacher, dtype=np.float64)


def _check_pair(student: Tensor, teacher: np.ndarray, name: str):
    if student.ndim != 2 or student.shape != teacher.shape:
        raise DimensionError(f"{name}: student {student.shape} and teacher {teacher.shape} must be equal b x c")


def _reduce(rows: Tensor, reduction: str) -> Tensor:
    if reduction == "mean":
        return rows.mean()
    if reduction == "sum":
        return rows.sum()
    if reduction == "none":
        return rows
    raise ParameterError(f"unknown reduction {reduction!r}")


def _np_softmax(z: np.ndarray, T: float) -> np.ndarray:
    s = z / T
    s = s - s.max(axis=1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=1, keepdims=True)


def _np_log_softmax(z: np.ndarray, T: float) -> np.ndarray:
    s = z / T
    s = s - s.max(axis=1, keepdims=True)
    return s - np.log(np.exp(s).sum(axis=1, keepdims=True))


def cross_entropy(logits: Tensor, labels, reduction: str = "mean") -> Tensor:
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    c = logits.shape[1]
    if np.any(labels < 0) or np.any(labels >= c):
        bad = int(np.argmax((labels < 0) | (labels >= c)))
        raise IndexError(f"cross_entropy: label {labels[bad]} at sample {bad} outside [0, {c})")
    onehot = np.zeros(logits.shape)
    onehot[np.arange(labels.size), labels] = 1.0
    rows = -(log_softmax_rows(logits, 1.0) * onehot).sum(axis=1)
    return _reduce(rows, reduction)


def kd_kl(student: Tensor, teacher, T: float, reduction: str = "mean") -> Tensor:
    """KL(p_T || p_S) at temperature ``T``, without the T^2 factor."""
    if not T > 0:
        raise ParameterError(f"kd_kl: T must be > 0, got {T}")
    t = _teacher_array(teacher)
    _check_pair(student, t, "kd_kl")
    log_pt = _np_log_softmax(t, T)
    pt = np.exp(log_pt)
    rows = (pt * (log_pt - log_softmax_rows(student, T))).sum(axis=1)
    return _reduce(rows, reduction)


def kd_grad_analytic(student, teacher, T: float) -> np.ndarray:
    """Closed-form d KL / d z_S for each sample: ``(p_S - p_T) / T``. Test oracle only."""
    if not T > 0:
        raise ParameterError(f"kd_grad_analytic: T must be > 0, got {T}")
    s = _teacher_array(student)
    t = _teacher_array(teacher)
    return (_np_softmax(s, T) - _np_softmax(t, T)) / T


def _degenerate_mask(student: np.ndarray, teacher: np.ndarray, name: str, strict: bool) -> np.ndarray:
    bad = (np.ptp(student, axis=1) == 0) | (np.ptp(teacher, axis=1) == 0)
    if bad.any():
        idx = int(np.argmax(bad))
        if strict:
            raise DegenerateInputError(f"{name}: sample {idx} has a constant logit row", index=idx)
        logger.warning("%s: %d constant logit row(s) (first: sample %d) contribute zero loss",
                       name, int(bad.sum()), idx)
    return bad


def _zscore_rows(z: Tensor, bad: np.ndarray) -> Tensor:
    c = z.shape[1]
    zc = z - z.mean(axis=1, keepdims=True)
    var = (zc * zc).sum(axis=1, keepdims=True) / (c - 1)
    # degenerate rows get a unit variance so the graph stays finite; they are masked later
    return zc / (var + bad[:, None].astype(float)).sqrt()


def _np_zscore_rows(z: np.ndarray, bad: np.ndarray) -> np.ndarray:
    zc = z - z.mean(axis=1, keepdims=True)
    sd = np.sqrt((zc * zc).sum(axis=1, keepdims=True) / (z.shape[1] - 1))
    return zc / np.where(bad[:, None], 1.0, sd)


def _pearson_rows(x: Tensor, y: np.ndarray, bad: np.ndarray) -> Tensor:
    xc = x - x.mean(axis=1, keepdims=True)
    yc = y - y.mean(axis=1, keepdims=True)
    sxx = (xc * xc).sum(axis=1)
    syy = (yc * yc).sum(axis=1)
    den = (sxx * syy + bad.astype(float)).sqrt()
    return (xc * yc).sum(axis=1) / den


def pearson_loss(student: Tensor, teacher, T: float = 4.0, use_zscore: bool = True,
                 reduction: str = "mean", strict: bool = True) -> Tensor:
    """``1 - r(p_T, p_S)`` per sample, probabilities softened at ``T``.

    With ``strict=False`` constant rows contribute zero instead of raising.
    """
    if not T > 0:
        raise ParameterError(f"pearson_loss: T must be > 0, got {T}")
    t = _teacher_array(teacher)
    _check_pair(student, t, "pearson_loss")
    if t.shape[1] < 2:
        raise DimensionError("pearson_loss needs at least 2 classes")
    bad = _degenerate_mask(student.data, t, "pearson_loss", strict)
    s = student
    if use_zscore:
        s = _zscore_rows(student, bad)
        t = _np_zscore_rows(t, bad)
    ps = softmax_rows(s, T)
    pt = _np_softmax(t, T)
    flat = (np.ptp(pt, axis=1) == 0) | (np.ptp(ps.data, axis=1) == 0)
    if (flat & ~bad).any():
        idx = int(np.argmax(flat & ~bad))
        if strict:
            raise DegenerateInputError(f"pearson_loss: sample {idx} is constant after softening", index=idx)
        logger.warning("pearson_loss: sample %d constant after softening; contributes zero loss", idx)
    bad = bad | flat
    rows = (1.0 - _pearson_rows(ps, pt, bad)) * (~bad).astype(float)
    return _reduce(rows, reduction)


def spearman_loss(student: Tensor, teacher, epsilon: float = 1.0, T: float = 4.0,
                  spearman_input: str = "zscored_logits", reduction: str = "mean",
                  strict: bool = True) -> Tensor:
    """``1 - r(soft_rank(student), hard_rank(teacher))`` per sample.

    ``spearman_input="softened_probs"`` soft-ranks ``softmax(zscore(z) / T)``
    instead of the Z-scored logits; teacher ranks are the same either way.
    """
    if not epsilon > 0:
        raise ParameterError(f"spearman_loss: epsilon must be > 0, got {epsilon}")
    if spearman_input not in SPEARMAN_INPUTS:
        raise ParameterError(f"spearman_input must be one of {SPEARMAN_INPUTS}")
    t = _teacher_array(teacher)
    _check_pair(student, t, "spearman_loss")
    if t.shape[1] < 2:
        raise DimensionError("spearman_loss needs at least 2 classes")
    bad = _degenerate_mask(student.data, t, "spearman_loss", strict)
    s = _zscore_rows(student, bad)
    if spearman_input == "softened_probs":
        s = softmax_rows(s, T)
    soft = soft_rank_rows(s, epsilon)
    hard = rankdata(t, method="average", axis=1)
    rows = (1.0 - _pearson_rows(soft, hard, bad)) * (~bad).astype(float)
    return _reduce(rows, reduction)


def entropy_gate(teacher, T: float) -> GateReport:
    """Split a batch by teacher entropy against the batch-mean entropy."""
    t = _teacher_array(teacher)
    H = entropy_rows(_np_softmax(t, T))
    Hbar = float(H.mean())
    branches = ["high" if h >= Hbar else "low" for h in H]
    return GateReport(entropies=H.tolist(), mean_entropy=Hbar, branches=branches, temperature=float(T))


def cmkd_loss(student: Tensor, teacher, labels, cfg: DistillConfig,
              strict: bool = True) -> Tuple[Tensor, GateReport]:
    """``alpha * CE`` plus the batch mean of the entropy-gated correlation terms."""
    t = _teacher_array(teacher)
    report = entropy_gate(t, cfg.T if cfg.gate_at_temperature else 1.0)
    high = np.array([b == "high" for b in report.branches])
    w_pearson = np.where(high, cfg.beta, cfg.gamma)
    w_spearman = np.where(high, cfg.gamma, cfg.beta)
    lp = pearson_loss(student, t, cfg.T, use_zscore=True, reduction="none", strict=strict)
    ls = spearman_loss(student, t, cfg.epsilon, cfg.T, cfg.spearman_input, reduction="none", strict=strict)
    total = cfg.alpha * cross_entropy(student, labels) + (lp * w_pearson + ls * w_spearman).mean()
    return total, report


def distillation_loss(student: Tensor, teacher, labels, cfg: DistillConfig,
                      strict: bool = False) -> Tuple[Tensor, Optional[GateReport]]:
    """Per-batch objective selected by ``cfg.method``.

    ``kd`` scales the KL term by ``T**2``; the correlation methods are unscaled.
    """
    m = cfg.method
    if m == "cmkd":
        return cmkd_loss(student, teacher, labels, cfg, strict=strict)
    ce = cfg.alpha * cross_entropy(student, labels)
    if m == "ce_only":
        return ce, None
    if m == "kd":
        return ce + (cfg.T ** 2) * kd_kl(student, teacher, cfg.T), None
    if m == "pearson":
        return ce + cfg.beta * pearson_loss(student, teacher, cfg.T, use_zscore=False, strict=strict), None
    if m == "pearson_z":
        return ce + cfg.beta * pearson_loss(student, teacher, cfg.T, use_zscore=True, strict=strict), None
    raise ParameterError(f"unknown method {m!r}; expected one of {METHODS}")
