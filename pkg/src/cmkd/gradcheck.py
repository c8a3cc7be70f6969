"""Central finite-difference verification of every backward rule and loss.

The relative error of one trial is ``max|g_auto - g_fd| / max(max|g_fd|, 1e-8)``
over all entries of all differentiated inputs; each check reports the worst
trial. Non-scalar operations are reduced to a scalar by a fixed random
projection so that every output entry contributes.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as tn
from .losses import (DistillConfig, cmkd_loss, cross_entropy, kd_grad_analytic, kd_kl,
                     pearson_loss, spearman_loss)
from .softrank import soft_rank_rows
from .tensor import Tape, Tensor, backward

H = 1e-6


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    trials: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance


def autodiff_grads(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray]) -> List[np.ndarray]:
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    with Tape():
        out = fn(*leaves)
    backward(out)
    return [t.grad.copy() for t in leaves]


def numeric_grads(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray], h: float = H) -> List[np.ndarray]:
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    grads = []
    for k, a in enumerate(arrays):
        g = np.zeros_like(a)
        for idx in np.ndindex(a.shape):
            orig = a[idx]
            a[idx] = orig + h
            plus = fn(*[Tensor(x) for x in arrays]).item()
            a[idx] = orig - h
            minus = fn(*[Tensor(x) for x in arrays]).item()
            a[idx] = orig
            g[idx] = (plus - minus) / (2 * h)
        grads.append(g)
    return grads


def relative_error(auto: Sequence[np.ndarray], numeric: Sequence[np.ndarray]) -> float:
    num = max(float(np.max(np.abs(a - n))) for a, n in zip(auto, numeric))
    scale = max(max(float(np.max(np.abs(n))) for n in numeric), 1e-8)
    return num / scale


def _projected(op: Callable[..., Tensor], out_shape, rng) -> Callable[..., Tensor]:
    r = rng.normal(size=out_shape)
    return lambda *xs: (op(*xs) * r).sum()


# Each builder takes an rng and returns (scalar function, input arrays).
def _unary(op, gen):
    def build(rng):
        x = gen(rng, (3, 4))
        return _projected(op, x.shape, rng), [x]
    return build


def _binary(op, gen_b=None):
    def build(rng):
        a = rng.normal(size=(3, 4))
        b = gen_b(rng, (3, 4)) if gen_b else rng.normal(size=(3, 4))
        return _projected(op, a.shape, rng), [a, b]
    return build


def _normal(rng, shape):
    return rng.normal(size=shape)


def _positive(rng, shape):
    return rng.uniform(0.5, 2.0, size=shape)


def _away_from_zero(rng, shape):
    return rng.uniform(0.5, 2.0, size=shape) * rng.choice([-1.0, 1.0], size=shape)


def _b_matmul(rng):
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    return _projected(tn.matmul, (3, 2), rng), [a, b]


def _b_conv(stride, padding):
    def build(rng):
        x, k = rng.normal(size=(2, 2, 5, 5)), rng.normal(size=(3, 2, 3, 3))
        oh = (5 + 2 * padding - 3) // stride + 1
        op = lambda x, k: tn.conv2d(x, k, stride=stride, padding=padding)
        return _projected(op, (2, 3, oh, oh), rng), [x, k]
    return build


def _b_reduce(kind, axis, out_shape):
    def build(rng):
        x = rng.normal(size=(3, 4))
        return _projected(lambda t: tn.reductions(kind, t, axis=axis), out_shape, rng), [x]
    return build


def _b_maxpool(rng):
    x = rng.normal(size=(2, 2, 4, 5))
    return _projected(tn.maxpool2x2, (2, 2, 2, 2), rng), [x]


def _b_reshape(rng):
    x = rng.normal(size=(3, 4))
    return _projected(lambda t: t.reshape(2, 6), (2, 6), rng), [x]


def _b_rows(op, scale=1.0):
    def build(rng):
        x = rng.normal(size=(4, 10)) * scale
        return _projected(op, x.shape, rng), [x]
    return build


def _logits_pair(rng, batch=4, classes=10):
    return rng.normal(size=(batch, classes)) * 2.0, rng.normal(size=(batch, classes)) * 2.0


def _b_ce(rng):
    s, _ = _logits_pair(rng)
    y = rng.integers(0, 10, size=4)
    return (lambda t: cross_entropy(t, y)), [s]


def _b_kl(rng):
    s, t = _logits_pair(rng)
    return (lambda x: kd_kl(x, t, 4.0)), [s]


def _b_pearson(use_z):
    def build(rng):
        s, t = _logits_pair(rng)
        return (lambda x: pearson_loss(x, t, 4.0, use_zscore=use_z)), [s]
    return build


def _b_spearman(rng):
    s, t = _logits_pair(rng)
    return (lambda x: spearman_loss(x, t, epsilon=1.0)), [s]


def _b_cmkd(rng):
    s, t = _logits_pair(rng)
    y = rng.integers(0, 10, size=4)
    cfg = DistillConfig()
    return (lambda x: cmkd_loss(x, t, y, cfg)[0]), [s]


CHECKS: Dict[str, Callable] = {
    "add": _binary(lambda a, b: a + b),
    "sub": _binary(lambda a, b: a - b),
    "mul": _binary(lambda a, b: a * b),
    "div": _binary(lambda a, b: a / b, _away_from_zero),
    "exp": _unary(tn.Tensor.exp, _normal),
    "log": _unary(tn.Tensor.log, _positive),
    "relu": _unary(tn.Tensor.relu, _normal),
    "negate": _unary(lambda t: -t, _normal),
    "sqrt": _unary(tn.Tensor.sqrt, _positive),
    "matmul": _b_matmul,
    "conv2d": _b_conv(1, 1),
    "conv2d_stride2": _b_conv(2, 0),
    "sum": _b_reduce("sum", 1, (3,)),
    "mean": _b_reduce("mean", 0, (4,)),
    "max": _b_reduce("max", 1, (3,)),
    "maxpool2x2": _b_maxpool,
    "reshape": _b_reshape,
    "softmax_rows": _b_rows(lambda t: tn.softmax_rows(t, 2.0)),
    "log_softmax_rows": _b_rows(lambda t: tn.log_softmax_rows(t, 2.0)),
    "soft_rank": _b_rows(lambda t: soft_rank_rows(t, 0.5)),
    "cross_entropy": _b_ce,
    "kd_kl": _b_kl,
    "pearson_loss": _b_pearson(False),
    "pearson_loss_z": _b_pearson(True),
    "spearman_loss": _b_spearman,
    "cmkd_loss": _b_cmkd,
}


def check(name: str, trials: int = 20, seed: int = 0, tolerance: float = 1e-4) -> CheckResult:
    rng = np.random.default_rng([seed, sorted(CHECKS).index(name)])
    worst = 0.0
    for _ in range(trials):
        fn, arrays = CHECKS[name](rng)
        worst = max(worst, relative_error(autodiff_grads(fn, arrays), numeric_grads(fn, arrays)))
    return CheckResult(name, worst, trials, tolerance)


def kd_analytic_error(temperatures=(1.0, 2.0, 4.0), trials: int = 20, seed: int = 0,
                      shape=(8, 10)) -> float:
    """Max abs gap between autodiff of the summed KL and ``(p_S - p_T) / T``."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for T in temperatures:
        for _ in range(trials):
            s, t = rng.normal(size=shape) * 3.0, rng.normal(size=shape) * 3.0
            (g,) = autodiff_grads(lambda x: kd_kl(x, t, T, reduction="sum"), [s])
            worst = max(worst, float(np.max(np.abs(g - kd_grad_analytic(s, t, T)))))
    return worst


def run_suite(tolerance: float = 1e-4, trials: int = 20, seed: int = 0,
              names: Optional[Sequence[str]] = None) -> List[CheckResult]:
    return [check(n, trials, seed, tolerance) for n in (names or CHECKS)]
