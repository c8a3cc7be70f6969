"""Differentiable ranks via Euclidean projection onto the permutahedron.

The projection of ``theta = z / eps`` onto the convex hull of all
permutations of ``(1, ..., n)`` reduces to one sort plus one isotonic
regression. Ranks are ascending: the largest score approaches rank ``n``
as ``eps -> 0`` and every rank approaches ``(n + 1) / 2`` as ``eps -> inf``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

from .errors import ContractError, DimensionError, ParameterError
from .tensor import Function, Tensor


def _pav(y) -> Tuple[List[float], List[Tuple[int, int]]]:
    """Pool-adjacent-violators for a non-increasing fit.

    Returns the fitted values and the pools as half-open ``(start, stop)``.
    """
    sums: List[float] = []
    counts: List[int] = []
    starts: List[int] = []
    for i, yi in enumerate(y):
        s, c, st = float(yi), 1, i
        # merge while the previous block's mean does not exceed the new one
        while sums and sums[-1] * c <= s * counts[-1]:
            s += sums.pop()
            c += counts.pop()
            st = starts.pop()
        sums.append(s)
        counts.append(c)
        starts.append(st)
    values: List[float] = []
    pools = []
    for s, c, st in zip(sums, counts, starts):
        values.extend([s / c] * c)
        pools.append((st, st + c))
    return values, pools


def isotonic_regression(s) -> np.ndarray:
    """``argmin ||v - s||^2`` subject to ``v_1 >= v_2 >= ... >= v_n``.

    >>> isotonic_regression([3.0, 1.0, 2.0])
    array([3. , 1.5, 1.5])
    """
    s = np.asarray(s, dtype=np.float64)
    if s.ndim != 1 or s.size == 0:
        raise ContractError("isotonic_regression needs a non-empty 1-D input")
    if not np.all(np.isfinite(s)):
        raise ContractError("isotonic_regression needs finite entries")
    values, _ = _pav(s.tolist())
    return np.array(values)


@dataclass
class SoftRankResult:
    ranks: np.ndarray
    pools: List[Tuple[int, int]]  # half-open blocks of positions in sorted order
    permutation: np.ndarray  # indices sorting the input by decreasing score
    epsilon: float

    def __len__(self):
        return self.ranks.size


def soft_rank(z, epsilon: float = 1.0) -> SoftRankResult:
    z = np.asarray(z, dtype=np.float64)
    if not epsilon > 0:
        raise ParameterError(f"soft_rank: epsilon must be > 0, got {epsilon}")
    if z.ndim != 1 or z.size < 2:
        raise ContractError(f"soft_rank needs a vector of length >= 2, got shape {z.shape}")
    n = z.size
    theta = z / epsilon
    perm = np.argsort(-theta, kind="stable")
    sorted_theta = theta[perm]
    target = np.arange(n, 0, -1, dtype=np.float64)
    v, pools = _pav((sorted_theta - target).tolist())
    ranks = np.empty(n)
    ranks[perm] = sorted_theta - np.asarray(v)
    return SoftRankResult(ranks=ranks, pools=pools, permutation=perm, epsilon=float(epsilon))


def soft_rank_backward(result: SoftRankResult, upstream) -> np.ndarray:
    """Vector-Jacobian product of :func:`soft_rank` with ``upstream``.

    Inside each pool the Jacobian is ``(I - 11^T / |pool|) / eps``; in
    particular singleton pools (well-separated scores) pass no gradient.
    """
    u = np.asarray(upstream, dtype=np.float64)
    if u.shape != result.ranks.shape:
        raise DimensionError(f"upstream shape {u.shape} != ranks shape {result.ranks.shape}")
    us = u[result.permutation]
    out_sorted = np.empty_like(us)
    for start, stop in result.pools:
        block = us[start:stop]
        out_sorted[start:stop] = block - block.mean()
    grad = np.empty_like(u)
    grad[result.permutation] = out_sorted / result.epsilon
    return grad


class SoftRankRows(Function):
    """Row-wise soft ranks of a batch x n matrix."""

    name = "soft_rank"

    def forward(self, z, epsilon=1.0):
        if z.ndim != 2:
            raise DimensionError(f"soft_rank_rows expects a matrix, got shape {z.shape}")
        self.results = [soft_rank(row, epsilon) for row in z]
        return np.stack([r.ranks for r in self.results])

    def backward(self, g):
        return (np.stack([soft_rank_backward(r, gi) for r, gi in zip(self.results, g)]),)


def soft_rank_rows(z, epsilon: float = 1.0) -> Tensor:
    return SoftRankRows.apply(z, epsilon=epsilon)
