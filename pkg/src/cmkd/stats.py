"""Exact, non-differentiable statistics: correlations, ranks, entropy, Z-score.

These serve the training diagnostics, the entropy gate, and as oracles for
the differentiable losses. Row-wise variants (``*_rows``) operate on a
batch x classes matrix and return one value per row.
"""

from __future__ import annotations

import numpy as np
from scipy.stats import rankdata

from .errors import ContractError, DegenerateInputError, DomainError


def _pair(x, y, name):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 1 or x.shape != y.shape:
        raise ContractError(f"{name}: expected two vectors of equal length, got {x.shape} and {y.shape}")
    if x.size < 2:
        raise ContractError(f"{name}: need at least 2 observations")
    return x, y


def pearson(x, y) -> float:
    x, y = _pair(x, y, "pearson")
    xc = x - x.mean()
    yc = y - y.mean()
    sxx = np.dot(xc, xc)
    syy = np.dot(yc, yc)
    if sxx == 0 or syy == 0:
        raise DegenerateInputError("pearson: constant input has zero variance")
    r = np.dot(xc, yc) / (np.sqrt(sxx) * np.sqrt(syy))
    return float(np.clip(r, -1.0, 1.0))


def hard_ranks(x) -> np.ndarray:
    """Ascending ranks starting at 1; ties share the average of the ranks they span."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.size == 0:
        raise ContractError("hard_ranks needs a non-empty vector")
    return rankdata(x, method="average")


def spearman_closed_form(x, y) -> float:
    """``1 - 6 sum d^2 / (n (n^2 - 1))``; only meaningful without ties."""
    x, y = _pair(x, y, "spearman")
    n = x.size
    d = hard_ranks(x) - hard_ranks(y)
    return float(1.0 - 6.0 * np.dot(d, d) / (n * (n * n - 1)))


def spearman(x, y) -> float:
    """Spearman's rho: closed form when tie-free, else Pearson of average ranks."""
    x, y = _pair(x, y, "spearman")
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        raise DegenerateInputError("spearman: constant input has no rank variation")
    if np.unique(x).size == x.size and np.unique(y).size == y.size:
        return spearman_closed_form(x, y)
    return pearson(hard_ranks(x), hard_ranks(y))


def entropy(p) -> float:
    """Natural-log Shannon entropy with ``0 ln 0 = 0``."""
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1 or p.size == 0:
        raise ContractError("entropy needs a non-empty probability vector")
    if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-6:
        raise DomainError(f"entropy: not a probability distribution (min {p.min()}, sum {p.sum()})")
    nz = p[p > 0]
    return float(-np.sum(nz * np.log(nz)))


def entropy_rows(P) -> np.ndarray:
    P = np.asarray(P, dtype=np.float64)
    if P.ndim != 2:
        raise ContractError(f"entropy_rows needs a matrix, got shape {P.shape}")
    if np.any(P < 0) or np.any(np.abs(P.sum(axis=1) - 1.0) > 1e-6):
        bad = int(np.argmax((P < 0).any(axis=1) | (np.abs(P.sum(axis=1) - 1.0) > 1e-6)))
        raise DomainError(f"entropy: row {bad} is not a probability distribution")
    logs = np.log(np.where(P > 0, P, 1.0))
    return -(P * logs).sum(axis=1)


def batch_mean_entropy(P) -> float:
    return float(entropy_rows(P).mean())


def zscore(z) -> np.ndarray:
    """Standardize with the sample (n - 1) standard deviation."""
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 1 or z.size < 2:
        raise ContractError("zscore needs a vector of length >= 2")
    zc = z - z.mean()
    sd = np.sqrt(np.dot(zc, zc) / (z.size - 1))
    if sd == 0:
        raise DegenerateInputError("zscore: constant input has zero standard deviation")
    out = zc / sd
    return out - out.mean()


def pearson_rows(X, Y) -> np.ndarray:
    """Row-wise Pearson; zero-variance rows give NaN."""
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    xc = X - X.mean(axis=1, keepdims=True)
    yc = Y - Y.mean(axis=1, keepdims=True)
    den = np.sqrt((xc * xc).sum(axis=1)) * np.sqrt((yc * yc).sum(axis=1))
    with np.errstate(invalid="ignore", divide="ignore"):
        r = (xc * yc).sum(axis=1) / den
    return np.clip(r, -1.0, 1.0)


def spearman_rows(X, Y) -> np.ndarray:
    """Row-wise Spearman as Pearson of average ranks."""
    return pearson_rows(rankdata(X, method="average", axis=1), rankdata(Y, method="average", axis=1))
