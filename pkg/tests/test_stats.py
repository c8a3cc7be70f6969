import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cmkd.errors import ContractError, DegenerateInputError, DomainError
from cmkd.stats import (batch_mean_entropy, entropy, hard_ranks, pearson, pearson_rows, spearman,
                        spearman_closed_form, spearman_rows, zscore)


def naive_pearson(x, y):
    n = len(x)
    mx, my = sum(x) / n, sum(y) / n
    cov = sum((a - mx) * (b - my) for a, b in zip(x, y))
    vx = sum((a - mx) ** 2 for a in x) ** 0.5
    vy = sum((b - my) ** 2 for b in y) ** 0.5
    return cov / (vx * vy)


@pytest.mark.parametrize("x, y, r", [
    ([1, 2, 3], [2, 4, 6], 1.0),
    ([1, 2, 3], [-1, -2, -3], -1.0),
    ([1, 2, 3, 4], [1, 3, 2, 4], 0.8),
])
def test_pearson_examples(x, y, r):
    assert pearson(x, y) == pytest.approx(r, abs=1e-12)


def test_pearson_matches_naive():
    rng = np.random.default_rng(0)
    for _ in range(100):
        x, y = rng.normal(size=7), rng.normal(size=7)
        assert pearson(x, y) == pytest.approx(naive_pearson(list(x), list(y)), abs=1e-12)


def test_pearson_errors():
    with pytest.raises(DegenerateInputError):
        pearson([1, 1, 1], [1, 2, 3])
    with pytest.raises(ContractError):
        pearson([1, 2], [1, 2, 3])


@pytest.mark.parametrize("x, expected", [
    ([10, 30, 20], [1, 3, 2]),
    ([5, 5, 1], [2.5, 2.5, 1]),
    (list(range(7)), list(range(1, 8))),
])
def test_hard_ranks_examples(x, expected):
    np.testing.assert_array_equal(hard_ranks(x), expected)


@pytest.mark.parametrize("x, y, rho", [
    ([1, 2, 3], [10, 100, 1000], 1.0),
    ([1, 2, 3], [3, 1, 2], -0.5),
    ([1, 2, 3, 4], [1, 3, 2, 4], 0.8),
])
def test_spearman_examples(x, y, rho):
    assert spearman(x, y) == pytest.approx(rho, abs=1e-12)


def test_spearman_with_ties_uses_rank_pearson():
    x, y = [1, 1, 2, 3], [4, 5, 5, 6]
    assert spearman(x, y) == pytest.approx(naive_pearson([1.5, 1.5, 3, 4], [1, 2.5, 2.5, 4]), abs=1e-12)


def test_spearman_degenerate():
    with pytest.raises(DegenerateInputError):
        spearman([2, 2, 2], [1, 2, 3])


@pytest.mark.parametrize("p, h", [
    (np.full(10, 0.1), np.log(10)),
    ([0, 1, 0, 0], 0.0),
    ([0.75, 0.25], 0.562335),
])
def test_entropy_examples(p, h):
    assert entropy(p) == pytest.approx(h, abs=1e-6)


def test_entropy_rejects_non_distribution():
    with pytest.raises(DomainError):
        entropy([0.5, 0.6])
    with pytest.raises(DomainError):
        entropy([1.5, -0.5])


def test_batch_mean_entropy_examples():
    row = np.array([0.2, 0.3, 0.5])
    assert batch_mean_entropy([row, row]) == pytest.approx(entropy(row), abs=1e-15)
    C = 6
    P = np.vstack([np.full(C, 1 / C), np.eye(C)[0]])
    assert batch_mean_entropy(P) == pytest.approx(np.log(C) / 2, abs=1e-12)
    for N in (1, 5, 40):
        assert batch_mean_entropy(np.full((N, C), 1 / C)) == pytest.approx(np.log(C), abs=1e-12)


@pytest.mark.parametrize("z, expected", [([2, 4, 6], [-1, 0, 1]), ([-1, 0, 1], [-1, 0, 1])])
def test_zscore_examples(z, expected):
    np.testing.assert_allclose(zscore(z), expected, atol=1e-12)


def test_zscore_affine_invariant_and_degenerate():
    rng = np.random.default_rng(1)
    z = rng.normal(size=9)
    np.testing.assert_allclose(zscore(3.5 * z - 2.0), zscore(z), atol=1e-9)
    with pytest.raises(DegenerateInputError):
        zscore([4.0, 4.0, 4.0])


def test_rows_variants_match_scalar():
    rng = np.random.default_rng(2)
    X, Y = rng.normal(size=(6, 10)), rng.normal(size=(6, 10))
    np.testing.assert_allclose(pearson_rows(X, Y), [pearson(x, y) for x, y in zip(X, Y)], atol=1e-12)
    np.testing.assert_allclose(spearman_rows(X, Y), [spearman(x, y) for x, y in zip(X, Y)], atol=1e-12)
    X[0] = 1.0
    assert np.isnan(pearson_rows(X, Y)[0])


vectors = arrays(np.float64, st.integers(2, 30), elements=st.floats(-1e6, 1e6, allow_nan=False))


@settings(max_examples=200, deadline=None)
@given(vectors)
def test_hard_rank_properties(x):
    r = hard_ranks(x)
    n = x.size
    assert abs(r.sum() - n * (n + 1) / 2) <= 1e-9
    if np.unique(x).size == n:
        assert sorted(r) == list(range(1, n + 1))


@settings(max_examples=200, deadline=None)
@given(vectors)
def test_zscore_properties(z):
    if np.ptp(z) < 1e-3 * max(1.0, np.abs(z).max()):
        return
    out = zscore(z)
    assert abs(out.mean()) <= 1e-12
    assert abs(out.std(ddof=1) - 1) <= 1e-9


def test_closed_form_agrees_without_ties():
    rng = np.random.default_rng(3)
    for _ in range(200):
        x, y = rng.normal(size=8), rng.normal(size=8)
        assert spearman_closed_form(x, y) == pytest.approx(pearson(hard_ranks(x), hard_ranks(y)), abs=1e-12)
