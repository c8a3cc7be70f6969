"""Acceptance suite: one test per numbered criterion.

The pass/fail line for each criterion is printed in the "acceptance criteria"
section of the pytest summary. Criteria 7 to 10 and 12 share one desk-scale
protocol run (teacher plus four methods over seeds 0, 1, 2).
"""

import csv
import json
import time

import numpy as np
import pytest

from cmkd.cli import main
from cmkd.errors import DegenerateInputError
from cmkd.gradcheck import CHECKS, kd_analytic_error, run_suite
from cmkd.losses import DistillConfig, cmkd_loss, cross_entropy, pearson_loss, spearman_loss
from cmkd.softrank import soft_rank, soft_rank_backward
from cmkd.stats import hard_ranks, pearson, spearman, spearman_closed_form, zscore
from cmkd.tensor import Tensor

LOSSES = ("cross_entropy", "kd_kl", "pearson_loss", "pearson_loss_z", "spearman_loss", "cmkd_loss")


def _mean(summary, method, key):
    return summary["methods"][method][key]


@pytest.mark.criterion(1)
def test_criterion_01_gradient_suite():
    assert set(LOSSES) <= set(CHECKS)
    start = time.perf_counter()
    results = run_suite(tolerance=1e-4, trials=20)
    elapsed = time.perf_counter() - start
    bad = [(r.name, r.max_rel_error) for r in results if not r.passed]
    print(f"criterion 1: {len(results)} checks, worst {max(r.max_rel_error for r in results):.2e}, {elapsed:.1f}s")
    assert not bad
    assert elapsed < 60


@pytest.mark.criterion(2)
def test_criterion_02_kl_analytic_gradient():
    err = kd_analytic_error(temperatures=(1.0, 2.0, 4.0), trials=20, shape=(8, 10))
    print(f"criterion 2: max abs error {err:.2e}")
    assert err <= 1e-10


@pytest.mark.criterion(3)
def test_criterion_03_correlation_invariants():
    rng = np.random.default_rng(30)
    worst_affine = worst_closed = 0.0
    for _ in range(1000):
        n = int(rng.integers(3, 50))
        x = rng.normal(size=n) * rng.choice([0.1, 1.0, 10.0])
        a = rng.uniform(0.1, 10.0) * rng.choice([-1.0, 1.0])
        b = rng.normal() * 5
        worst_affine = max(worst_affine, abs(pearson(x, a * x + b) - np.sign(a)))
        y = rng.normal(size=n)
        for f in (np.exp, lambda v: v ** 3 + 2 * v, lambda v: np.arctan(v) - 7.0):
            assert spearman(f(x), y) == spearman(x, y)
        assert spearman(x, np.exp(x)) == 1.0
        closed = spearman_closed_form(x, y)
        worst_closed = max(worst_closed, abs(closed - pearson(hard_ranks(x), hard_ranks(y))))
    print(f"criterion 3: affine {worst_affine:.2e}, closed form {worst_closed:.2e}")
    assert worst_affine <= 1e-12 and worst_closed <= 1e-12


def _brute_soft_rank(z, eps):
    """Projection by enumerating every contiguous pool structure of the sorted vector."""
    import itertools

    theta = np.asarray(z, dtype=float) / eps
    n = theta.size
    perm = np.argsort(-theta, kind="stable")
    s = theta[perm] - np.arange(n, 0, -1)
    best, best_err = None, np.inf
    for cuts in itertools.product([0, 1], repeat=n - 1):
        bounds = [0] + [i + 1 for i, c in enumerate(cuts) if c] + [n]
        v = np.concatenate([np.full(b - a, s[a:b].mean()) for a, b in zip(bounds, bounds[1:])])
        if np.all(np.diff(v) <= 1e-12) and np.sum((v - s) ** 2) < best_err:
            best, best_err = v, np.sum((v - s) ** 2)
    out = np.empty(n)
    out[perm] = theta[perm] - best
    return out


@pytest.mark.criterion(4)
def test_criterion_04_soft_rank():
    rng = np.random.default_rng(40)
    # (a) rank sum
    for _ in range(1000):
        n = int(rng.integers(2, 65))
        r = soft_rank(rng.normal(size=n) * 3, float(rng.choice([1e-3, 0.1, 1.0, 10.0]))).ranks
        assert abs(r.sum() - n * (n + 1) / 2) <= 1e-9
    # (b) small epsilon recovers hard ranks when scores are separated by >= 0.1
    for _ in range(200):
        n = int(rng.integers(2, 40))
        z = rng.permutation(np.cumsum(0.1 + rng.exponential(0.5, size=n)))
        np.testing.assert_allclose(soft_rank(z, 1e-3).ranks, hard_ranks(z), atol=1e-2)
    # (c) brute force for n <= 6
    for _ in range(300):
        n = int(rng.integers(2, 7))
        z, eps = rng.normal(size=n) * 2, float(rng.choice([0.3, 1.0, 3.0]))
        np.testing.assert_allclose(soft_rank(z, eps).ranks, _brute_soft_rank(z, eps), atol=1e-8)
    # (d) backward against central differences
    h = 1e-6
    for _ in range(100):
        n = int(rng.integers(2, 16))
        z, u, eps = rng.normal(size=n) * 0.5, rng.normal(size=n), float(rng.choice([0.3, 1.0]))
        g = soft_rank_backward(soft_rank(z, eps), u)
        fd = np.array([(soft_rank(z + h * e, eps).ranks - soft_rank(z - h * e, eps).ranks) @ u / (2 * h)
                       for e in np.eye(n)])
        assert np.max(np.abs(g - fd)) <= 1e-5


@pytest.mark.criterion(5)
def test_criterion_05_zscore():
    rng = np.random.default_rng(50)
    for _ in range(1000):
        z = rng.normal(size=int(rng.integers(2, 100))) * rng.choice([1e-3, 1.0, 1e3]) + rng.normal() * 100
        out = zscore(z)
        assert abs(out.mean()) <= 1e-12
        assert abs(out.std(ddof=1) - 1.0) <= 1e-9
    with pytest.raises(DegenerateInputError):
        zscore(np.full(10, 3.25))


@pytest.mark.criterion(6)
def test_criterion_06_gate():
    C = 10
    t = np.zeros((2, C))
    t[0, 3] = 60.0
    t[1] = np.linspace(0, 1e-3, C)
    s = np.random.default_rng(60).normal(size=(2, C))
    y = [3, 0]
    cfg = DistillConfig()
    total, rep = cmkd_loss(Tensor(s), t, y, cfg)
    assert rep.branches == ["low", "high"]
    lp = pearson_loss(Tensor(s), t, cfg.T, reduction="none").data
    ls = spearman_loss(Tensor(s), t, cfg.epsilon, cfg.T, reduction="none").data
    ce = cross_entropy(Tensor(s), y).item()
    want = ce + ((cfg.gamma * lp[0] + cfg.beta * ls[0]) + (cfg.beta * lp[1] + cfg.gamma * ls[1])) / 2
    assert total.item() == pytest.approx(want, abs=1e-12)

    sym = DistillConfig(beta=3.0, gamma=3.0)
    got = cmkd_loss(Tensor(s), t, y, sym)[0].item()
    ungated = ce + 3.0 * (lp.mean() + ls.mean())
    assert abs(got - ungated) <= 1e-12


@pytest.mark.slow
@pytest.mark.criterion(7)
def test_criterion_07_spearman_gain(protocol_run):
    _, summary = protocol_run
    cm, kd = _mean(summary, "cmkd", "mean_spearman_ts"), _mean(summary, "kd", "mean_spearman_ts")
    print(f"criterion 7: spearman cmkd {cm:.4f} kd {kd:.4f} gain {cm - kd:+.4f}")
    assert cm - kd >= 0.02


@pytest.mark.slow
@pytest.mark.criterion(8)
def test_criterion_08_accuracy_non_inferior(protocol_run):
    _, summary = protocol_run
    cm, kd = _mean(summary, "cmkd", "test_accuracy"), _mean(summary, "kd", "test_accuracy")
    print(f"criterion 8: accuracy cmkd {cm:.4f} kd {kd:.4f} diff {cm - kd:+.4f}")
    assert cm >= kd - 0.003


@pytest.mark.slow
@pytest.mark.criterion(9)
def test_criterion_09_logit_gap(protocol_run):
    _, summary = protocol_run
    cm, kd = _mean(summary, "cmkd", "logit_diff_mean"), _mean(summary, "kd", "logit_diff_mean")
    print(f"criterion 9: logit diff cmkd {cm:.4f} kd {kd:.4f}")
    assert cm < kd


@pytest.mark.slow
@pytest.mark.criterion(10)
def test_criterion_10_robustness(protocol_run):
    _, summary = protocol_run
    for m in ("cmkd", "kd"):
        rob = summary["methods"][m]["runs"][0]["robustness"]
        assert set(rob) == {"clean", "gaussian_noise", "brightness", "contrast", "pixelate"}
    cm, kd = _mean(summary, "cmkd", "corruption_average"), _mean(summary, "kd", "corruption_average")
    print(f"criterion 10: corruption average cmkd {cm:.4f} kd {kd:.4f}")
    assert cm >= kd - 0.003


def _tiny_config(path, root, layer_dims, epochs):
    path.write_text(json.dumps({
        "data": {"root": str(root), "train_limit": 500, "test_limit": 200},
        "model": {"layer_dims": layer_dims, "init_seed": 0},
        "train": {"epochs": epochs, "lr": 0.02, "lr_decay_epochs": [epochs - 1], "heldout_size": 100},
    }))
    return str(path)


@pytest.mark.criterion(11)
def test_criterion_11_determinism(mnist_dir, tmp_path):
    tcfg = _tiny_config(tmp_path / "t.json", mnist_dir, [784, 24, 10], 2)
    scfg = _tiny_config(tmp_path / "s.json", mnist_dir, [784, 8, 10], 2)
    for rep in ("a", "b"):
        assert main(["train-teacher", "--config", tcfg, "--out", str(tmp_path / rep / "teacher")]) == 0
    ta, tb = (tmp_path / r / "teacher" for r in "ab")
    for name in ("metrics.csv", "model.ckpt"):
        assert (ta / name).read_bytes() == (tb / name).read_bytes()
    for method in ("kd", "cmkd"):
        for rep in ("a", "b"):
            assert main(["distill", "--teacher", str(ta / "model.ckpt"), "--config", scfg, "--method", method,
                         "--seed", "1", "--out", str(tmp_path / rep / method)]) == 0
        for name in ("metrics.csv", "model.ckpt", "eval.csv", "logit_diff.csv", "robustness.csv"):
            a, b = (tmp_path / r / method / name for r in "ab")
            assert a.read_bytes() == b.read_bytes(), f"{method}/{name}"


@pytest.mark.slow
@pytest.mark.criterion(12)
def test_criterion_12_ablation_plumbing(protocol_run, tmp_path):
    out, _ = protocol_run
    methods = ("kd", "pearson", "pearson_z", "cmkd")
    teacher = out / "teacher" / "model.ckpt"
    runs, digests = [], set()
    for m in methods:
        for seed in (0, 1, 2):
            d = out / "runs" / f"{m}_seed{seed}"
            man = json.loads((d / "manifest.json").read_text())
            assert man["status"] == "ok" and man["extra"]["method"] == m
            assert man["extra"]["teacher"] == str(teacher)
            digests.add(man["inputs"][str(teacher)])
            with open(d / "metrics.csv") as f:
                header = next(csv.reader(f))
            runs.append((d, header))
    assert len(digests) == 1
    assert len({tuple(h) for _, h in runs}) == 1
    long_csv = tmp_path / "ablation.csv"
    assert main(["export-metrics", "--runs", *(str(d) for d, _ in runs), "--out", str(long_csv)]) == 0
    with open(long_csv) as f:
        rows = list(csv.DictReader(f))
    assert {r["method"] for r in rows} == set(methods)
    counts = {}
    for r in rows:
        counts[(r["method"], r["metric"])] = counts.get((r["method"], r["metric"]), 0) + 1
    assert len(set(counts.values())) == 1
    print(f"criterion 12: {len(rows)} long-format rows from {len(runs)} runs")
