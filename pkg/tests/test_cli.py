import csv
import json

import pytest

from cmkd import models
from cmkd import tensor as tn
from cmkd.cli import main
from cmkd.models import ModelSpec, build


def tiny_config(path, root, layer_dims, epochs=2, lr=0.05, **distill):
    doc = {
        "data": {"format": "idx", "name": "mnist", "root": str(root), "train_limit": 600, "test_limit": 200},
        "model": {"kind": "mlp", "layer_dims": layer_dims, "num_classes": 10, "init_seed": 0},
        "train": {"epochs": epochs, "batch_size": 64, "lr": lr, "lr_decay_epochs": [epochs - 1],
                  "seed": 0, "heldout_size": 100},
        "distill": distill,
    }
    path.write_text(json.dumps(doc))
    return str(path)


@pytest.fixture(scope="module")
def tiny(mnist_dir, tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    tcfg = tiny_config(d / "teacher.json", mnist_dir, [784, 32, 10], epochs=3)
    scfg = tiny_config(d / "student.json", mnist_dir, [784, 8, 10], lr=0.01)
    assert main(["train-teacher", "--config", tcfg, "--out", str(d / "teacher")]) == 0
    return d, str(d / "teacher" / "model.ckpt"), scfg


def read_csv(path):
    with open(path) as f:
        return list(csv.DictReader(f))


def test_gradcheck_single_op_passes(capsys):
    assert main(["gradcheck", "--only", "exp", "relu", "--trials", "5"]) == 0
    assert "exp" in capsys.readouterr().out


def test_gradcheck_reports_broken_backward(monkeypatch, capsys):
    monkeypatch.setattr(tn.Exp, "backward", lambda self, g: (2.0 * g * self.out,))
    assert main(["gradcheck", "--only", "exp", "--trials", "3"]) == 1
    assert "exp" in capsys.readouterr().err


def test_gradcheck_unknown_op():
    assert main(["gradcheck", "--only", "nope"]) == 2


def test_usage_errors(tmp_path, capsys):
    assert main(["distill", "--teacher", "x", "--method", "bogus", "--out", str(tmp_path)]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"train": {"epochz": 3}}))
    assert main(["eval", "--checkpoint", "x", "--config", str(bad), "--out", str(tmp_path)]) == 2
    assert "epochz" in capsys.readouterr().err


def test_missing_data_is_io_error(tmp_path, capsys):
    cfg = tiny_config(tmp_path / "c.json", tmp_path / "nowhere", [784, 8, 10])
    assert main(["train-teacher", "--config", cfg, "--out", str(tmp_path / "o")]) == 3
    assert "nowhere" in capsys.readouterr().err
    man = json.loads((tmp_path / "o" / "manifest.json").read_text())
    assert man["status"].startswith("error")


def test_truncated_checkpoint_is_io_error(tiny, tmp_path):
    d, teacher, scfg = tiny
    raw = open(teacher, "rb").read()
    (tmp_path / "t.ckpt").write_bytes(raw[:-16])
    assert main(["eval", "--checkpoint", str(tmp_path / "t.ckpt"), "--config", scfg,
                 "--out", str(tmp_path / "e")]) == 3


def test_eval_class_mismatch(tiny, tmp_path):
    d, _, scfg = tiny
    models.save(build(ModelSpec(layer_dims=[784, 8, 5], num_classes=5)), tmp_path / "five.ckpt")
    assert main(["eval", "--checkpoint", str(tmp_path / "five.ckpt"), "--config", scfg,
                 "--out", str(tmp_path / "e")]) == 2


def test_distill_outputs_and_manifest(tiny, tmp_path):
    d, teacher, scfg = tiny
    out = tmp_path / "s"
    assert main(["distill", "--teacher", teacher, "--config", scfg, "--method", "cmkd",
                 "--gate-log", "--out", str(out)]) == 0
    for name in ("model.ckpt", "metrics.csv", "eval.csv", "logit_diff.csv", "logit_diff.png",
                 "robustness.csv", "robustness.png", "correlation_curves.png"):
        assert (out / name).is_file(), name
    logs = sorted((out / "gate_log").glob("epoch_*.json"))
    assert len(logs) == 2
    doc = json.loads(logs[0].read_text())
    assert doc["epoch"] == 1 and sum(len(b["branches"]) for b in doc["batches"]) == 600
    man = json.loads((out / "manifest.json").read_text())
    assert man["status"] == "ok" and man["seed"] == 0 and man["extra"]["method"] == "cmkd"
    assert man["config"]["data"]["root"] and len(man["inputs"]) == 5


def test_rerun_reproduces(tiny, tmp_path):
    d, teacher, scfg = tiny
    assert main(["distill", "--teacher", teacher, "--config", scfg, "--method", "kd",
                 "--no-diagnostics", "--out", str(tmp_path / "a")]) == 0
    assert main(["rerun", "--manifest", str(tmp_path / "a" / "manifest.json"), "--out", str(tmp_path / "b")]) == 0
    for name in ("metrics.csv", "model.ckpt"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_robustness_severity_zero_equals_eval(tiny, tmp_path):
    d, teacher, scfg = tiny
    assert main(["eval", "--checkpoint", teacher, "--config", scfg, "--out", str(tmp_path / "e")]) == 0
    top1 = {r["metric"]: float(r["value"]) for r in read_csv(tmp_path / "e" / "eval.csv")}["top1"]
    assert main(["robustness", "--checkpoint", teacher, "--config", scfg, "--severities", "0",
                 "--out", str(tmp_path / "r")]) == 0
    rows = read_csv(tmp_path / "r" / "robustness.csv")
    vals = [float(v) for r in rows for k, v in r.items() if k not in ("severity", "kind")]
    assert vals and all(v == top1 for v in vals)


def test_logit_diff_command(tiny, tmp_path):
    d, teacher, scfg = tiny
    assert main(["logit-diff", "--teacher", teacher, "--student", teacher, "--config", scfg,
                 "--out", str(tmp_path)]) == 0
    rows = read_csv(tmp_path / "logit_diff.csv")
    assert len(rows) == 10
    assert all(float(r[f"c{j}"]) == 0.0 for r in rows for j in range(10))


def test_export_merges_seeds(tiny, tmp_path):
    d, teacher, scfg = tiny
    runs = []
    for seed in (0, 1, 2):
        out = tmp_path / f"pearson_seed{seed}"
        assert main(["distill", "--teacher", teacher, "--config", scfg, "--method", "pearson",
                     "--seed", str(seed), "--no-diagnostics", "--out", str(out)]) == 0
        runs.append(str(out))
    long_csv = tmp_path / "long.csv"
    assert main(["export-metrics", "--runs", *runs, "--out", str(long_csv)]) == 0
    rows = read_csv(long_csv)
    per_metric = {}
    for r in rows:
        per_metric.setdefault((r["method"], r["metric"]), []).append(r)
    assert per_metric and all(len(v) == 3 * 2 for v in per_metric.values())
    assert {r["seed"] for r in rows} == {"0", "1", "2"}
    assert (tmp_path / "long_accuracy.png").is_file()
