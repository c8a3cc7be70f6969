import json
import os
from pathlib import Path

import pytest

REPO = Path(__file__).resolve().parents[1]
MNIST_FILES = ("train-images-idx3-ubyte", "train-labels-idx1-ubyte",
               "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")

# criterion number -> outcome, filled by test_acceptance.py
_criteria = {}


def data_dir() -> Path:
    return Path(os.environ.get("CMKD_DATA_DIR", REPO / "data"))


@pytest.fixture(scope="session")
def mnist_dir():
    root = data_dir()
    missing = [f for f in MNIST_FILES if not (root / f).is_file()]
    if missing:
        pytest.fail(f"MNIST IDX files {missing} not found under {root}. Set CMKD_DATA_DIR or see "
                    "README.md (Data) for how to fetch them.", pytrace=False)
    return root


@pytest.fixture(scope="session")
def protocol_run(mnist_dir, tmp_path_factory):
    """The desk-scale protocol (teacher + 4 methods x 3 seeds), run once per session via the CLI."""
    from cmkd.cli import main

    out = tmp_path_factory.mktemp("protocol")
    old = os.environ.get("CMKD_DATA_DIR")
    os.environ["CMKD_DATA_DIR"] = str(mnist_dir)
    try:
        code = main(["protocol", "--out", str(out)])
    finally:
        if old is None:
            os.environ.pop("CMKD_DATA_DIR")
        else:
            os.environ["CMKD_DATA_DIR"] = old
    assert code == 0
    return out, json.loads((out / "summary.json").read_text())


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number checked by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if report.when == "call" or report.outcome != "passed":
        prev = _criteria.get(marker.args[0])
        # keep a failure once seen (a criterion may span several tests)
        if prev is None or prev[0] == "passed":
            _criteria[marker.args[0]] = (report.outcome, item.name)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for crit in sorted(_criteria):
        outcome, name = _criteria[crit]
        status = "PASS" if outcome == "passed" else "FAIL"
        tr.write_line(f"criterion {crit:2d}: {status}  {name}")
