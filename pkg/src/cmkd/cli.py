"""``cmkd`` command line.

Exit codes: 0 success, 1 verification failure, 2 usage or config error,
3 IO error. Every subcommand writes ``manifest.json`` into its output
directory before doing any training or evaluation.
"""

from __future__ import annotations

import argparse
import logging
import sys
from importlib import resources
from pathlib import Path

from . import __version__
from .config import load_config
from .data import CORRUPTIONS, SEVERITY_TABLES
from .errors import CMKDError, FormatError
from .losses import METHODS
from .runs import set_invocation_argv

EXIT_OK, EXIT_VERIFY, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3
KL_ANALYTIC_TOL = 1e-10

logger = logging.getLogger("cmkd")


def default_config(name: str) -> Path:
    """Path of a config shipped with the package (``teacher_mlp``, ``student_mlp``, ...)."""
    return Path(str(resources.files("cmkd") / "configs" / f"{name}.json"))


def _config(path, fallback: str):
    return load_config(path if path else default_config(fallback))


def cmd_train_teacher(args) -> int:
    from .protocol import run_teacher
    man = run_teacher(_config(args.config, "teacher_mlp"), args.out)
    print(f"teacher checkpoint: {man.outputs['checkpoint']}")
    return EXIT_OK


def cmd_distill(args) -> int:
    from .protocol import run_distill
    man = run_distill(args.teacher, _config(args.config, "student_mlp"), args.out,
                      method=args.method, seed=args.seed, gate_log=args.gate_log,
                      diagnostics=not args.no_diagnostics)
    print(f"student checkpoint: {man.outputs['checkpoint']}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .protocol import run_eval
    _, res = run_eval(args.checkpoint, _config(args.config, "student_mlp"), args.out)
    top5 = "n/a" if res.top5 is None else f"{res.top5:.4f}"
    print(f"top1 {res.top1:.4f}  top5 {top5}")
    return EXIT_OK


def cmd_robustness(args) -> int:
    from .protocol import run_robustness
    _, path = run_robustness(args.checkpoint, _config(args.config, "student_mlp"), args.out,
                             args.kinds, args.severities, args.seed)
    print(Path(path).read_text(), end="")
    return EXIT_OK


def cmd_logit_diff(args) -> int:
    from .protocol import run_logit_diff
    man = run_logit_diff(args.teacher, args.student, _config(args.config, "student_mlp"), args.out)
    print(f"logit difference matrix: {man.outputs['logit_diff']}")
    return EXIT_OK


def cmd_export_metrics(args) -> int:
    from .protocol import export_metrics
    rows, figs = export_metrics(args.runs, args.out)
    print(f"{len(rows)} rows -> {args.out}")
    for f in figs:
        print(f"figure: {f}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import CHECKS, kd_analytic_error, run_suite
    unknown = [n for n in args.only or () if n not in CHECKS]
    if unknown:
        print(f"unknown check(s) {unknown}; valid: {', '.join(CHECKS)}", file=sys.stderr)
        return EXIT_USAGE
    failed = []
    for r in run_suite(args.tolerance, args.trials, args.seed, args.only):
        print(f"{r.name:18s} max_rel_error {r.max_rel_error:.3e}  {'ok' if r.passed else 'FAIL'}")
        if not r.passed:
            failed.append(f"{r.name} ({r.max_rel_error:.3e} > {args.tolerance:g})")
    if not args.only:
        err = kd_analytic_error(trials=args.trials, seed=args.seed)
        ok = err <= KL_ANALYTIC_TOL
        print(f"{'kd_kl_analytic':18s} max_abs_error {err:.3e}  {'ok' if ok else 'FAIL'}")
        if not ok:
            failed.append(f"kd_kl_analytic ({err:.3e} > {KL_ANALYTIC_TOL:g})")
    if failed:
        print("gradient check failed: " + ", ".join(failed), file=sys.stderr)
        return EXIT_VERIFY
    return EXIT_OK


def cmd_protocol(args) -> int:
    from .protocol import run_protocol
    summary = run_protocol(_config(args.teacher_config, "teacher_mlp"),
                           _config(args.student_config, "student_mlp"),
                           args.out, args.methods, args.seeds)
    for m, v in summary["methods"].items():
        print(f"{m:10s} acc {v['test_accuracy']:.4f}  spearman {v['mean_spearman_ts']:.4f}  "
              f"logit_diff {v['logit_diff_mean']:.3f}  corruption_avg {v['corruption_average']:.4f}")
    return EXIT_OK


def cmd_rerun(args) -> int:
    from .protocol import rerun
    rerun(args.manifest, args.out)
    print(f"replayed {args.manifest} into {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cmkd", description="Correlation-matching knowledge distillation.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("train-teacher", help="pretrain a teacher with cross-entropy")
    s.add_argument("--config", help="JSON run config (default: packaged teacher_mlp.json)")
    s.add_argument("--out", required=True, help="run directory")
    s.set_defaults(fn=cmd_train_teacher)

    s = sub.add_parser("distill", help="train a student against a teacher checkpoint")
    s.add_argument("--teacher", required=True, help="teacher checkpoint")
    s.add_argument("--method", choices=METHODS, help="overrides distill.method from the config")
    s.add_argument("--config", help="JSON run config (default: packaged student_mlp.json)")
    s.add_argument("--seed", type=int, help="overrides train.seed and model.init_seed")
    s.add_argument("--gate-log", action="store_true", help="write gate_log/epoch_XXX.json")
    s.add_argument("--no-diagnostics", action="store_true",
                   help="skip the eval, logit-diff and robustness outputs")
    s.add_argument("--out", required=True, help="run directory")
    s.set_defaults(fn=cmd_distill)

    s = sub.add_parser("eval", help="Top-1/Top-5 and per-class accuracy on the test split")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--config", help="JSON config whose data section selects the dataset")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("robustness", help="accuracy under seeded corruptions")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--config", help="JSON config whose data section selects the dataset")
    s.add_argument("--kinds", nargs="+", choices=CORRUPTIONS, default=list(CORRUPTIONS))
    n_levels = len(next(iter(SEVERITY_TABLES.values())))
    s.add_argument("--severities", nargs="+", type=int, choices=range(n_levels), default=[1, 2, 3, 4, 5],
                   metavar="S", help="severity levels, 0 is the identity (default: 1..5)")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_robustness)

    s = sub.add_parser("logit-diff", help="class x class mean |teacher - student| logit matrix")
    s.add_argument("--teacher", required=True)
    s.add_argument("--student", required=True)
    s.add_argument("--config", help="JSON config whose data section selects the dataset")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_logit_diff)

    s = sub.add_parser("export-metrics", help="merge run metrics into one long-format CSV")
    s.add_argument("--runs", nargs="+", required=True, help="run directories")
    s.add_argument("--out", required=True, help="output CSV; figures are written beside it")
    s.set_defaults(fn=cmd_export_metrics)

    s = sub.add_parser("gradcheck", help="finite-difference check of every backward rule and loss")
    s.add_argument("--tolerance", type=float, default=1e-4)
    s.add_argument("--trials", type=int, default=20)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--only", nargs="+", metavar="OP", help="restrict to these checks")
    s.set_defaults(fn=cmd_gradcheck)

    s = sub.add_parser("protocol", help="teacher, then every method over every seed, then summary")
    s.add_argument("--teacher-config")
    s.add_argument("--student-config")
    s.add_argument("--methods", nargs="+", choices=METHODS, default=["kd", "pearson", "pearson_z", "cmkd"])
    s.add_argument("--seeds", nargs="+", type=int, default=[0, 1, 2])
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_protocol)

    s = sub.add_parser("rerun", help="replay a run from its manifest.json")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_rerun)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    set_invocation_argv(sys.argv[1:] if argv is None else argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except FormatError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    except (CMKDError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO

if __name__ == "__main__":
    sys.exit(main())
