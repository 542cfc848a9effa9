"""Command-line interface.

Subcommands: solve, ablate, replay, check-operators, report.  Flags can
also be supplied through MAXCTRL_* environment variables (a flag given on
the command line wins).  Exit codes: 0 success, 2 configuration error,
3 singular or infeasible control system, 4 I/O failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .errors import (
    CapExceeded,
    ConfigError,
    DimensionMismatch,
    IOErrorWithPath,
    SchurSingular,
    ShapeError,
)
from .grid import DimMode, GridSpec, build_layouts
from .harness import (
    CONFIG_SCHEMA,
    EvaluationReport,
    ExperimentConfig,
    replay_from_files,
    run_experiment,
)
from .operators3d import assemble_operator_set
from .tez2d import assemble_tez

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SINGULAR = 3
EXIT_IO = 4

ENV_PREFIX = "MAXCTRL_"


def _env(name: str):
    return os.environ.get(ENV_PREFIX + name)


def _bool_env(name: str) -> bool:
    v = _env(name)
    return v is not None and v.lower() not in ("", "0", "false", "no")


def _build_config(args) -> ExperimentConfig:
    cfg_path = args.config or _env("CONFIG")
    if cfg_path:
        config = ExperimentConfig.from_json_file(cfg_path)
    else:
        config = ExperimentConfig()
    seed = args.seed if args.seed is not None else _env("SEED")
    if seed is not None:
        config.seed = int(seed)
    out = args.out or _env("OUT")
    if out:
        config.output_dir = out
    if args.allow_singular or _bool_env("ALLOW_SINGULAR"):
        config.allow_singular = True
    if args.frozen_path or _bool_env("FROZEN_PATH"):
        config.frozen_path = True
    drops = getattr(args, "drop", None)
    if drops:
        families = []
        for d in drops:
            families += [x for x in d.split(",") if x]
        config.ablation = tuple(families)
    if getattr(args, "reoptimize", False):
        config.ablation_strategy = "reoptimize"
    config.validate()
    return config


def _print_report(report: EvaluationReport, as_json: bool) -> None:
    if as_json:
        print(report.to_json())
        return
    print(f"run label        : {report.label}")
    print(f"seed             : {report.seed}")
    for comp, v in sorted(report.mse.items()):
        print(f"MSE {comp:12s} : {v:.6e}")
    print(f"terminal defect  : {report.defect:.6e}")
    print(f"objective J      : {report.objective:.6e}")
    if report.residuals:
        print(f"residuals        : {report.residuals}")
    print(f"feasible         : {report.feasible}"
          + ("  (regularized)" if report.regularized else ""))
    print(f"max |div E|      : {report.divergence['max_div_e']:.3e}")
    ct = report.critical_time
    if ct["warned"]:
        print(f"advisory         : T={ct['t']:.6g} < T*={ct['t_star']:.6g}")


def _cmd_solve(args) -> int:
    config = _build_config(args)
    report = run_experiment(config)
    _print_report(report, args.json)
    return EXIT_OK


def _cmd_ablate(args) -> int:
    if not getattr(args, "drop", None):
        raise ConfigError("ablate needs at least one --drop family")
    config = _build_config(args)
    report = run_experiment(config)
    _print_report(report, args.json)
    return EXIT_OK


def _cmd_replay(args) -> int:
    config = _build_config(args)
    report = replay_from_files(config, args.controls)
    _print_report(report, args.json)
    return EXIT_OK


def _cmd_report(args) -> int:
    out = args.out or _env("OUT") or "maxctrl-run"
    path = Path(out) / "report.json"
    if not path.exists():
        raise IOErrorWithPath(f"no report found at {path}", path=str(path))
    report = EvaluationReport.from_json(path.read_text(encoding="utf-8"))
    _print_report(report, args.json)
    return EXIT_OK


def _cmd_schema(args) -> int:
    print(json.dumps(CONFIG_SCHEMA, indent=2, sort_keys=True))
    return EXIT_OK


def _cmd_check_operators(args) -> int:
    """Assembly identity suite: adjoint pairing, mimetic identity, sparsity."""
    config = _build_config(args)
    spec = config.spec()
    rng = np.random.default_rng(0)
    failures = 0

    def check(name: str, ok: bool, detail: str = ""):
        nonlocal failures
        print(f"{'PASS' if ok else 'FAIL'}  {name}" + (f"  ({detail})" if detail else ""))
        failures += 0 if ok else 1

    ops = (
        assemble_tez(spec)
        if spec.dim_mode is DimMode.TEZ2D
        else assemble_operator_set(spec)
    )
    adj = (ops.F + ops.A.T).count_nonzero()
    check("adjoint identity F = -A^T", adj == 0, f"nonzeros {adj}")
    prod = (ops.V0 @ ops.A).tocsr()
    prod.eliminate_zeros()
    check("divergence of curl vanishes exactly", prod.nnz == 0, f"nonzeros {prod.nnz}")
    worst = 0.0
    for _ in range(200):
        w = rng.standard_normal(ops.A.shape[1])
        err = np.abs(ops.V0 @ (ops.A @ w)).max()
        worst = max(worst, err / max(np.abs(w).max(), 1e-300))
    h_scale = max(1.0 / min(spec.h) ** 2, 1.0)
    check(
        "divergence of curl applied to vectors",
        worst <= 1e-13 * h_scale,
        f"max {worst:.2e}, grid scale {h_scale:.0f}",
    )
    row_nnz = np.diff(ops.A.indptr).max() if ops.A.nnz else 0
    check("A row sparsity <= 4", row_nnz <= 4, f"max row nnz {row_nnz}")
    row_nnz_v = np.diff(ops.V0.indptr).max() if ops.V0.nnz else 0
    check("V0 row sparsity <= 6", row_nnz_v <= 6, f"max row nnz {row_nnz_v}")
    layouts = build_layouts(spec)
    dim_ok = ops.A.shape == (layouts.n_e, layouts.n_h)
    check("operator shapes match count formulas", dim_ok)
    return EXIT_OK if failures == 0 else 1


def _add_common(p: argparse.ArgumentParser, with_drop: bool = False):
    p.add_argument("--config", help="path to a JSON experiment config")
    p.add_argument("--seed", type=int, default=None, help="noise path seed")
    p.add_argument("--out", help="run directory for artifacts")
    p.add_argument(
        "--allow-singular",
        action="store_true",
        help="report a rank-deficient system instead of failing",
    )
    p.add_argument(
        "--frozen-path",
        action="store_true",
        help="use a zero noise path (degenerate mode)",
    )
    p.add_argument("--json", action="store_true", help="print the report as JSON")
    if with_drop:
        p.add_argument(
            "--drop",
            action="append",
            default=None,
            metavar="FAMILIES",
            help="comma-separated control families to drop (repeatable); "
            "e.g. f1 or g3,u",
        )
        p.add_argument(
            "--reoptimize",
            action="store_true",
            help="re-optimize the remaining controls instead of withholding "
            "the dropped ones from the full solution",
        )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="maxctrl",
        description="Exact-controllability control synthesis for discrete "
        "stochastic Maxwell systems on the staggered grid.",
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("solve", help="full pipeline with every control active")
    _add_common(p, with_drop=True)
    p.set_defaults(func=_cmd_solve)

    p = sub.add_parser("ablate", help="solve with dropped control families")
    _add_common(p, with_drop=True)
    p.set_defaults(func=_cmd_ablate)

    p = sub.add_parser("replay", help="re-run the scheme from a controls.csv")
    _add_common(p)
    p.add_argument("--controls", required=True, help="controls.csv to replay")
    p.set_defaults(func=_cmd_replay)

    p = sub.add_parser("check-operators", help="assembly identity test suite")
    _add_common(p)
    p.set_defaults(func=_cmd_check_operators)

    p = sub.add_parser("report", help="print a previously computed report")
    p.add_argument("--out", help="run directory holding report.json")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=_cmd_report)

    p = sub.add_parser("schema", help="print the JSON config schema")
    p.set_defaults(func=_cmd_schema)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except (ConfigError, DimensionMismatch, ShapeError, CapExceeded) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except SchurSingular as e:
        print(f"singular control system: {e}", file=sys.stderr)
        return EXIT_SINGULAR
    except IOErrorWithPath as e:
        print(f"io error: {e}", file=sys.stderr)
        return EXIT_IO
    except OSError as e:
        print(f"io error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
