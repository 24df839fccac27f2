"""Command line entry point: simulate, solve, compare, sweep, bench.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from ..factor_graph import GraphError
from ..gnss_sim import ScenarioError, generate_scenario
from ..mixture import MixtureError
from ..solver import SolverError
from .config import ConfigError, ExperimentConfig, load_config
from .estimators import ESTIMATOR_NAMES
from .experiments import (bench, emit_plot_data, make_specs, run_comparison, sensitivity_sweep,
                          sweep_spreads, write_bench_csv, write_comparison, write_positions_csv,
                          write_sweep_csv)
from .io import FormatError, load_scenario, write_observations, write_truth

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2

log = logging.getLogger("bcest")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _scales(text: str) -> list[float]:
    try:
        vals = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad scale list {text!r}") from None
    if not vals or any(not v > 0 for v in vals):
        raise argparse.ArgumentTypeError("scales must be positive numbers")
    return vals


def _estimator_list(text: str) -> list[str]:
    names = [v.strip().lower() for v in text.split(",") if v.strip()]
    bad = [n for n in names if n not in ESTIMATOR_NAMES]
    if bad or not names:
        raise argparse.ArgumentTypeError(f"unknown estimators {bad}")
    return names


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="bcest", description="Batch covariance estimation for GNSS factor graphs.")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("simulate", help="generate observation and truth CSVs")
    s.add_argument("--config", help="experiment config JSON (scenario section is used)")
    s.add_argument("--seed", type=int, help="override scenario.rng_seed")
    s.add_argument("--out", required=True, help="output directory")

    def data_args(q):
        q.add_argument("--obs", help="observation CSV")
        q.add_argument("--truth", help="truth CSV")
        q.add_argument("--config", help="experiment config JSON")
        q.add_argument("--simulate", action="store_true",
                       help="simulate the config's scenario instead of reading --obs/--truth")
        q.add_argument("--kernel-width", type=float, help="robust kernel width (whitened units)")
        q.add_argument("--out", required=True, help="output directory")

    s = sub.add_parser("solve", help="run one estimator")
    data_args(s)
    s.add_argument("--estimator", required=True, choices=ESTIMATOR_NAMES)

    s = sub.add_parser("compare", help="run several estimators on identical graphs")
    data_args(s)
    s.add_argument("--estimators", type=_estimator_list, help="comma list (default l2,dcs,maxmix,bce)")
    s.add_argument("--plot-data", action="store_true", help="also write plot-ready files")

    s = sub.add_parser("sweep", help="a-priori covariance sensitivity sweep")
    data_args(s)
    s.add_argument("--scales", type=_scales, help="comma list of scale factors")
    s.add_argument("--estimators", type=_estimator_list)

    s = sub.add_parser("bench", help="per-observation runtime")
    data_args(s)
    s.add_argument("--estimators", type=_estimator_list)
    s.add_argument("--repeats", type=int)
    return p


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if getattr(args, "kernel_width", None) is not None:
        if not args.kernel_width > 0:
            raise UsageError("--kernel-width must be positive")
        cfg.kernel_width = args.kernel_width
    return cfg


def _scenario(args, cfg: ExperimentConfig, need_truth: bool):
    if args.simulate:
        if args.obs or args.truth:
            raise UsageError("--simulate cannot be combined with --obs/--truth")
        return generate_scenario(cfg.scenario)
    if not args.obs:
        raise UsageError("--obs is required (or --simulate with --config)")
    if need_truth and not args.truth:
        raise UsageError("--truth is required")
    return load_scenario(args.obs, args.truth, cfg.scenario.zenith_dry)


def _out_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_simulate(args) -> int:
    cfg = _config(args)
    if args.seed is not None:
        cfg.scenario = dataclasses.replace(cfg.scenario, rng_seed=args.seed)
    sc = generate_scenario(cfg.scenario)
    out = _out_dir(args.out)
    write_observations(sc, out / "observations.csv")
    write_truth(sc.truth, out / "truth.csv")
    (out / "scenario.json").write_text(json.dumps(cfg.scenario.to_dict(), indent=2, sort_keys=True)
                                       + "\n", encoding="utf-8")
    print(f"{len(sc.observations)} observations over {len(sc.truth)} epochs -> {out}")
    return EXIT_OK


def cmd_solve(args) -> int:
    cfg = _config(args)
    sc = _scenario(args, cfg, need_truth=False)
    specs = make_specs([args.estimator], cfg.apriori_cov, cfg.kernel_width, cfg.bce)
    res = run_comparison(sc, specs, cfg.solver, cfg.graph)
    out = _out_dir(args.out)
    run = res.runs[0]
    write_comparison(res, out, "result")
    if run.positions is not None:
        write_positions_csv(res.epochs, run.positions, out / "positions.csv")
    emit_plot_data(res, out)
    print(res.to_text(), end="")
    return EXIT_OK if run.ok else EXIT_RUNTIME


def cmd_compare(args) -> int:
    cfg = _config(args)
    sc = _scenario(args, cfg, need_truth=True)
    names = args.estimators or cfg.estimators
    res = run_comparison(sc, make_specs(names, cfg.apriori_cov, cfg.kernel_width, cfg.bce),
                         cfg.solver, cfg.graph)
    out = _out_dir(args.out)
    write_comparison(res, out)
    if args.plot_data:
        emit_plot_data(res, out)
    print(res.to_text(), end="")
    return EXIT_OK if all(r.ok for r in res.runs) else EXIT_RUNTIME


def cmd_sweep(args) -> int:
    cfg = _config(args)
    sc = _scenario(args, cfg, need_truth=True)
    names = args.estimators or cfg.estimators
    scales = args.scales or cfg.scales
    rows = sensitivity_sweep(sc, names, scales, cfg.solver, cfg.graph, cfg.kernel_width, cfg.bce)
    out = _out_dir(args.out)
    write_sweep_csv(rows, out / "sweep.csv")
    for name, spread in sweep_spreads(rows).items():
        print(f"{name:8s} spread {spread:.4f} m")
    return EXIT_OK if all(m is not None for _, _, m in rows) else EXIT_RUNTIME


def cmd_bench(args) -> int:
    cfg = _config(args)
    sc = _scenario(args, cfg, need_truth=False)
    names = args.estimators or cfg.estimators
    repeats = args.repeats if args.repeats is not None else cfg.bench_repeats
    if repeats < 1:
        raise UsageError("--repeats must be at least 1")
    rows = bench(sc, make_specs(names, cfg.apriori_cov, cfg.kernel_width, cfg.bce), repeats,
                 cfg.solver, cfg.graph)
    out = _out_dir(args.out)
    write_bench_csv(rows, out / "bench.csv")
    for r in rows:
        print(f"{r['estimator']:8s} {1e6 * r['median_s_per_obs']:10.1f} us/obs")
    return EXIT_OK if all(r["error"] is None for r in rows) else EXIT_RUNTIME


COMMANDS = {"simulate": cmd_simulate, "solve": cmd_solve, "compare": cmd_compare,
            "sweep": cmd_sweep, "bench": cmd_bench}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a subcommand is required: " + ", ".join(COMMANDS))
    except UsageError as exc:
        print(exc, file=sys.stderr)
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        print(f"bcest {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, ScenarioError, GraphError, SolverError, MixtureError, ValueError,
            OSError) as exc:
        print(f"bcest {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
