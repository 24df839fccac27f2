"""Comparison tables, sensitivity sweeps, runtime benchmarks and plot data."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..bce import BCEConfig
from ..factor_graph import GraphError
from ..gnss_sim import Scenario
from ..mixture import MixtureError
from ..solver import SolverConfig, SolverError
from .estimators import EstimatorResult, EstimatorSpec, run_estimator
from .graph_build import GraphOptions, build_graph, estimated_positions
from .metrics import StatsSummary, rsos_horizontal_stats

log = logging.getLogger(__name__)

# failures recorded per estimator instead of aborting a table
RUN_ERRORS = (SolverError, GraphError, MixtureError, np.linalg.LinAlgError, ValueError)


@dataclass
class EstimatorRun:
    name: str
    stats: StatsSummary | None = None
    wall_time_s: float = 0.0
    time_per_observation_s: float = 0.0
    outer_iterations: int = 0
    converged: bool = False
    n_components: int | None = None
    error: str | None = None
    result: EstimatorResult | None = None
    positions: np.ndarray | None = None

    @property
    def ok(self) -> bool:
        return self.error is None

    def to_dict(self, with_timing: bool = True) -> dict:
        d = {"name": self.name, "status": "ok" if self.ok else "failed", "error": self.error,
             "outer_iterations": self.outer_iterations, "converged": self.converged,
             "n_components": self.n_components}
        d.update(self.stats.to_dict() if self.stats is not None
                 else {"median": None, "variance": None, "max": None})
        if with_timing:
            d["timing"] = {"wall_time_s": self.wall_time_s,
                           "time_per_observation_s": self.time_per_observation_s}
        return d


@dataclass
class ComparisonResult:
    runs: list[EstimatorRun]
    epochs: np.ndarray
    n_observations: int
    graph_digest: str
    covariance_scale: float = 1.0
    extra: dict = field(default_factory=dict)

    def run(self, name: str) -> EstimatorRun:
        for r in self.runs:
            if r.name == name:
                return r
        raise KeyError(name)

    def medians(self) -> dict[str, float | None]:
        return {r.name: (r.stats.median if r.stats else None) for r in self.runs}

    def to_dict(self, with_timing: bool = True) -> dict:
        return {"n_epochs": int(len(self.epochs)), "n_observations": self.n_observations,
                "graph_digest": self.graph_digest, "covariance_scale": self.covariance_scale,
                "estimators": [r.to_dict(with_timing) for r in self.runs]}

    def to_json(self, with_timing: bool = True) -> str:
        return json.dumps(self.to_dict(with_timing), indent=2, sort_keys=True) + "\n"

    def to_text(self) -> str:
        head = ("estimator", "median_m", "variance_m2", "max_m", "iters", "us_per_obs", "status")
        rows = [head]
        for r in self.runs:
            s = r.stats
            rows.append((r.name,
                         f"{s.median:.4f}" if s else "-", f"{s.variance:.4g}" if s else "-",
                         f"{s.max:.4f}" if s else "-", str(r.outer_iterations),
                         f"{1e6 * r.time_per_observation_s:.1f}",
                         "ok" if r.ok else f"failed: {r.error}"))
        widths = [max(len(row[i]) for row in rows) for i in range(len(head) - 1)]
        lines = ["  ".join(c.ljust(w) for c, w in zip(row[:-1], widths)) + "  " + row[-1]
                 for row in rows]
        return "\n".join(lines) + "\n"


def make_specs(names, apriori_cov, kernel_width: float | None = None,
               bce_config: BCEConfig | None = None) -> list[EstimatorSpec]:
    return [EstimatorSpec.from_name(n, apriori_cov, kernel_width, bce_config) for n in names]


def observation_count(graph) -> int:
    """Measurement factors in the graph (pseudoranges plus carrier phases)."""
    return sum(len(m) for m in graph.group_members().values())


def run_comparison(scenario: Scenario, specs: list[EstimatorSpec],
                   solver_config: SolverConfig | None = None,
                   graph_options: GraphOptions | None = None) -> ComparisonResult:
    """Run every estimator on its own copy of one freshly built graph.

    Each copy is checked against the digest of the original before its run.
    Wall time covers the estimator call only. A failing estimator is recorded
    with its error and the table continues.
    """
    solver_config = solver_config or SolverConfig()
    opts = graph_options or GraphOptions()
    graph = build_graph(scenario, opts)
    digest = graph.digest()
    n_obs = observation_count(graph)
    epochs = scenario.epochs
    runs = []
    for spec in specs:
        g = graph.copy()
        if g.digest() != digest:
            raise GraphError("graph copy differs from the original")
        run = EstimatorRun(spec.name)
        t0 = time.perf_counter()
        try:
            res = run_estimator(spec, g, solver_config)
        except RUN_ERRORS as exc:
            run.wall_time_s = time.perf_counter() - t0
            run.error = f"{type(exc).__name__}: {exc}"
            log.warning("estimator %s failed: %s", spec.name, run.error)
        else:
            run.wall_time_s = time.perf_counter() - t0
            run.result = res
            run.outer_iterations = res.outer_iterations
            run.converged = res.converged
            run.n_components = len(res.final_gmm) if res.final_gmm is not None else None
            run.positions = estimated_positions(g, len(epochs))
            if scenario.truth is not None:
                run.stats = rsos_horizontal_stats(run.positions, scenario.truth.positions)
        run.time_per_observation_s = run.wall_time_s / max(n_obs, 1)
        runs.append(run)
    return ComparisonResult(runs, epochs, n_obs, digest, opts.covariance_scale)


def sensitivity_sweep(scenario: Scenario, names, scales, solver_config: SolverConfig | None = None,
                      graph_options: GraphOptions | None = None, kernel_width: float | None = None,
                      bce_config: BCEConfig | None = None) -> list[tuple[float, str, float | None]]:
    """Median error per (scale, estimator) with every a-priori covariance scaled by ``s``.

    Graph measurement noise and the mixture-based priors are both built from
    ``s`` times the a-priori covariance. Each cell is a full comparison run,
    so the ``s = 1`` cells equal a plain comparison. Failed cells hold None.
    """
    base = graph_options or GraphOptions()
    if scenario.truth is None:
        raise ValueError("sensitivity sweep needs a truth trajectory")
    rows = []
    for s in scales:
        s = float(s)
        if not s > 0:
            raise ValueError(f"scale factors must be positive, got {s}")
        opts = dataclasses.replace(base, covariance_scale=s)
        cov = s * np.diag([base.sigma_range ** 2, base.sigma_phase ** 2])
        res = run_comparison(scenario, make_specs(names, cov, kernel_width, bce_config),
                             solver_config, opts)
        for r in res.runs:
            rows.append((s, r.name, r.stats.median if r.stats else None))
    return rows


def sweep_spreads(rows) -> dict[str, float]:
    """Max minus min median error per estimator over the sweep."""
    by: dict[str, list[float]] = {}
    for _, name, med in rows:
        if med is not None:
            by.setdefault(name, []).append(med)
    return {k: max(v) - min(v) for k, v in by.items()}


def write_sweep_csv(rows, path) -> Path:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["s", "estimator", "median_m"])
        for s, name, med in rows:
            w.writerow([repr(s), name, "" if med is None else repr(med)])
    return path


def bench(scenario: Scenario, specs: list[EstimatorSpec], repeats: int = 3,
          solver_config: SolverConfig | None = None,
          graph_options: GraphOptions | None = None) -> list[dict]:
    """Per-observation wall time of each estimator over ``repeats`` comparison runs."""
    times: dict[str, list[float]] = {s.name: [] for s in specs}
    failed: dict[str, str] = {}
    n_obs = 0
    for _ in range(repeats):
        res = run_comparison(scenario, specs, solver_config, graph_options)
        n_obs = res.n_observations
        for r in res.runs:
            times[r.name].append(r.time_per_observation_s)
            if r.error:
                failed[r.name] = r.error
    return [{"estimator": name, "repeats": repeats, "n_observations": n_obs,
             "median_s_per_obs": float(np.median(t)), "min_s_per_obs": float(np.min(t)),
             "error": failed.get(name)} for name, t in times.items()]


def write_bench_csv(rows, path) -> Path:
    path = Path(path)
    cols = ["estimator", "repeats", "n_observations", "median_s_per_obs", "min_s_per_obs"]
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for r in rows:
            w.writerow([r[c] if isinstance(r[c], (str, int)) else repr(r[c]) for c in cols])
    return path


def write_positions_csv(epochs, positions, path) -> Path:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch_s", "x_m", "y_m", "z_m"])
        for t, p in zip(epochs, positions):
            w.writerow([repr(float(t)), *(repr(float(v)) for v in p)])
    return path


def write_comparison(result: ComparisonResult, out_dir, stem: str = "comparison") -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    js = out / f"{stem}.json"
    txt = out / f"{stem}.txt"
    js.write_text(result.to_json(), encoding="utf-8")
    txt.write_text(result.to_text(), encoding="utf-8")
    return [js, txt]


def emit_plot_data(result: ComparisonResult, out_dir) -> list[Path]:
    """Plot-ready files from a comparison.

    Writes ``boxplot_errors.csv`` (one row per epoch and estimator with
    statistics), and for every BCE run ``<name>_gmm_history.jsonl`` (one GMM
    record per outer iteration) and ``<name>_residuals.csv`` (final grouped
    residuals with their component index).
    """
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc
    written = []
    box = out / "boxplot_errors.csv"
    with box.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch_s", "estimator", "error_m"])
        for r in result.runs:
            if r.stats is None:
                continue
            for t, e in zip(result.epochs, r.stats.per_epoch_errors):
                w.writerow([repr(float(t)), r.name, repr(float(e))])
    written.append(box)
    for r in result.runs:
        rep = r.result.bce_report if r.result is not None else None
        if rep is None:
            continue
        hist = out / f"{r.name}_gmm_history.jsonl"
        with hist.open("w", encoding="utf-8") as fh:
            for i, h in enumerate(rep.history, start=1):
                rec = {"iteration": i, "total_error": h.total_error, "counts": h.counts}
                rec.update(h.gmm.to_dict())
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
        written.append(hist)
        if rep.residuals is not None:
            scat = out / f"{r.name}_residuals.csv"
            with scat.open("w", newline="", encoding="utf-8") as fh:
                w = csv.writer(fh)
                w.writerow(["epoch_index", "sat_id", "range_res_m", "phase_res_m", "component_index"])
                for gid, res, lab in zip(rep.group_ids, rep.residuals, rep.assignments):
                    k, sat = gid if isinstance(gid, tuple) else ("", gid)
                    w.writerow([k, sat, repr(float(res[0])), repr(float(res[1])), int(lab)])
            written.append(scat)
    return written
