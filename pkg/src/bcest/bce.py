"""Batch covariance estimation.

Each outer iteration solves the graph under the current noise models, fits
a VB Gaussian mixture to the raw grouped residuals, and rewrites every
grouped factor's noise with the mean (relative to the dominant component)
and covariance of the component its residual is assigned to. The next
iteration re-solves under those models.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Hashable, Mapping

import numpy as np

from .factor_graph import FactorGraph, GaussianNoise, GraphError
from .mixture import (GMM, GaussianComponent, MixtureError, VBConfig, VBPosterior, extract_point_gmm,
                      hard_assign_all, vb_fit)
from .solver import SolverConfig, SolverError, lm_solve

log = logging.getLogger(__name__)


@dataclass
class BCEConfig:
    max_outer_iterations: int = 100
    outer_error_rel_tol: float = 1e-3
    vb: VBConfig = field(default_factory=VBConfig)
    keep_history: bool = True
    # express component means relative to the dominant component's mean
    center_on_dominant: bool = True

    def __post_init__(self):
        if self.max_outer_iterations < 1:
            raise ValueError("max_outer_iterations must be at least 1")
        if not self.outer_error_rel_tol > 0:
            raise ValueError("outer_error_rel_tol must be positive")
        if isinstance(self.vb, dict):
            self.vb = VBConfig(**self.vb)


@dataclass
class BCEIteration:
    total_error: float
    gmm: GMM
    counts: list[int]


@dataclass
class BCEReport:
    outer_iterations: int = 0
    converged: bool = False
    history: list[BCEIteration] = field(default_factory=list)
    # final per-group residuals and assignments (group order of group_members)
    group_ids: list[Hashable] = field(default_factory=list)
    residuals: np.ndarray | None = None
    assignments: np.ndarray | None = None
    message: str = ""


def group_residuals(graph: FactorGraph, groups: Mapping[Hashable, list[int]] | None = None,
                    x: np.ndarray | None = None):
    """Raw residuals stacked per group into one ``(n_groups, d)`` matrix."""
    groups = graph.group_members() if groups is None else groups
    rows = []
    for gid, members in groups.items():
        rows.append(np.concatenate([graph.raw_residual(i, x) for i in members]))
    dims = {r.shape[0] for r in rows}
    if len(dims) > 1:
        raise GraphError(f"grouped residuals have differing dimensions {sorted(dims)}")
    return list(groups.keys()), np.vstack(rows)


def update_noise_from_gmm(graph: FactorGraph, gmm: GMM, assignments: Mapping[Hashable, int],
                          groups: Mapping[Hashable, list[int]] | None = None) -> FactorGraph:
    """Give every grouped factor the statistics of its group's assigned component.

    The component's mean and covariance are split over the group's stacked
    residual coordinates; cross-factor covariance terms are dropped.
    Ungrouped factors are left untouched.
    """
    groups = graph.group_members() if groups is None else groups
    for gid, members in groups.items():
        if gid not in assignments:
            raise GraphError(f"no component assignment for group {gid!r}")
        comp = gmm.components[int(assignments[gid])]
        dims = [graph.factors[i].dim for i in members]
        if sum(dims) != gmm.dim:
            raise GraphError(f"group {gid!r} has dimension {sum(dims)}, GMM has {gmm.dim}")
        o = 0
        for i, d in zip(members, dims):
            sl = slice(o, o + d)
            graph.set_factor_noise(i, GaussianNoise(comp.mean[sl], comp.covariance[sl, sl]))
            o += d
    return graph


def centered_on_dominant(gmm: GMM) -> GMM:
    """Copy of ``gmm`` with every mean shifted so the dominant component is zero-mean.

    A shift shared by all residuals is indistinguishable from a shift of the
    states, so this fixes the split between the two without changing the fit.
    """
    ref = gmm.components[gmm.dominant()].mean
    return GMM([GaussianComponent(c.weight, c.mean - ref, c.covariance) for c in gmm.components])


def _grouped_indices(groups):
    return [i for members in groups.values() for i in members]


def bce_solve(graph: FactorGraph, bce_config: BCEConfig | None = None,
              solver_config: SolverConfig | None = None):
    """Run batch covariance estimation on ``graph`` (updated in place).

    Iteration 1 solves with the a-priori noise models; every later iteration
    first rewrites the grouped noise models from the previous mixture fit.
    Each iteration ends by fitting a mixture to the new residuals, so with
    ``max_outer_iterations=1`` the result is a plain solve plus one fit.
    Stops when the relative change of the grouped total error (under the
    noise models used by that iteration's solve) drops below the tolerance.

    Returns ``(values, final_gmm, report)``. If a fit or solve fails, the last
    good state is returned with ``converged=False``.
    """
    cfg = bce_config or BCEConfig()
    solver_config = solver_config or SolverConfig()
    groups = graph.group_members()
    if not groups:
        raise GraphError("bce_solve needs at least one grouped factor")
    grouped = _grouped_indices(groups)
    report = BCEReport(group_ids=list(groups.keys()))

    gmm: GMM | None = None
    labels: np.ndarray | None = None
    prev_err = None
    good_x = graph.state_vector
    good_noise = [f.noise for f in graph.factors]
    for it in range(1, cfg.max_outer_iterations + 1):
        try:
            if gmm is not None:
                model = centered_on_dominant(gmm) if cfg.center_on_dominant else gmm
                update_noise_from_gmm(graph, model, dict(zip(report.group_ids, labels)), groups)
            lm_solve(graph, solver_config)
        except (SolverError, GraphError, np.linalg.LinAlgError) as exc:
            report.message = f"solve failed at outer iteration {it}: {exc}"
            log.warning(report.message)
            graph.state_vector = good_x
            for i, n in enumerate(good_noise):
                graph.factors[i].noise = n
            break
        err = graph.total_weighted_error(indices=grouped)
        _, R = group_residuals(graph, groups)
        try:
            post, _ = vb_fit(R, cfg.vb)
            new_gmm = extract_point_gmm(post)
        except (MixtureError, np.linalg.LinAlgError) as exc:
            report.message = f"mixture fit failed at outer iteration {it}: {exc}"
            log.warning(report.message)
            break
        good_x = graph.state_vector
        good_noise = [f.noise for f in graph.factors]
        gmm, labels = new_gmm, hard_assign_all(post)
        report.outer_iterations = it
        report.residuals, report.assignments = R, labels
        if cfg.keep_history:
            counts = np.bincount(labels, minlength=len(gmm)).tolist()
            report.history.append(BCEIteration(err, gmm, counts))
        log.debug("bce iteration %d: error %.6g, %d components", it, err, len(gmm))
        if prev_err is not None and abs(err - prev_err) < cfg.outer_error_rel_tol * max(prev_err, 1e-300):
            report.converged = True
            break
        prev_err = err
    return graph.values(), gmm, report
