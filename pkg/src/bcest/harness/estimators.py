"""The compared estimators behind one interface."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from ..bce import BCEConfig, BCEReport, bce_solve, group_residuals, update_noise_from_gmm
from ..factor_graph import FactorGraph, GraphError
from ..mixture import GMM, VBConfig, gmm_from_components, max_mixture_select
from ..robust import KernelSpec, irls_solve
from ..solver import SolverConfig, SolverError, lm_solve

log = logging.getLogger(__name__)

ESTIMATOR_NAMES = ("l2", "huber", "cauchy", "dcs", "maxmix", "bce")


def static_maxmix_gmm(apriori_cov, outlier_weight: float = 0.1, inflation: float = 10.0) -> GMM:
    """Two zero-mean modes: the a-priori model and an inflated copy of it."""
    cov = np.atleast_2d(np.asarray(apriori_cov, dtype=float))
    d = cov.shape[0]
    return gmm_from_components([1.0 - outlier_weight, outlier_weight],
                               [np.zeros(d), np.zeros(d)], [cov, inflation * cov])


@dataclass
class EstimatorSpec:
    """Tagged choice: ``l2``, ``robust`` (with a kernel), ``maxmix`` (static GMM) or ``bce``."""

    kind: str
    kernel: KernelSpec | None = None
    gmm: GMM | None = None
    bce: BCEConfig | None = None
    max_outer: int = 25

    def __post_init__(self):
        if self.kind not in ("l2", "robust", "maxmix", "bce"):
            raise ValueError(f"unknown estimator kind {self.kind!r}")
        if self.kind == "robust" and self.kernel is None:
            raise ValueError("robust estimator needs a kernel")
        if self.kind == "maxmix" and self.gmm is None:
            raise ValueError("maxmix estimator needs a GMM")
        if self.kind == "bce" and self.bce is None:
            self.bce = BCEConfig()

    @property
    def name(self) -> str:
        return self.kernel.name if self.kind == "robust" else self.kind

    @classmethod
    def from_name(cls, name: str, apriori_cov, kernel_width: float | None = None,
                  bce_config: BCEConfig | None = None) -> "EstimatorSpec":
        """Estimator by CLI name; mixture-based ones derive their priors from ``apriori_cov``."""
        name = name.lower()
        if name == "l2":
            return cls("l2")
        if name in ("huber", "cauchy", "dcs"):
            k = KernelSpec.default(name) if kernel_width is None else KernelSpec(name, kernel_width)
            return cls("robust", kernel=k)
        if name == "maxmix":
            return cls("maxmix", gmm=static_maxmix_gmm(apriori_cov))
        if name == "bce":
            base = bce_config or BCEConfig()
            vb = base.vb
            if vb.S0 is None:
                vb = VBConfig.for_apriori(
                    apriori_cov, max_components=vb.max_components, alpha0=vb.alpha0,
                    kappa0=vb.kappa0, max_vb_iterations=vb.max_vb_iterations,
                    free_energy_rel_tol=vb.free_energy_rel_tol,
                    prune_min_count=vb.prune_min_count, rng_seed=vb.rng_seed,
                    **({} if vb.nu0 is None else {"nu0": vb.nu0}))
            return cls("bce", bce=BCEConfig(base.max_outer_iterations, base.outer_error_rel_tol, vb,
                                            base.keep_history, base.center_on_dominant))
        raise ValueError(f"unknown estimator {name!r}; choose from {', '.join(ESTIMATOR_NAMES)}")


@dataclass
class EstimatorResult:
    name: str
    values: Any
    outer_iterations: int = 0
    converged: bool = False
    final_gmm: GMM | None = None
    bce_report: BCEReport | None = None
    extra: dict = field(default_factory=dict)


def maxmix_solve(graph: FactorGraph, gmm: GMM, solver_config: SolverConfig | None = None,
                 max_outer: int = 25):
    """Max-mixtures with a static GMM.

    From an unweighted solve, alternates selecting each group's most likely
    component at the current residuals, rewriting the group's noise with
    it, and re-solving, until the selections stop changing.
    Returns ``(values, outer_iterations, converged, labels)``.
    """
    solver_config = solver_config or SolverConfig()
    groups = graph.group_members()
    if not groups:
        raise GraphError("maxmix_solve needs grouped factors")
    lm_solve(graph, solver_config)
    labels = None
    it = 0
    converged = False
    for it in range(1, max_outer + 1):
        ids, R = group_residuals(graph, groups)
        new = np.array([max_mixture_select(gmm, r)[0] for r in R])
        if labels is not None and np.array_equal(new, labels):
            converged = True
            break
        labels = new
        update_noise_from_gmm(graph, gmm, dict(zip(ids, labels)), groups)
        lm_solve(graph, solver_config)
    return graph.values(), it, converged, labels


def run_estimator(spec: EstimatorSpec, graph: FactorGraph,
                  solver_config: SolverConfig | None = None) -> EstimatorResult:
    """Run ``spec`` on ``graph`` in place."""
    solver_config = solver_config or SolverConfig()
    if spec.kind == "l2":
        values, rep = lm_solve(graph, solver_config)
        return EstimatorResult(spec.name, values, 1, rep.converged)
    if spec.kind == "robust":
        values, rep, _ = irls_solve(graph, spec.kernel, solver_config, max_outer=spec.max_outer)
        return EstimatorResult(spec.name, values, rep.iterations_used, rep.converged)
    if spec.kind == "maxmix":
        values, it, conv, labels = maxmix_solve(graph, spec.gmm, solver_config, spec.max_outer)
        counts = np.bincount(labels, minlength=len(spec.gmm)).tolist() if labels is not None else []
        return EstimatorResult(spec.name, values, it, conv, spec.gmm, extra={"counts": counts})
    values, gmm, rep = bce_solve(graph, spec.bce, solver_config)
    if gmm is None:
        raise SolverError(rep.message or "bce produced no mixture model")
    return EstimatorResult(spec.name, values, rep.outer_iterations, rep.converged, gmm, rep)
