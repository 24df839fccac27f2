"""M-estimator kernels, DCS, covariance scaling and the IRLS loop.

Kernel arguments are whitened residual norms, so widths are unit-free.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .factor_graph import FactorGraph, GaussianNoise
from .solver import SolveReport, SolverConfig, lm_solve

log = logging.getLogger(__name__)

DEFAULT_WIDTHS = {"huber": 1.345, "cauchy": 2.3849, "dcs": 1.0}


@dataclass(frozen=True)
class KernelSpec:
    """Robust cost choice: ``l2``, ``huber``, ``cauchy`` or ``dcs`` with width ``k``."""

    name: str = "l2"
    k: float = 1.0

    def __post_init__(self):
        name = self.name.lower()
        object.__setattr__(self, "name", name)
        if name not in ("l2", "huber", "cauchy", "dcs"):
            raise ValueError(f"unknown kernel {self.name!r}")
        if not self.k > 0:
            raise ValueError("kernel width must be positive")

    @classmethod
    def default(cls, name: str) -> "KernelSpec":
        return cls(name, DEFAULT_WIDTHS.get(name.lower(), 1.0))

    def __call__(self, x):
        return kernel_eval(self, x)


def kernel_eval(kernel: KernelSpec, x):
    """Return ``(rho, psi, w)`` at ``x`` (scalar or array).

    ``psi`` is always computed as ``x * w`` so the identity holds exactly.
    """
    x = np.asarray(x, dtype=float)
    k = kernel.k
    ax = np.abs(x)
    x2 = x * x
    if kernel.name == "l2":
        rho = 0.5 * x2
        w = np.ones_like(x)
    elif kernel.name == "huber":
        inside = ax <= k
        rho = np.where(inside, 0.5 * x2, k * (ax - 0.5 * k))
        with np.errstate(divide="ignore"):
            w = np.where(inside, 1.0, k / np.where(inside, 1.0, ax))
    elif kernel.name == "cauchy":
        u = x2 / (k * k)
        rho = 0.5 * k * k * np.log1p(u)
        w = 1.0 / (1.0 + u)
    else:  # dcs
        inside = x2 <= k
        rho = np.where(inside, 0.5 * x2, k * (3.0 * x2 - k) / (2.0 * (x2 + k)))
        w = np.where(inside, 1.0, 4.0 * k * k / (x2 + k) ** 2)
    psi = x * w
    if x.ndim == 0:
        return float(rho), float(psi), float(w)
    return rho, psi, w


def kernel_weight(kernel: KernelSpec, x):
    return kernel_eval(kernel, x)[2]


def scaled_covariance(noise: GaussianNoise, w: float) -> GaussianNoise:
    """Noise with covariance ``cov / w``; the mean is unchanged."""
    if not w > 0:
        raise ValueError("weight must be positive")
    return GaussianNoise(noise.mean, noise.covariance / w)


def robust_weights(graph: FactorGraph, kernel: KernelSpec, x=None) -> np.ndarray:
    """Kernel weight per factor at the whitened residual norm; ungrouped factors get 1."""
    norms = graph.whitened_norms(x)
    w = np.asarray(kernel_weight(kernel, norms), dtype=float)
    grouped = np.array([f.group_id is not None for f in graph.factors])
    return np.where(grouped, w, 1.0)


def irls_solve(graph: FactorGraph, kernel: KernelSpec, solver_config: SolverConfig | None = None,
               max_outer: int = 25, rel_tol: float = 1e-6):
    """Iteratively reweighted least squares on ``graph`` (updated in place).

    Starts from an unweighted solve, then alternates kernel weights from the
    current whitened residual norms with a weighted LM solve until the
    relative change of the weighted total error drops below ``rel_tol``.
    Returns ``(values, report, weights)``; the report's ``iterations_used``
    counts outer iterations.
    """
    solver_config = solver_config or SolverConfig()
    _, first = lm_solve(graph, solver_config)
    report = SolveReport(initial_error=first.initial_error, error_history=[])
    weights = np.ones(len(graph.factors))
    prev = None
    for outer in range(max_outer):
        weights = robust_weights(graph, kernel)
        _, rep = lm_solve(graph, solver_config, weights)
        err = rep.final_error
        report.error_history.append(err)
        report.iterations_used = outer + 1
        if prev is not None and abs(prev - err) <= rel_tol * max(abs(prev), 1e-300):
            report.converged = True
            break
        prev = err
    report.final_error = report.error_history[-1] if report.error_history else first.final_error
    log.debug("irls_solve(%s): %d outer iterations", kernel.name, report.iterations_used)
    return graph.values(), report, weights
