"""Levenberg-Marquardt solver for the weighted NLLS problem of a FactorGraph."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .factor_graph import FactorGraph

log = logging.getLogger(__name__)


class SolverError(RuntimeError):
    """Raised when linearization or the damped normal equations fail."""


@dataclass
class SolverConfig:
    max_iterations: int = 100
    lambda_init: float = 1e-4
    lambda_up: float = 10.0
    lambda_down: float = 10.0
    lambda_max: float = 1e10
    abs_error_tol: float = 1e-6
    rel_error_tol: float = 1e-8
    # "analytic" or "central_difference"
    jacobian_mode: str = "analytic"
    fd_step: float = 1e-6
    # "auto" picks sparse above sparse_threshold states
    linear_solver: str = "auto"
    sparse_threshold: int = 300

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be positive")
        if self.lambda_init <= 0 or self.lambda_up <= 1 or self.lambda_down <= 1:
            raise ValueError("lambda_init > 0 and lambda factors > 1 required")
        if self.abs_error_tol <= 0 or self.rel_error_tol <= 0:
            raise ValueError("tolerances must be positive")
        if self.jacobian_mode not in ("analytic", "central_difference"):
            raise ValueError(f"unknown jacobian_mode {self.jacobian_mode!r}")
        if self.linear_solver not in ("auto", "dense", "sparse"):
            raise ValueError(f"unknown linear_solver {self.linear_solver!r}")


@dataclass
class SolveReport:
    iterations_used: int = 0
    initial_error: float = 0.0
    final_error: float = 0.0
    converged: bool = False
    error_history: list[float] = field(default_factory=list)


def _check_weights(graph: FactorGraph, weights):
    if weights is None:
        return None
    weights = np.asarray(weights, dtype=float)
    if weights.shape != (len(graph.factors),):
        raise ValueError(
            f"weights must cover every factor: got {weights.shape}, need {len(graph.factors)}"
        )
    if np.any(weights < 0) or not np.all(np.isfinite(weights)):
        raise ValueError("weights must be finite and non-negative")
    return weights


def linearize(graph: FactorGraph, weights=None, config: SolverConfig | None = None,
              x: np.ndarray | None = None, dense: bool = False, noise=None):
    """Whitened Jacobian and whitened residual vector, stacked in factor order.

    With weight ``w`` a factor block is scaled by ``sqrt(w)``, which is the same
    as using covariance ``cov / w``. Returns ``(J, z)`` where ``J`` is a CSR
    matrix (or ndarray when ``dense``) of ``d z / d x``.
    """
    config = config or SolverConfig()
    weights = _check_weights(graph, weights)
    fd = config.fd_step if config.jacobian_mode == "central_difference" else None
    xs = graph.state_vector if x is None else x
    lay = graph.layout()
    r = graph.residual_vector(xs)
    vals = graph.jacobian_values(xs, fd)
    if not (np.all(np.isfinite(r)) and np.all(np.isfinite(vals))):
        bad = _first_nonfinite(lay, r, vals)
        raise SolverError(f"non-finite residual or Jacobian in factor {bad} ({graph.factors[bad].tag.value})")
    n_rows = int(lay.row_offsets[-1])
    J = sp.csr_matrix((vals, (lay.jac_rows, lay.jac_cols)), shape=(n_rows, graph.dim))
    W, means = graph.noise_arrays() if noise is None else noise
    if weights is not None:
        row_scale = np.repeat(np.sqrt(weights), np.diff(lay.row_offsets))
        W = sp.diags(row_scale) @ W
    J = (W @ J).tocsr()
    z = W @ (r - means)
    return (J.toarray() if dense else J), z


def _first_nonfinite(lay, r, vals):
    bad_r = np.searchsorted(lay.row_offsets, np.flatnonzero(~np.isfinite(r)), side="right") - 1
    bad_v = np.searchsorted(lay.val_offsets, np.flatnonzero(~np.isfinite(vals)), side="right") - 1
    return int(np.concatenate([bad_r, bad_v]).min())


def _weighted_error(graph, x, weights, noise=None):
    e = graph.factor_errors(x, noise)
    return float(e.sum() if weights is None else (weights * e).sum())


def _solve_damped(H, g, lam, use_sparse):
    diag = H.diagonal().copy()
    diag = np.maximum(diag, 1e-12 * max(1.0, diag.max(initial=0.0)))
    if use_sparse:
        A = (H + sp.diags(lam * diag)).tocsc()
        try:
            step = spla.splu(A).solve(g)
        except RuntimeError as exc:
            raise np.linalg.LinAlgError(str(exc)) from exc
    else:
        A = H + np.diag(lam * diag)
        c, low = scipy.linalg.cho_factor(A)
        step = scipy.linalg.cho_solve((c, low), g)
    if not np.all(np.isfinite(step)):
        raise np.linalg.LinAlgError("non-finite step")
    return step


# relative error change treated as rounding noise when accepting a step
ROUNDING_SLACK = 64 * np.finfo(float).eps


def lm_solve(graph: FactorGraph, config: SolverConfig | None = None, weights=None):
    """Minimize the (optionally weighted) total error of ``graph`` in place.

    Damping is Marquardt style, ``(H + lambda diag(H)) dx = -J^T z``, with a
    multiplicative schedule. A step is accepted unless it raises the error
    beyond rounding noise. Stops when an accepted step lowers the error by
    at most ``abs_error_tol`` or by a fraction below ``rel_error_tol``, when
    no damping level lowers it, or after ``max_iterations``.
    Returns ``(values, report)``.
    """
    config = config or SolverConfig()
    if not graph.factors:
        raise ValueError("graph has no factors")
    weights = _check_weights(graph, weights)
    use_sparse = config.linear_solver == "sparse" or (
        config.linear_solver == "auto" and graph.dim > config.sparse_threshold
    )
    x = graph.state_vector
    noise = graph.noise_arrays()
    err = _weighted_error(graph, x, weights, noise)
    report = SolveReport(initial_error=err, final_error=err, error_history=[err])
    if not np.isfinite(err):
        raise SolverError("initial error is not finite")
    lam = config.lambda_init
    for it in range(config.max_iterations):
        report.iterations_used = it + 1
        if err == 0.0:
            report.converged = True
            break
        J, z = linearize(graph, weights, config, x=x, dense=not use_sparse, noise=noise)
        H = (J.T @ J)
        g = -(J.T @ z)
        if use_sparse:
            H = sp.csr_matrix(H)
        accepted = False
        n_solved = 0
        while lam <= config.lambda_max:
            try:
                step = _solve_damped(H, g, lam, use_sparse)
            except (np.linalg.LinAlgError, scipy.linalg.LinAlgError):
                lam *= config.lambda_up
                continue
            n_solved += 1
            x_new = x + step
            new_err = _weighted_error(graph, x_new, weights, noise)
            # near the minimum the remaining decrease is below the rounding
            # noise of the error itself; such a step is taken and ends the solve
            if np.isfinite(new_err) and new_err <= err + ROUNDING_SLACK * err:
                accepted = True
                break
            lam *= config.lambda_up
        if not accepted:
            if n_solved == 0:
                raise SolverError("normal equations failed even at maximum damping")
            # no damping level decreases the error: at a (local) minimum
            report.converged = True
            break
        decrease = err - new_err
        rel = decrease / max(err, 1e-300)
        x, err = x_new, new_err
        report.error_history.append(err)
        lam = max(lam / config.lambda_down, 1e-15)
        if decrease <= config.abs_error_tol or rel < config.rel_error_tol:
            report.converged = True
            break
    graph.state_vector = x
    report.final_error = err
    log.debug("lm_solve: %d iterations, error %.6g -> %.6g", report.iterations_used,
              report.initial_error, report.final_error)
    return graph.values(), report
