"""Gaussian mixture uncertainty models.

Covers component likelihoods, max-mixture selection, and variational Bayes
fitting of a finite mixture under a symmetric Dirichlet prior on the weights
and a normal-inverse-Wishart prior on each component's mean and covariance.
Surplus components are pruned by effective count after convergence.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import digamma, gammaln, logsumexp

from .factor_graph import COV_FLOOR, floor_covariance

LOG_2PI = math.log(2.0 * math.pi)


class MixtureError(ValueError):
    pass


@dataclass
class GaussianComponent:
    weight: float
    mean: np.ndarray
    covariance: np.ndarray

    def __post_init__(self):
        self.mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        self.covariance = np.atleast_2d(np.asarray(self.covariance, dtype=float))
        if self.covariance.shape != (self.mean.shape[0],) * 2:
            raise MixtureError("component mean/covariance dimension mismatch")
        if not 0.0 < self.weight <= 1.0 + 1e-12:
            raise MixtureError(f"component weight {self.weight} outside (0, 1]")

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


@dataclass
class GMM:
    components: list[GaussianComponent]

    def __post_init__(self):
        if not self.components:
            raise MixtureError("GMM needs at least one component")
        dims = {c.dim for c in self.components}
        if len(dims) != 1:
            raise MixtureError("components have different dimensions")
        total = sum(c.weight for c in self.components)
        if abs(total - 1.0) > 1e-9:
            raise MixtureError(f"weights sum to {total}, expected 1")

    @property
    def dim(self) -> int:
        return self.components[0].dim

    @property
    def weights(self) -> np.ndarray:
        return np.array([c.weight for c in self.components])

    def __len__(self) -> int:
        return len(self.components)

    def dominant(self) -> int:
        return int(np.argmax(self.weights))

    def to_dict(self) -> dict:
        return {
            "dim": self.dim,
            "components": [
                {
                    "weight": c.weight,
                    "mean": c.mean.tolist(),
                    "covariance": c.covariance.ravel().tolist(),
                }
                for c in self.components
            ],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "GMM":
        d = int(doc["dim"])
        comps = [
            GaussianComponent(
                float(c["weight"]),
                np.asarray(c["mean"], dtype=float).reshape(d),
                np.asarray(c["covariance"], dtype=float).reshape(d, d),
            )
            for c in doc["components"]
        ]
        gmm = cls(comps)
        if gmm.dim != d:
            raise MixtureError("dim field does not match component dimension")
        return gmm

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "GMM":
        return cls.from_dict(json.loads(text))


def component_log_likelihood(component: GaussianComponent, r) -> float:
    """``log(w * N(r | mean, cov))`` evaluated in the log domain."""
    r = np.atleast_1d(np.asarray(r, dtype=float))
    if r.shape != component.mean.shape:
        raise MixtureError(f"residual shape {r.shape} != component dim {component.dim}")
    evals = np.linalg.eigvalsh(component.covariance)
    if evals.min() < COV_FLOOR * (1 - 1e-9):
        raise MixtureError("component covariance below floor")
    chol = np.linalg.cholesky(component.covariance)
    z = np.linalg.solve(chol, r - component.mean)
    logdet = 2.0 * np.log(np.diag(chol)).sum()
    d = component.dim
    return float(math.log(component.weight) - 0.5 * d * LOG_2PI - 0.5 * logdet - 0.5 * z @ z)


def gmm_log_likelihoods(gmm: GMM, R) -> np.ndarray:
    """``(N, M)`` matrix of per-component weighted log-likelihoods."""
    R = np.atleast_2d(np.asarray(R, dtype=float))
    out = np.empty((R.shape[0], len(gmm)))
    for m, c in enumerate(gmm.components):
        chol = np.linalg.cholesky(c.covariance)
        z = np.linalg.solve(chol, (R - c.mean).T)
        logdet = 2.0 * np.log(np.diag(chol)).sum()
        out[:, m] = math.log(c.weight) - 0.5 * c.dim * LOG_2PI - 0.5 * logdet - 0.5 * (z * z).sum(0)
    return out


def max_mixture_select(gmm: GMM, r) -> tuple[int, float]:
    """Index and log-likelihood of the single most likely component; ties go low."""
    ll = [component_log_likelihood(c, r) for c in gmm.components]
    idx = int(np.argmax(ll))
    return idx, ll[idx]


# ---------------------------------------------------------------------------
# variational Bayes


@dataclass
class VBConfig:
    max_components: int = 10
    alpha0: float = 1.0
    m0: np.ndarray | None = None
    kappa0: float = 0.01
    nu0: float | None = None
    S0: np.ndarray | None = None
    max_vb_iterations: int = 500
    free_energy_rel_tol: float = 1e-8
    prune_min_count: float = 2.0
    rng_seed: int = 0

    def resolved(self, d: int) -> "VBConfig":
        """Copy with dimension-dependent defaults filled in and validated."""
        m0 = np.zeros(d) if self.m0 is None else np.atleast_1d(np.asarray(self.m0, float))
        nu0 = d + 2.0 if self.nu0 is None else float(self.nu0)
        S0 = nu0 * np.eye(d) if self.S0 is None else np.atleast_2d(np.asarray(self.S0, float))
        cfg = VBConfig(self.max_components, self.alpha0, m0, self.kappa0, nu0, S0,
                       self.max_vb_iterations, self.free_energy_rel_tol,
                       self.prune_min_count, self.rng_seed)
        if m0.shape != (d,) or S0.shape != (d, d):
            raise MixtureError("prior dimensions do not match data")
        if cfg.max_components < 1 or cfg.alpha0 <= 0 or cfg.kappa0 <= 0:
            raise MixtureError("max_components, alpha0, kappa0 must be positive")
        if not nu0 > d - 1:
            raise MixtureError("nu0 must exceed d - 1")
        if not np.allclose(S0, S0.T) or np.linalg.eigvalsh(S0).min() <= 0:
            raise MixtureError("S0 must be symmetric positive-definite")
        return cfg

    @classmethod
    def for_apriori(cls, covariance, **kwargs) -> "VBConfig":
        """Prior whose expected covariance equals the a-priori measurement covariance."""
        cov = np.atleast_2d(np.asarray(covariance, dtype=float))
        d = cov.shape[0]
        nu0 = kwargs.pop("nu0", d + 2.0)
        return cls(nu0=nu0, S0=nu0 * cov, m0=np.zeros(d), **kwargs)


@dataclass
class VBPosterior:
    alpha: np.ndarray
    kappa: np.ndarray
    m: np.ndarray
    nu: np.ndarray
    S: np.ndarray
    responsibilities: np.ndarray
    # log rho before normalization, kept so pruning can renormalize exactly
    log_rho: np.ndarray = field(repr=False, default=None)

    @property
    def n_components(self) -> int:
        return self.alpha.shape[0]

    @property
    def dim(self) -> int:
        return self.m.shape[1]

    @property
    def counts(self) -> np.ndarray:
        return self.responsibilities.sum(0)

    def subset(self, keep) -> "VBPosterior":
        keep = np.asarray(keep)
        log_rho = self.log_rho[:, keep]
        resp = np.exp(log_rho - logsumexp(log_rho, axis=1, keepdims=True))
        return VBPosterior(self.alpha[keep], self.kappa[keep], self.m[keep], self.nu[keep],
                           self.S[keep], resp, log_rho)


def _as_residual_matrix(residuals) -> np.ndarray:
    R = np.asarray(residuals, dtype=float)
    if R.ndim == 1:
        R = R[:, None]
    if R.ndim != 2:
        raise MixtureError("residuals must be a list of d-vectors")
    bad = np.flatnonzero(~np.all(np.isfinite(R), axis=1))
    if bad.size:
        raise MixtureError(f"non-finite residual at index {int(bad[0])}")
    return R


def _expected_logdet_precision(nu, S, d):
    i = np.arange(1, d + 1)
    _, logdetS = np.linalg.slogdet(S)
    return digamma((nu[:, None] + 1 - i) / 2.0).sum(1) + d * math.log(2.0) - logdetS


def _expected_log_rho(R, post: VBPosterior):
    """``log rho`` of the responsibility update, shape ``(N, M)``."""
    N, d = R.shape
    e_logw = digamma(post.alpha) - digamma(post.alpha.sum())
    e_logdet = _expected_logdet_precision(post.nu, post.S, d)
    Sinv = np.linalg.inv(post.S)
    diff = R[None, :, :] - post.m[:, None, :]
    maha = np.einsum("kni,kij,knj->nk", diff, Sinv, diff)
    return (e_logw + 0.5 * e_logdet - 0.5 * d * LOG_2PI
            - 0.5 * (d / post.kappa + post.nu * maha))


def _m_step(R, resp, cfg: VBConfig) -> VBPosterior:
    Nk = resp.sum(0)
    safe = np.where(Nk > 0, Nk, 1.0)
    xbar = (resp.T @ R) / safe[:, None]
    xbar[Nk <= 0] = cfg.m0
    M, d = resp.shape[1], R.shape[1]
    alpha = cfg.alpha0 + Nk
    kappa = cfg.kappa0 + Nk
    nu = cfg.nu0 + Nk
    m = (cfg.kappa0 * cfg.m0 + Nk[:, None] * xbar) / kappa[:, None]
    diff = R[None, :, :] - xbar[:, None, :]
    scatter = np.einsum("nk,kni,knj->kij", resp, diff, diff)
    dm = xbar - cfg.m0
    S = cfg.S0 + scatter + (cfg.kappa0 * Nk / kappa)[:, None, None] * np.einsum("ki,kj->kij", dm, dm)
    S = 0.5 * (S + S.transpose(0, 2, 1))
    return VBPosterior(alpha, kappa, m, nu, S, resp)


def _e_step(R, post: VBPosterior, log_rho=None) -> VBPosterior:
    if log_rho is None:
        log_rho = _expected_log_rho(R, post)
    resp = np.exp(log_rho - logsumexp(log_rho, axis=1, keepdims=True))
    return VBPosterior(post.alpha, post.kappa, post.m, post.nu, post.S, resp, log_rho)


def _log_dirichlet_norm(alpha):
    return gammaln(alpha.sum()) - gammaln(alpha).sum()


def _log_iw_norm(S, nu, d):
    """log of the inverse-Wishart normalizer; S may be a stack of matrices."""
    _, logdetS = np.linalg.slogdet(S)
    return 0.5 * nu * logdetS - 0.5 * nu * d * math.log(2.0) - multigammaln_vec(0.5 * nu, d)


def multigammaln_vec(a, d):
    a = np.atleast_1d(np.asarray(a, dtype=float))
    j = np.arange(1, d + 1)
    return 0.25 * d * (d - 1) * math.log(math.pi) + gammaln(a[:, None] + 0.5 * (1 - j)).sum(1)


def vb_free_energy(residuals, posterior: VBPosterior, config: VBConfig) -> float:
    """Mean-field evidence lower bound for the Dirichlet / NIW mixture.

    Expected complete-data log-likelihood plus prior expectations minus the
    entropies of ``q(Z)`` and ``q(w, mu, Lambda)``; all terms closed form.
    """
    R = _as_residual_matrix(residuals)
    N, d = R.shape
    if posterior.dim != d or posterior.responsibilities.shape[0] != N:
        raise MixtureError("posterior is inconsistent with the residuals")
    return _free_energy(R, posterior, config.resolved(d))[0]


def _free_energy(R, post: VBPosterior, cfg: VBConfig):
    """Free energy plus the ``log rho`` matrix computed along the way."""
    d = R.shape[1]
    resp = post.responsibilities
    M = post.n_components
    e_logw = digamma(post.alpha) - digamma(post.alpha.sum())
    e_logdet = _expected_logdet_precision(post.nu, post.S, d)
    Sinv = np.linalg.inv(post.S)

    # E[log p(R | Z, mu, Lambda)] + E[log p(Z | w)] = sum_nk r_nk log rho_nk
    log_rho = _expected_log_rho(R, post)
    lik = float((resp * log_rho).sum())

    # E[log p(w)] - E[log q(w)]
    alpha0 = np.full(M, cfg.alpha0)
    w_term = (_log_dirichlet_norm(alpha0) + ((alpha0 - 1) * e_logw).sum()
              - _log_dirichlet_norm(post.alpha) - ((post.alpha - 1) * e_logw).sum())

    # E[log p(mu, Lambda)] - E[log q(mu, Lambda)]
    dm = post.m - cfg.m0
    maha0 = np.einsum("ki,kij,kj->k", dm, Sinv, dm)
    e_log_prior_mean = (-0.5 * d * LOG_2PI + 0.5 * d * math.log(cfg.kappa0) + 0.5 * e_logdet
                        - 0.5 * cfg.kappa0 * (d / post.kappa + post.nu * maha0))
    tr = np.einsum("ij,kji->k", cfg.S0, Sinv)
    e_log_prior_cov = (_log_iw_norm(cfg.S0, cfg.nu0, d)
                       + 0.5 * (cfg.nu0 + d + 1) * e_logdet - 0.5 * post.nu * tr)
    e_log_q_mean = -0.5 * d * LOG_2PI + 0.5 * d * np.log(post.kappa) + 0.5 * e_logdet - 0.5 * d
    e_log_q_cov = (_log_iw_norm(post.S, post.nu, d)
                   + 0.5 * (post.nu + d + 1) * e_logdet - 0.5 * post.nu * d)
    theta_term = (e_log_prior_mean + e_log_prior_cov - e_log_q_mean - e_log_q_cov).sum()

    # -E[log q(Z)]
    with np.errstate(divide="ignore", invalid="ignore"):
        ent = -np.where(resp > 0, resp * np.log(resp), 0.0).sum()
    return float(lik + w_term + theta_term + ent), log_rho


def _kmeanspp_assign(R, M, scale_chol, rng):
    """k-means++ seeding followed by nearest-seed assignment; returns labels."""
    N = R.shape[0]
    Z = np.linalg.solve(scale_chol, R.T).T
    M = min(M, N)
    centers = [int(rng.integers(N))]
    d2 = ((Z - Z[centers[0]]) ** 2).sum(1)
    for _ in range(1, M):
        total = d2.sum()
        if total <= 0:
            nxt = int(rng.integers(N))
        else:
            nxt = int(rng.choice(N, p=d2 / total))
        centers.append(nxt)
        d2 = np.minimum(d2, ((Z - Z[nxt]) ** 2).sum(1))
    dist = ((Z[:, None, :] - Z[centers][None, :, :]) ** 2).sum(2)
    return np.argmin(dist, axis=1), len(centers)


def _sweep_to_convergence(R, post, cfg, max_iter, history=None):
    """Alternate E and M updates; returns the posterior and its free energy."""
    fe_prev = None
    fe = None
    log_rho = None
    for _ in range(max_iter):
        post = _e_step(R, post, log_rho)
        post = _m_step(R, post.responsibilities, cfg)
        fe, log_rho = _free_energy(R, post, cfg)
        if history is not None:
            history.append(fe)
        if fe_prev is not None and abs(fe - fe_prev) <= cfg.free_energy_rel_tol * abs(fe):
            break
        fe_prev = fe
    return post, fe


# sweeps before merge moves are tried, and per tentative merge
MERGE_WARMUP_SWEEPS = 50


def _merge_candidates(post, min_count):
    """Pairs of occupied components ordered by Bhattacharyya distance."""
    d = post.dim
    occupied = np.flatnonzero(post.counts >= min_count)
    cov = post.S / np.maximum(post.nu - d - 1, 1e-3)[:, None, None]
    pairs = []
    for i, a in enumerate(occupied):
        for b in occupied[i + 1:]:
            c = 0.5 * (cov[a] + cov[b])
            dm = post.m[a] - post.m[b]
            dist = (0.125 * dm @ np.linalg.solve(c, dm)
                    + 0.5 * (np.linalg.slogdet(c)[1]
                             - 0.5 * (np.linalg.slogdet(cov[a])[1] + np.linalg.slogdet(cov[b])[1])))
            pairs.append((dist, int(a), int(b)))
    pairs.sort()
    return [(a, b) for _, a, b in pairs]


def vb_fit(residuals, config: VBConfig | None = None, merge_moves: bool = True):
    """Fit the VB mixture by coordinate ascent.

    Returns ``(posterior, free_energy_history)``; the history has one entry
    per full sweep (responsibilities then parameters). After convergence,
    pairs of components are tentatively merged and re-converged, and a merge
    is kept only when it raises the free energy, which lets the truncated
    model shed components that split a single cluster. Components whose
    effective count is below ``prune_min_count`` are then dropped. The result
    depends only on the multiset of residuals and the seed.
    """
    R = _as_residual_matrix(residuals)
    N, d = R.shape
    if N < 2:
        raise MixtureError("vb_fit needs at least two residuals")
    cfg = (config or VBConfig()).resolved(d)

    # canonical order so the fit is invariant to input permutation
    order = np.lexsort(R.T[::-1])
    inverse = np.empty_like(order)
    inverse[order] = np.arange(N)
    Rs = R[order]

    rng = np.random.default_rng(cfg.rng_seed)
    prior_cov = cfg.S0 / max(cfg.nu0 - d - 1, 1.0)
    labels, M = _kmeanspp_assign(Rs, cfg.max_components, np.linalg.cholesky(prior_cov), rng)
    resp = np.zeros((N, cfg.max_components))
    resp[np.arange(N), labels] = 1.0
    post = _m_step(Rs, resp, cfg)

    history: list[float] = []
    warmup = min(MERGE_WARMUP_SWEEPS, cfg.max_vb_iterations) if merge_moves else cfg.max_vb_iterations
    post, fe = _sweep_to_convergence(Rs, post, cfg, warmup, history)

    if merge_moves:
        min_count = max(cfg.prune_min_count, 1e-6)
        improved = True
        while improved:
            improved = False
            for a, b in _merge_candidates(post, min_count):
                resp = post.responsibilities.copy()
                resp[:, a] += resp[:, b]
                resp[:, b] = 0.0
                trial = _m_step(Rs, resp, cfg)
                trial, fe_trial = _sweep_to_convergence(Rs, trial, cfg, MERGE_WARMUP_SWEEPS)
                if fe_trial > fe + 1e-9 * abs(fe):
                    post, fe = trial, fe_trial
                    history.append(fe)
                    improved = True
                    break
        remaining = cfg.max_vb_iterations - len(history)
        if remaining > 0:
            post, fe = _sweep_to_convergence(Rs, post, cfg, remaining, history)

    # final responsibilities consistent with the final parameters
    post = _e_step(Rs, post)
    keep = np.flatnonzero(post.counts >= cfg.prune_min_count)
    if keep.size == 0:
        keep = np.array([int(np.argmax(post.counts))])
    if keep.size < post.n_components:
        post = post.subset(keep)
    post.responsibilities = post.responsibilities[inverse]
    post.log_rho = post.log_rho[inverse]
    return post, history


def extract_point_gmm(posterior: VBPosterior) -> GMM:
    """Posterior-mean GMM: weights from alpha, means m, covariances S / (nu - d - 1)."""
    d = posterior.dim
    if np.any(posterior.nu <= d + 1):
        raise MixtureError("nu <= d + 1: too few effective observations for a covariance")
    w = posterior.alpha / posterior.alpha.sum()
    comps = [
        GaussianComponent(float(w[k]), posterior.m[k].copy(),
                          floor_covariance(posterior.S[k] / (posterior.nu[k] - d - 1)))
        for k in range(posterior.n_components)
    ]
    # guard the sum-to-one invariant against round-off
    total = sum(c.weight for c in comps)
    for c in comps:
        c.weight /= total
    return GMM(comps)


def hard_assign(model, r=None, index: int | None = None) -> int:
    """Component index for a residual.

    With a :class:`VBPosterior` and ``index`` of a residual seen during the
    fit, returns its argmax responsibility. Otherwise ``r`` is matched against
    the (extracted) GMM by max-mixture selection. Ties go to the lowest index.
    """
    if isinstance(model, VBPosterior):
        if index is not None:
            return int(np.argmax(model.responsibilities[index]))
        model = extract_point_gmm(model)
    if r is None:
        raise MixtureError("need a residual or a fitted-residual index")
    return max_mixture_select(model, r)[0]


def hard_assign_all(posterior: VBPosterior) -> np.ndarray:
    return np.argmax(posterior.responsibilities, axis=1)


def gmm_from_components(weights: Sequence[float], means, covariances) -> GMM:
    w = np.asarray(weights, dtype=float)
    w = w / w.sum()
    return GMM([GaussianComponent(float(wi), mu, cov) for wi, mu, cov in zip(w, means, covariances)])
