"""Batch estimation problem as state blocks plus factors with Gaussian noise.

Residual convention is ``r = y - h(X)``. Every factor carries a
:class:`GaussianNoise` with a mean *and* a covariance, so a noise model
learned from residual clusters can re-center the residual before whitening.
"""

from __future__ import annotations

import enum
import hashlib
import json
from dataclasses import dataclass, field
from typing import Any, Callable, Hashable, Sequence

import numpy as np
import scipy.sparse as sp

COV_FLOOR = 1e-8


class GraphError(ValueError):
    """Raised for malformed graphs, keys, or noise models."""


class StateKind(str, enum.Enum):
    POSITION3D = "position3d"
    CLOCK_BIAS = "clock_bias"
    TROPO_WET = "tropo_wet"
    AMBIGUITY = "ambiguity"
    SCALAR = "scalar"

    @property
    def dim(self) -> int:
        return 3 if self is StateKind.POSITION3D else 1


class FactorTag(str, enum.Enum):
    PSEUDORANGE = "pseudorange"
    CARRIER_PHASE = "carrier_phase"
    MOTION_PRIOR = "motion_prior"
    STATE_PRIOR = "state_prior"


@dataclass(frozen=True)
class StateBlockKey:
    """Identifier of one state block.

    ``epoch`` is an epoch index or ``None`` for static blocks.
    """

    id: Hashable
    kind: StateKind
    epoch: int | None = None

    @property
    def dim(self) -> int:
        return self.kind.dim

    def __str__(self) -> str:
        ep = "static" if self.epoch is None else str(self.epoch)
        return f"{self.kind.value}:{self.id}@{ep}"


def floor_covariance(cov: np.ndarray, floor: float = COV_FLOOR) -> np.ndarray:
    """Symmetrize ``cov`` and clamp its eigenvalues to at least ``floor``."""
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    if cov.shape[0] != cov.shape[1]:
        raise GraphError(f"covariance must be square, got {cov.shape}")
    if not np.all(np.isfinite(cov)):
        raise GraphError("covariance has non-finite entries")
    cov = 0.5 * (cov + cov.T)
    evals, evecs = np.linalg.eigh(cov)
    if evals.min() >= floor:
        return cov
    evals = np.maximum(evals, floor)
    return (evecs * evals) @ evecs.T


class GaussianNoise:
    """Gaussian noise model ``N(mean, covariance)`` for one factor.

    The covariance is floored at construction, and the inverse lower
    Cholesky factor used for whitening is cached.
    """

    __slots__ = ("mean", "covariance", "_sqrt_info")

    def __init__(self, mean, covariance):
        cov = floor_covariance(covariance)
        mean = np.atleast_1d(np.asarray(mean, dtype=float)).copy()
        if mean.shape != (cov.shape[0],):
            raise GraphError(
                f"mean shape {mean.shape} does not match covariance {cov.shape}"
            )
        if not np.all(np.isfinite(mean)):
            raise GraphError("noise mean has non-finite entries")
        try:
            chol = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError as exc:
            raise GraphError("covariance not decomposable after flooring") from exc
        self.mean = mean
        self.covariance = cov
        self._sqrt_info = np.linalg.inv(chol)
        self.mean.setflags(write=False)
        self.covariance.setflags(write=False)

    @classmethod
    def isotropic(cls, sigma: float, dim: int = 1) -> "GaussianNoise":
        return cls(np.zeros(dim), np.eye(dim) * sigma**2)

    @classmethod
    def diagonal(cls, sigmas: Sequence[float], mean=None) -> "GaussianNoise":
        sigmas = np.asarray(sigmas, dtype=float)
        mean = np.zeros(len(sigmas)) if mean is None else mean
        return cls(mean, np.diag(sigmas**2))

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    @property
    def sqrt_information(self) -> np.ndarray:
        """``L^-1`` with ``L L^T = covariance``."""
        return self._sqrt_info

    def whiten(self, r: np.ndarray) -> np.ndarray:
        return self._sqrt_info @ (np.asarray(r, dtype=float) - self.mean)

    def unwhiten(self, z: np.ndarray) -> np.ndarray:
        """Inverse of :meth:`whiten` without the mean, i.e. returns ``r - mean``."""
        return np.linalg.cholesky(self.covariance) @ np.asarray(z, dtype=float)

    def scaled(self, factor: float) -> "GaussianNoise":
        return GaussianNoise(self.mean, self.covariance * factor)

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "covariance": self.covariance.tolist()}

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, GaussianNoise):
            return NotImplemented
        return np.array_equal(self.mean, other.mean) and np.array_equal(
            self.covariance, other.covariance
        )

    def __repr__(self) -> str:
        return f"GaussianNoise(mean={self.mean.tolist()}, covariance={self.covariance.tolist()})"


ResidualFn = Callable[[Sequence[np.ndarray]], np.ndarray]
JacobianFn = Callable[[Sequence[np.ndarray]], Sequence[np.ndarray]]


@dataclass(frozen=True, eq=False)
class BatchModel:
    """Vectorized residual model shared by many factors of one type.

    ``residual(blocks, params)`` gets one ``(n, dim_k)`` array per key
    position and a dict of per-factor parameter arrays (leading axis ``n``)
    and returns ``(n, d)`` residuals. ``jacobian`` returns one
    ``(n, d, dim_k)`` array per key position. Factors sharing a model are
    evaluated in a single call.
    """

    name: str
    residual: Callable[[list[np.ndarray], dict[str, np.ndarray]], np.ndarray]
    jacobian: Callable[[list[np.ndarray], dict[str, np.ndarray]], list[np.ndarray]]


@dataclass
class Factor:
    """One residual term of the cost.

    ``residual_fn`` maps the list of block values (in ``keys`` order) to
    ``y - h(X)``. ``jacobian_fn``, when given, returns one ``d x dim(block)``
    matrix per key; otherwise Jacobians are taken by central differences.
    A factor may instead (or also) name a :class:`BatchModel` with its own
    ``params``; the per-factor functions are then derived from the batch.
    ``group_id`` links factors whose residuals are clustered jointly;
    ``None`` marks priors and other factors that are never re-weighted.
    """

    keys: tuple[StateBlockKey, ...]
    residual_fn: ResidualFn | None
    noise: GaussianNoise
    tag: FactorTag = FactorTag.STATE_PRIOR
    group_id: Hashable | None = None
    jacobian_fn: JacobianFn | None = None
    meta: dict[str, Any] = field(default_factory=dict)
    batch: BatchModel | None = None
    params: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        self.keys = tuple(self.keys)
        self.tag = FactorTag(self.tag)
        if self.residual_fn is None and self.batch is None:
            raise GraphError("factor needs a residual function or a batch model")

    @property
    def dim(self) -> int:
        return self.noise.dim

    def _batch_params(self):
        return {k: np.asarray(v, dtype=float)[None, ...] for k, v in self.params.items()}

    def residual(self, values: Sequence[np.ndarray]) -> np.ndarray:
        if self.residual_fn is None:
            blocks = [np.asarray(v, dtype=float)[None, :] for v in values]
            return np.asarray(self.batch.residual(blocks, self._batch_params()), dtype=float)[0]
        return np.atleast_1d(np.asarray(self.residual_fn(values), dtype=float))

    def jacobians(self, values: Sequence[np.ndarray], fd_step: float | None = None):
        """Jacobians of the residual with respect to each block."""
        if fd_step is None:
            if self.jacobian_fn is not None:
                return [np.atleast_2d(np.asarray(j, dtype=float)) for j in self.jacobian_fn(values)]
            if self.batch is not None:
                blocks = [np.asarray(v, dtype=float)[None, :] for v in values]
                return [np.asarray(j, dtype=float)[0]
                        for j in self.batch.jacobian(blocks, self._batch_params())]
        return numerical_jacobians(self.residual, values, fd_step or 1e-6)


def numerical_jacobians(fn, values: Sequence[np.ndarray], step: float = 1e-6):
    """Central-difference Jacobians of ``fn(values)`` per block."""
    values = [np.array(v, dtype=float) for v in values]
    r0 = np.atleast_1d(fn(values))
    out = []
    for b, v in enumerate(values):
        jac = np.empty((r0.shape[0], v.shape[0]))
        for i in range(v.shape[0]):
            h = step * max(1.0, abs(v[i]))
            vp = [x.copy() for x in values]
            vm = [x.copy() for x in values]
            vp[b][i] += h
            vm[b][i] -= h
            jac[:, i] = (np.atleast_1d(fn(vp)) - np.atleast_1d(fn(vm))) / (2 * h)
        out.append(jac)
    return out


@dataclass(frozen=True)
class ResidualRecord:
    index: int
    raw: np.ndarray
    whitened: np.ndarray


@dataclass
class _Layout:
    """Index bookkeeping derived from the graph structure (not the noise)."""

    row_offsets: np.ndarray     # factor i owns rows row_offsets[i]:row_offsets[i+1]
    val_offsets: np.ndarray     # and Jacobian entries val_offsets[i]:val_offsets[i+1]
    jac_rows: np.ndarray
    jac_cols: np.ndarray
    w_rows: np.ndarray          # block-diagonal whitening pattern
    w_cols: np.ndarray
    batches: list               # (model, factor indices, per-key column arrays, params)
    singles: np.ndarray         # factors evaluated one at a time


class FactorGraph:
    """State blocks stored contiguously in one vector plus an ordered factor list."""

    def __init__(self):
        self._offsets: dict[StateBlockKey, int] = {}
        self._order: list[StateBlockKey] = []
        self._x = np.zeros(0)
        self.factors: list[Factor] = []
        self._layout: _Layout | None = None

    # -- state blocks -------------------------------------------------
    def add_state_block(self, key: StateBlockKey, initial_value) -> "FactorGraph":
        if key in self._offsets:
            raise GraphError(f"duplicate state block {key}")
        value = np.atleast_1d(np.asarray(initial_value, dtype=float))
        if value.shape != (key.dim,):
            raise GraphError(
                f"block {key} expects dimension {key.dim}, got shape {value.shape}"
            )
        self._offsets[key] = self._x.shape[0]
        self._order.append(key)
        self._x = np.concatenate([self._x, value])
        self._layout = None
        return self

    def __contains__(self, key: StateBlockKey) -> bool:
        return key in self._offsets

    @property
    def keys(self) -> list[StateBlockKey]:
        return list(self._order)

    @property
    def dim(self) -> int:
        return self._x.shape[0]

    def offset(self, key: StateBlockKey) -> int:
        return self._offsets[key]

    def value(self, key: StateBlockKey) -> np.ndarray:
        if key not in self._offsets:
            raise GraphError(f"unknown state block {key}")
        o = self._offsets[key]
        return self._x[o : o + key.dim].copy()

    def set_value(self, key: StateBlockKey, value) -> None:
        value = np.atleast_1d(np.asarray(value, dtype=float))
        if value.shape != (key.dim,):
            raise GraphError(f"block {key} expects dimension {key.dim}")
        o = self._offsets[key]
        self._x[o : o + key.dim] = value

    @property
    def state_vector(self) -> np.ndarray:
        return self._x.copy()

    @state_vector.setter
    def state_vector(self, x) -> None:
        x = np.asarray(x, dtype=float)
        if x.shape != self._x.shape:
            raise GraphError(f"state vector shape {x.shape} != {self._x.shape}")
        self._x = x.copy()

    def values(self) -> dict[StateBlockKey, np.ndarray]:
        return {k: self.value(k) for k in self._order}

    # -- factors ------------------------------------------------------
    def add_factor(self, factor: Factor) -> "FactorGraph":
        missing = [k for k in factor.keys if k not in self._offsets]
        if missing:
            raise GraphError(f"factor references absent state blocks: {missing}")
        probe = factor.residual(self._block_values(factor))
        if probe.shape != (factor.noise.dim,):
            raise GraphError(
                f"residual dimension {probe.shape[0]} != noise dimension {factor.noise.dim}"
            )
        factor._slices = [slice(self._offsets[k], self._offsets[k] + k.dim) for k in factor.keys]
        self.factors.append(factor)
        self._layout = None
        return self

    def set_factor_noise(self, index: int, noise: GaussianNoise) -> "FactorGraph":
        if not 0 <= index < len(self.factors):
            raise GraphError(f"factor index {index} out of range")
        if not isinstance(noise, GaussianNoise):
            noise = GaussianNoise(*noise)
        if noise.dim != self.factors[index].noise.dim:
            raise GraphError(
                f"noise dimension {noise.dim} != factor dimension {self.factors[index].noise.dim}"
            )
        self.factors[index].noise = noise
        return self

    def factor_columns(self, index: int) -> np.ndarray:
        """State-vector indices touched by factor ``index``, in key order."""
        f = self.factors[index]
        return np.concatenate([np.arange(self._offsets[k], self._offsets[k] + k.dim) for k in f.keys])

    def _block_values(self, factor: Factor, x: np.ndarray | None = None):
        x = self._x if x is None else x
        sl = getattr(factor, "_slices", None)
        if sl is None:
            return [x[self._offsets[k] : self._offsets[k] + k.dim] for k in factor.keys]
        return [x[s] for s in sl]

    def block_values(self, factor: Factor, x: np.ndarray | None = None) -> list[np.ndarray]:
        return [v.copy() for v in self._block_values(factor, x)]

    # -- vectorized layout ----------------------------------------------
    def layout(self) -> _Layout:
        if self._layout is None:
            self._layout = self._build_layout()
        return self._layout

    def _build_layout(self) -> _Layout:
        n = len(self.factors)
        dims = np.array([f.dim for f in self.factors], dtype=int)
        cols = [self.factor_columns(i) for i in range(n)]
        ncols = np.array([c.shape[0] for c in cols], dtype=int)
        row_off = np.concatenate([[0], np.cumsum(dims)])
        val_off = np.concatenate([[0], np.cumsum(dims * ncols)])
        jr, jc, wr, wc = [], [], [], []
        for i in range(n):
            d = dims[i]
            rows = np.arange(row_off[i], row_off[i] + d)
            jr.append(np.repeat(rows, ncols[i]))
            jc.append(np.tile(cols[i], d))
            wr.append(np.repeat(rows, d))
            wc.append(np.tile(rows, d))
        cat = lambda a: np.concatenate(a) if a else np.zeros(0, dtype=int)  # noqa: E731
        groups: dict[int, list[int]] = {}
        models: dict[int, BatchModel] = {}
        singles = []
        for i, f in enumerate(self.factors):
            if f.batch is None:
                singles.append(i)
            else:
                groups.setdefault(id(f.batch), []).append(i)
                models[id(f.batch)] = f.batch
        batches = []
        for mid, idx in groups.items():
            first = self.factors[idx[0]]
            if any(self.factors[i].dim != first.dim
                   or [k.dim for k in self.factors[i].keys] != [k.dim for k in first.keys]
                   for i in idx):
                raise GraphError(f"factors of batch model {models[mid].name!r} differ in shape")
            key_cols = [np.array([np.arange(self._offsets[self.factors[i].keys[p]],
                                            self._offsets[self.factors[i].keys[p]] + k.dim)
                                  for i in idx])
                        for p, k in enumerate(first.keys)]
            params = {name: np.array([np.asarray(self.factors[i].params[name], dtype=float) for i in idx])
                      for name in first.params}
            batches.append((models[mid], np.array(idx), key_cols, params))
        return _Layout(row_off, val_off, cat(jr), cat(jc), cat(wr), cat(wc), batches,
                       np.array(singles, dtype=int))

    def residual_vector(self, x: np.ndarray | None = None) -> np.ndarray:
        """All raw residuals stacked in factor order."""
        x = self._x if x is None else np.asarray(x, dtype=float)
        lay = self.layout()
        out = np.empty(lay.row_offsets[-1])
        for model, idx, key_cols, params in lay.batches:
            r = np.asarray(model.residual([x[c] for c in key_cols], params), dtype=float)
            d = r.shape[1]
            out[lay.row_offsets[idx][:, None] + np.arange(d)] = r
        for i in lay.singles:
            f = self.factors[i]
            out[lay.row_offsets[i]:lay.row_offsets[i + 1]] = f.residual(self._block_values(f, x))
        return out

    def jacobian_values(self, x: np.ndarray | None = None, fd_step: float | None = None) -> np.ndarray:
        """Raw Jacobian entries in :meth:`layout` order."""
        x = self._x if x is None else np.asarray(x, dtype=float)
        lay = self.layout()
        out = np.empty(lay.val_offsets[-1])
        singles = lay.singles
        if fd_step is None:
            for model, idx, key_cols, params in lay.batches:
                jacs = model.jacobian([x[c] for c in key_cols], params)
                J = np.concatenate([np.asarray(j, dtype=float) for j in jacs], axis=2)
                n = J.shape[0]
                flat = J.reshape(n, -1)
                out[lay.val_offsets[idx][:, None] + np.arange(flat.shape[1])] = flat
        else:
            singles = np.arange(len(self.factors))
        for i in singles:
            f = self.factors[i]
            J = np.hstack(f.jacobians(self.block_values(f, x), fd_step))
            out[lay.val_offsets[i]:lay.val_offsets[i + 1]] = J.ravel()
        return out

    def noise_arrays(self):
        """Current noise models as a block-diagonal whitening matrix and stacked means."""
        lay = self.layout()
        vals = np.concatenate([f.noise.sqrt_information.ravel() for f in self.factors]) \
            if self.factors else np.zeros(0)
        means = np.concatenate([f.noise.mean for f in self.factors]) if self.factors else np.zeros(0)
        n = int(lay.row_offsets[-1])
        W = sp.csr_matrix((vals, (lay.w_rows, lay.w_cols)), shape=(n, n))
        return W, means

    def whitened_vector(self, x: np.ndarray | None = None, noise=None) -> np.ndarray:
        W, means = self.noise_arrays() if noise is None else noise
        return W @ (self.residual_vector(x) - means)

    def factor_errors(self, x: np.ndarray | None = None, noise=None) -> np.ndarray:
        """Per-factor squared Mahalanobis norm ``(r - mean)^T cov^-1 (r - mean)``.

        ``noise`` may pass a precomputed :meth:`noise_arrays` result.
        """
        if not self.factors:
            return np.zeros(0)
        z = self.whitened_vector(x, noise)
        return np.add.reduceat(z * z, self.layout().row_offsets[:-1])

    # -- evaluation ---------------------------------------------------
    def evaluate_residuals(self, x: np.ndarray | None = None) -> list[ResidualRecord]:
        out = []
        for i, f in enumerate(self.factors):
            raw = f.residual(self._block_values(f, x))
            out.append(ResidualRecord(i, raw, f.noise.whiten(raw)))
        return out

    def raw_residual(self, index: int, x: np.ndarray | None = None) -> np.ndarray:
        f = self.factors[index]
        return f.residual(self._block_values(f, x))

    def whitened_norms(self, x: np.ndarray | None = None) -> np.ndarray:
        return np.sqrt(self.factor_errors(x))

    def total_weighted_error(
        self, x: np.ndarray | None = None, weights: np.ndarray | None = None,
        indices: Sequence[int] | None = None,
    ) -> float:
        """Sum of ``(r - mean)^T cov^-1 (r - mean)`` over factors.

        ``weights`` scales each factor's term; ``indices`` restricts the sum.
        """
        e = self.factor_errors(x)
        if weights is not None:
            e = e * np.asarray(weights, dtype=float)
        if indices is not None:
            e = e[np.asarray(indices, dtype=int)]
        return float(e.sum())

    # -- copying / hashing --------------------------------------------
    def copy(self) -> "FactorGraph":
        """Independent copy. Residual callables are shared; they must be pure."""
        g = FactorGraph()
        g._offsets = dict(self._offsets)
        g._order = list(self._order)
        g._x = self._x.copy()
        g.factors = [
            Factor(f.keys, f.residual_fn, f.noise, f.tag, f.group_id, f.jacobian_fn, dict(f.meta),
                   f.batch, dict(f.params))
            for f in self.factors
        ]
        for new, old in zip(g.factors, self.factors):
            new._slices = getattr(old, "_slices", None)
        g._layout = self._layout
        return g

    def digest(self) -> str:
        """SHA-256 over blocks, values, and the serializable part of every factor."""
        h = hashlib.sha256()
        for k in self._order:
            h.update(str(k).encode())
        h.update(self._x.tobytes())
        for f in self.factors:
            h.update(
                json.dumps(
                    {
                        "keys": [str(k) for k in f.keys],
                        "tag": f.tag.value,
                        "group": repr(f.group_id),
                        "meta": f.meta,
                        "batch": None if f.batch is None else f.batch.name,
                        "params": {k: np.asarray(v).tolist() for k, v in f.params.items()},
                        "noise": f.noise.to_dict(),
                    },
                    sort_keys=True,
                    default=str,
                ).encode()
            )
        return h.hexdigest()

    def group_members(self) -> dict[Hashable, list[int]]:
        """Factor indices per ``group_id`` in insertion order; ungrouped factors excluded."""
        groups: dict[Hashable, list[int]] = {}
        for i, f in enumerate(self.factors):
            if f.group_id is not None:
                groups.setdefault(f.group_id, []).append(i)
        return groups

    def __len__(self) -> int:
        return len(self.factors)
