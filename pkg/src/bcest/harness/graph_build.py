"""Factor graphs for batch GNSS positioning from observation sets."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..factor_graph import (BatchModel, Factor, FactorGraph, FactorTag, GaussianNoise, GraphError,
                            StateBlockKey, StateKind)
from ..gnss_sim import EpochObservation, Scenario, elevation_mapping


@dataclass
class GraphOptions:
    sigma_range: float = 2.5
    sigma_phase: float = 0.025
    # random-walk position prior between consecutive epochs, m / sqrt(s)
    motion_prior_sigma: float | None = 10.0
    # prior on the first epoch position around the coarse solution, m; it is
    # the information the measurement weighting trades off against
    first_epoch_sigma: float = 1.0
    # multiplies the a-priori measurement covariances only
    covariance_scale: float = 1.0


def position_key(k: int) -> StateBlockKey:
    return StateBlockKey("rx", StateKind.POSITION3D, k)


def clock_key(k: int) -> StateBlockKey:
    return StateBlockKey("rx", StateKind.CLOCK_BIAS, k)


TROPO_KEY = StateBlockKey("zenith", StateKind.TROPO_WET, None)


def ambiguity_key(arc_id: str) -> StateBlockKey:
    return StateBlockKey(arc_id, StateKind.AMBIGUITY, None)


def coarse_position(obs: list[EpochObservation], zenith_dry: float, iterations: int = 10):
    """Pseudorange-only Gauss-Newton fix of (position, clock) for one epoch."""
    if len(obs) < 4:
        raise GraphError(f"only {len(obs)} satellites at epoch {obs[0].epoch if obs else '?'}")
    sp = np.array([o.sat.position for o in obs])
    corr = np.array([o.sat.clock_bias - zenith_dry * elevation_mapping(o.sat.elevation) for o in obs])
    y = np.array([o.pseudorange for o in obs]) + corr
    x = np.zeros(4)
    for _ in range(iterations):
        d = x[:3] - sp
        rng = np.linalg.norm(d, axis=1)
        H = np.column_stack([d / rng[:, None], np.ones(len(obs))])
        dx, *_ = np.linalg.lstsq(H, y - (rng + x[3]), rcond=None)
        x += dx
        if np.linalg.norm(dx) < 1e-4:
            break
    if np.linalg.matrix_rank(H) < 4:
        raise GraphError(f"geometry deficient at epoch {obs[0].epoch}")
    return x[:3], x[3]


def _geometry(blocks, params):
    d = blocks[0] - params["sat_pos"]
    rng = np.sqrt((d * d).sum(1))
    return d, rng


def _pseudorange_residual(blocks, params):
    _, rng = _geometry(blocks, params)
    m = params["mapping"]
    model = rng + blocks[1][:, 0] + (blocks[2][:, 0] + params["zenith_dry"]) * m - params["sat_clock"]
    return (params["y"] - model)[:, None]


def _pseudorange_jacobian(blocks, params):
    d, rng = _geometry(blocks, params)
    n = d.shape[0]
    return [-(d / rng[:, None])[:, None, :], -np.ones((n, 1, 1)), -params["mapping"][:, None, None]]


def _phase_residual(blocks, params):
    return _pseudorange_residual(blocks, params) - blocks[3]


def _phase_jacobian(blocks, params):
    n = blocks[0].shape[0]
    return _pseudorange_jacobian(blocks, params) + [-np.ones((n, 1, 1))]


def _motion_residual(blocks, params):
    return blocks[0] - blocks[1]


def _motion_jacobian(blocks, params):
    n = blocks[0].shape[0]
    eye = np.broadcast_to(np.eye(3), (n, 3, 3))
    return [eye, -eye]


PSEUDORANGE_MODEL = BatchModel("pseudorange", _pseudorange_residual, _pseudorange_jacobian)
CARRIER_PHASE_MODEL = BatchModel("carrier_phase", _phase_residual, _phase_jacobian)
MOTION_MODEL = BatchModel("motion_prior", _motion_residual, _motion_jacobian)


def gnss_factor(y: float, sat, zenith_dry: float, pos_k, clk_k, noise, gid=None, amb_k=None) -> Factor:
    """Pseudorange factor, or carrier phase when ``amb_k`` is given; residual ``y - h(X)``."""
    params = {"y": float(y), "sat_pos": np.asarray(sat.position, dtype=float),
              "sat_clock": float(sat.clock_bias), "mapping": elevation_mapping(sat.elevation),
              "zenith_dry": float(zenith_dry)}
    meta = {"sat": sat.sat_id}
    if amb_k is None:
        return Factor((pos_k, clk_k, TROPO_KEY), None, noise, FactorTag.PSEUDORANGE, gid,
                      meta=meta, batch=PSEUDORANGE_MODEL, params=params)
    return Factor((pos_k, clk_k, TROPO_KEY, amb_k), None, noise, FactorTag.CARRIER_PHASE, gid,
                  meta=meta, batch=CARRIER_PHASE_MODEL, params=params)


def _identity_prior(key, target, sigma):
    target = np.asarray(target, dtype=float)
    noise = GaussianNoise.isotropic(sigma, key.dim)
    eye = np.eye(key.dim)
    return Factor((key,), lambda v: target - v[0], noise, FactorTag.STATE_PRIOR, None,
                  lambda v: [-eye], {"target": target.tolist()})


def _motion_prior(k0, k1, sigma):
    return Factor((k0, k1), None, GaussianNoise.isotropic(sigma, 3), FactorTag.MOTION_PRIOR,
                  batch=MOTION_MODEL)


def satellite_arcs(scenario: Scenario) -> dict[tuple[int, str], str]:
    """Map (epoch index, sat id) to an arc id; a gap in tracking starts a new arc."""
    arcs: dict[tuple[int, str], str] = {}
    last_seen: dict[str, int] = {}
    arc_no: dict[str, int] = {}
    for k, (_, obs) in enumerate(scenario.by_epoch()):
        for o in obs:
            sid = o.sat_id
            if sid in last_seen and last_seen[sid] != k - 1:
                arc_no[sid] += 1
            arc_no.setdefault(sid, 0)
            last_seen[sid] = k
            arcs[(k, sid)] = sid if arc_no[sid] == 0 else f"{sid}#{arc_no[sid]}"
    return arcs


def build_graph(scenario: Scenario, options: GraphOptions | None = None) -> FactorGraph:
    """Batch GNSS graph: per-epoch position and clock, one static wet-tropo
    block, one ambiguity per satellite arc, one pseudorange and one carrier
    phase factor per (satellite, epoch) sharing a group id, random-walk
    motion priors and a first-epoch prior.

    Initial positions come from a per-epoch pseudorange-only fix; clocks,
    tropo and ambiguities start at zero.
    """
    opt = options or GraphOptions()
    s = opt.covariance_scale
    if not s > 0:
        raise GraphError("covariance scale must be positive")
    g = FactorGraph()
    epochs = scenario.by_epoch()
    if not epochs:
        raise GraphError("no epochs")
    arcs = satellite_arcs(scenario)
    g.add_state_block(TROPO_KEY, [0.0])
    range_noise = GaussianNoise.isotropic(opt.sigma_range * math.sqrt(s))
    phase_noise = GaussianNoise.isotropic(opt.sigma_phase * math.sqrt(s))
    first_pos = None
    for k, (t, obs) in enumerate(epochs):
        pos0, _ = coarse_position(obs, scenario.zenith_dry)
        if first_pos is None:
            first_pos = pos0
        g.add_state_block(position_key(k), pos0)
        g.add_state_block(clock_key(k), [0.0])
        for o in obs:
            amb = ambiguity_key(arcs[(k, o.sat_id)])
            if amb not in g:
                g.add_state_block(amb, [0.0])
            gid = (k, o.sat_id)
            g.add_factor(gnss_factor(o.pseudorange, o.sat, scenario.zenith_dry, position_key(k),
                                     clock_key(k), range_noise, gid))
            g.add_factor(gnss_factor(o.carrier_phase, o.sat, scenario.zenith_dry, position_key(k),
                                     clock_key(k), phase_noise, gid, amb))
        if k > 0 and opt.motion_prior_sigma:
            dt = t - epochs[k - 1][0]
            g.add_factor(_motion_prior(position_key(k - 1), position_key(k),
                                       opt.motion_prior_sigma * math.sqrt(max(dt, 1e-9))))
    g.add_factor(_identity_prior(position_key(0), first_pos, opt.first_epoch_sigma))
    return g


def estimated_positions(graph: FactorGraph, n_epochs: int) -> np.ndarray:
    return np.array([graph.value(position_key(k)) for k in range(n_epochs)])
