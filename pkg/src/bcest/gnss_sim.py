"""Synthetic GPS L1 scenarios: geometry, observation models, tracking-loop noise.

Ionosphere, relativistic, DCB, phase-center and wind-up terms are zero on
both the generating and the modeling side. The tropospheric mapping is
``1 / sin(el)``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

SPEED_OF_LIGHT = 299_792_458.0
L1_FREQ_HZ = 1575.42e6
L1_WAVELENGTH = SPEED_OF_LIGHT / L1_FREQ_HZ
CA_CHIP_RATE = 1.023e6
GPS_ORBIT_RADIUS = 26_560e3
GPS_ORBIT_PERIOD = 43_082.0

WGS84_A = 6_378_137.0
WGS84_F = 1 / 298.257223563
WGS84_E2 = WGS84_F * (2 - WGS84_F)


class ScenarioError(ValueError):
    pass


# ---------------------------------------------------------------------------
# tracking-loop thermal noise


@dataclass(frozen=True)
class TrackingConfig:
    """Software-receiver tracking parameters.

    fs_mhz is informational only; D_EL is in chips, bandwidths in Hz.
    """

    fs_mhz: float = 16.368
    d_el: float = 0.2
    b_rho: float = 1.0
    b_phi: float = 25.0
    b_fe: float = 9.66e6
    chip_rate: float = CA_CHIP_RATE
    T: float = 0.02

    def __post_init__(self):
        for name in ("fs_mhz", "d_el", "b_rho", "b_phi", "b_fe", "chip_rate", "T"):
            if not getattr(self, name) > 0:
                raise ScenarioError(f"tracking parameter {name} must be positive")
        if self.d_el > 1:
            raise ScenarioError("D_EL must lie in (0, 1] chips")

    @property
    def chip_length_m(self) -> float:
        return SPEED_OF_LIGHT / self.chip_rate


LOW_GRADE = TrackingConfig(fs_mhz=4.092, d_el=0.5, b_rho=2.0, b_phi=50.0)
HIGH_GRADE = TrackingConfig(fs_mhz=16.368, d_el=0.2, b_rho=1.0, b_phi=25.0)


def cn0_linear(cn0_dbhz: float) -> float:
    return 10.0 ** (cn0_dbhz / 10.0)


def pll_sigma(cfg: TrackingConfig, cn0_dbhz: float) -> float:
    """PLL thermal-noise standard deviation in meters."""
    if not cn0_dbhz > 0:
        raise ScenarioError("C/N0 must be positive dB-Hz")
    cn0 = cn0_linear(cn0_dbhz)
    return L1_WAVELENGTH / (2 * math.pi) * math.sqrt(cfg.b_phi / cn0 * (1 + 1 / (2 * cfg.T * cn0)))


def dll_regime_bounds(cfg: TrackingConfig) -> tuple[float, float]:
    """Correlator-spacing limits ``(R/B_fe, pi R/B_fe)`` separating the DLL regimes."""
    r = cfg.chip_rate / cfg.b_fe
    return r, math.pi * r


def dll_regime(cfg: TrackingConfig) -> str:
    lo, hi = dll_regime_bounds(cfg)
    if cfg.d_el >= hi:
        return "wide"
    if cfg.d_el >= lo:
        return "mid"
    return "narrow"


def dll_sigma(cfg: TrackingConfig, cn0_dbhz: float) -> float:
    """DLL code-tracking jitter in chips for the regime selected by ``d_el``."""
    if not cn0_dbhz > 0:
        raise ScenarioError("C/N0 must be positive dB-Hz")
    cn0 = cn0_linear(cn0_dbhz)
    d, T = cfg.d_el, cfg.T
    bt = cfg.b_fe / cfg.chip_rate  # front-end bandwidth times chip period
    base = cfg.b_rho / (2 * cn0)
    regime = dll_regime(cfg)
    if regime == "wide":
        return math.sqrt(base * d * (1 + 2 / (T * cn0 * (2 - d))))
    if regime == "mid":
        spread = 1 / bt + bt / (math.pi - 1) * (d - 1 / bt) ** 2
        return math.sqrt(base * spread * (1 + 2 / (T * cn0 * (2 - d))))
    return math.sqrt(base * (1 / bt) * (1 + 1 / (T * cn0)))


def dll_sigma_m(cfg: TrackingConfig, cn0_dbhz: float) -> float:
    return dll_sigma(cfg, cn0_dbhz) * cfg.chip_length_m


# ---------------------------------------------------------------------------
# geometry


def geodetic_to_ecef(lat_deg: float, lon_deg: float, h: float) -> np.ndarray:
    lat, lon = math.radians(lat_deg), math.radians(lon_deg)
    n = WGS84_A / math.sqrt(1 - WGS84_E2 * math.sin(lat) ** 2)
    return np.array([
        (n + h) * math.cos(lat) * math.cos(lon),
        (n + h) * math.cos(lat) * math.sin(lon),
        (n * (1 - WGS84_E2) + h) * math.sin(lat),
    ])


def ecef_to_geodetic(xyz) -> tuple[float, float, float]:
    x, y, z = map(float, xyz)
    lon = math.atan2(y, x)
    p = math.hypot(x, y)
    lat = math.atan2(z, p * (1 - WGS84_E2))
    for _ in range(8):
        n = WGS84_A / math.sqrt(1 - WGS84_E2 * math.sin(lat) ** 2)
        h = p / math.cos(lat) - n
        lat = math.atan2(z, p * (1 - WGS84_E2 * n / (n + h)))
    n = WGS84_A / math.sqrt(1 - WGS84_E2 * math.sin(lat) ** 2)
    h = p / math.cos(lat) - n
    return math.degrees(lat), math.degrees(lon), h


def enu_rotation(origin_ecef) -> np.ndarray:
    """Rows are the East, North, Up unit vectors at ``origin_ecef``."""
    lat, lon, _ = ecef_to_geodetic(origin_ecef)
    lat, lon = math.radians(lat), math.radians(lon)
    sl, cl, so, co = math.sin(lat), math.cos(lat), math.sin(lon), math.cos(lon)
    return np.array([
        [-so, co, 0.0],
        [-sl * co, -sl * so, cl],
        [cl * co, cl * so, sl],
    ])


def elevation_angle(receiver_ecef, sat_ecef) -> float:
    up = enu_rotation(receiver_ecef)[2]
    los = np.asarray(sat_ecef) - np.asarray(receiver_ecef)
    return math.asin(float(up @ los) / float(np.linalg.norm(los)))


def elevation_mapping(el: float) -> float:
    """Tropospheric mapping ``1 / sin(el)``."""
    if not el > 0:
        raise ScenarioError("elevation must be positive")
    return 1.0 / math.sin(el)


# ---------------------------------------------------------------------------
# observation models


@dataclass(frozen=True)
class SatelliteState:
    sat_id: str
    position: tuple[float, float, float]
    clock_bias: float
    elevation: float
    cn0_dbhz: float = 45.0

    @property
    def pos(self) -> np.ndarray:
        return np.asarray(self.position, dtype=float)


def geometric_range(sat: SatelliteState, receiver) -> float:
    d = sat.pos - np.asarray(receiver, dtype=float)
    return math.sqrt(float(d @ d))


def model_pseudorange(sat: SatelliteState, receiver, clock: float, tropo_wet: float,
                      zenith_dry: float) -> float:
    """Modeled L1 pseudorange in meters; clocks are carried in meters."""
    return (geometric_range(sat, receiver) + (clock - sat.clock_bias)
            + (zenith_dry + tropo_wet) * elevation_mapping(sat.elevation))


def model_carrier_phase(sat: SatelliteState, receiver, clock: float, tropo_wet: float,
                        zenith_dry: float, ambiguity: float) -> float:
    """Modeled L1 carrier phase in meters: the pseudorange model plus the ambiguity."""
    return model_pseudorange(sat, receiver, clock, tropo_wet, zenith_dry) + ambiguity


def model_jacobian(sat: SatelliteState, receiver) -> tuple[np.ndarray, float, float]:
    """Partials of the modeled range w.r.t. (position, clock, tropo_wet)."""
    d = np.asarray(receiver, dtype=float) - sat.pos
    return d / math.sqrt(float(d @ d)), 1.0, elevation_mapping(sat.elevation)


# ---------------------------------------------------------------------------
# scenario generation


@dataclass(frozen=True)
class EpochObservation:
    epoch: float
    sat: SatelliteState
    pseudorange: float
    carrier_phase: float
    contaminated: bool | None = None

    @property
    def sat_id(self) -> str:
        return self.sat.sat_id


@dataclass
class ContaminationConfig:
    probability: float = 0.0
    range_bias_mean: float = 10.0
    range_bias_sigma: float = 1.0
    phase_bias_mean: float = 0.0
    phase_bias_sigma: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.probability <= 1.0:
            raise ScenarioError("contamination probability must lie in [0, 1]")
        if self.range_bias_sigma < 0 or self.phase_bias_sigma < 0:
            raise ScenarioError("bias sigmas must be non-negative")


@dataclass
class ConstellationConfig:
    n_satellites: int = 9
    elevation_mask_deg: float = 10.0
    min_elevation_deg: float = 15.0
    max_elevation_deg: float = 85.0
    cn0_dbhz: float | list[float] = 45.0


@dataclass
class ScenarioConfig:
    duration_s: float = 600.0
    interval_s: float = 1.0
    origin_lat_deg: float = 39.63
    origin_lon_deg: float = -79.95
    origin_height_m: float = 300.0
    # local East/North/Up waypoints (m) traversed at constant speed
    waypoints_enu: list[list[float]] = field(
        default_factory=lambda: [[0, 0, 0], [400, 0, 0], [400, 300, 5], [0, 300, 5], [0, 0, 0]]
    )
    constellation: ConstellationConfig = field(default_factory=ConstellationConfig)
    tracking: TrackingConfig = field(default_factory=lambda: LOW_GRADE)
    sigma_range: float = 2.5
    sigma_phase: float = 0.025
    contamination: ContaminationConfig = field(default_factory=ContaminationConfig)
    zenith_dry: float = 2.3
    tropo_wet: float = 0.12
    clock_offset_m: float = 30.0
    clock_drift_mps: float = 0.2
    clock_random_walk: float = 0.05
    rng_seed: int = 0

    def __post_init__(self):
        if not self.interval_s > 0 or not self.duration_s >= 0:
            raise ScenarioError("interval must be positive and duration non-negative")
        if isinstance(self.constellation, dict):
            self.constellation = ConstellationConfig(**self.constellation)
        if isinstance(self.tracking, dict):
            self.tracking = TrackingConfig(**self.tracking)
        if isinstance(self.contamination, dict):
            self.contamination = ContaminationConfig(**self.contamination)
        if len(self.waypoints_enu) < 1:
            raise ScenarioError("need at least one waypoint")

    @property
    def origin_ecef(self) -> np.ndarray:
        return geodetic_to_ecef(self.origin_lat_deg, self.origin_lon_deg, self.origin_height_m)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "ScenarioConfig":
        return cls(**doc)

    def generating_sigmas(self, cn0_dbhz: float) -> tuple[float, float]:
        """Nominal (range, phase) noise sigmas used when generating observations."""
        return (max(self.sigma_range, dll_sigma_m(self.tracking, cn0_dbhz)),
                max(self.sigma_phase, pll_sigma(self.tracking, cn0_dbhz)))


@dataclass
class TruthTrajectory:
    epochs: np.ndarray
    positions: np.ndarray  # (n, 3) ECEF
    clock: np.ndarray
    tropo_wet: np.ndarray

    def __len__(self) -> int:
        return self.epochs.shape[0]


@dataclass
class Scenario:
    truth: TruthTrajectory | None
    observations: list[EpochObservation]
    satellites: list[list[SatelliteState]] = field(default_factory=list)
    zenith_dry: float = 2.3
    config: ScenarioConfig | None = None

    @property
    def epochs(self) -> np.ndarray:
        return np.array(sorted({o.epoch for o in self.observations}))

    def by_epoch(self) -> list[tuple[float, list[EpochObservation]]]:
        groups: dict[float, list[EpochObservation]] = {}
        for o in self.observations:
            groups.setdefault(o.epoch, []).append(o)
        return [(t, groups[t]) for t in sorted(groups)]


def interpolate_waypoints(waypoints: Sequence[Sequence[float]], n: int) -> np.ndarray:
    """``n`` points spaced uniformly by arc length along the waypoint polyline."""
    wp = np.asarray(waypoints, dtype=float)
    if wp.shape[0] == 1 or n == 1:
        return np.repeat(wp[:1], n, axis=0)
    seg = np.linalg.norm(np.diff(wp, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    if s[-1] == 0:
        return np.repeat(wp[:1], n, axis=0)
    q = np.linspace(0.0, s[-1], n)
    return np.column_stack([np.interp(q, s, wp[:, i]) for i in range(3)])


def _satellite_orbits(cfg: ScenarioConfig, rng: np.random.Generator):
    """Circular orbits passing overhead-ish at t=0, one per satellite."""
    cons = cfg.constellation
    origin = cfg.origin_ecef
    rot = enu_rotation(origin)
    n = cons.n_satellites
    az = (np.arange(n) / n) * 2 * math.pi + rng.uniform(0, 2 * math.pi / n, n)
    el = np.radians(rng.uniform(cons.min_elevation_deg, cons.max_elevation_deg, n))
    orbits = []
    for a, e in zip(az, el):
        los_enu = np.array([math.cos(e) * math.sin(a), math.cos(e) * math.cos(a), math.sin(e)])
        los = rot.T @ los_enu
        # range along los reaching the orbit sphere
        b = float(origin @ los)
        c = float(origin @ origin) - GPS_ORBIT_RADIUS**2
        rho = -b + math.sqrt(b * b - c)
        p0 = origin + rho * los
        p_hat = p0 / np.linalg.norm(p0)
        tmp = rng.normal(size=3)
        q_hat = tmp - (tmp @ p_hat) * p_hat
        q_hat /= np.linalg.norm(q_hat)
        orbits.append((p_hat, q_hat))
    return orbits


def _sat_position(orbit, t: float) -> np.ndarray:
    p_hat, q_hat = orbit
    w = 2 * math.pi / GPS_ORBIT_PERIOD
    return GPS_ORBIT_RADIUS * (math.cos(w * t) * p_hat + math.sin(w * t) * q_hat)


def generate_scenario(cfg: ScenarioConfig) -> Scenario:
    """Truth trajectory plus contaminated pseudorange/carrier-phase observations.

    Fully determined by ``cfg`` (including ``rng_seed``).
    """
    rng = np.random.default_rng(cfg.rng_seed)
    n_ep = int(math.floor(cfg.duration_s / cfg.interval_s + 1e-9)) + 1
    epochs = np.arange(n_ep) * cfg.interval_s
    origin = cfg.origin_ecef
    rot = enu_rotation(origin)
    enu = interpolate_waypoints(cfg.waypoints_enu, n_ep)
    positions = origin + enu @ rot
    clock = (cfg.clock_offset_m + cfg.clock_drift_mps * epochs
             + np.concatenate([[0.0], np.cumsum(rng.normal(0, cfg.clock_random_walk, n_ep - 1)
                                                * math.sqrt(cfg.interval_s))]))
    tropo = np.full(n_ep, cfg.tropo_wet)
    truth = TruthTrajectory(epochs, positions, clock, tropo)

    cons = cfg.constellation
    orbits = _satellite_orbits(cfg, rng)
    n_sat = len(orbits)
    sat_ids = [f"G{i + 1:02d}" for i in range(n_sat)]
    sat_clock = rng.uniform(-100.0, 100.0, n_sat)
    ambiguity = L1_WAVELENGTH * rng.integers(-200, 201, n_sat)
    cn0 = (np.asarray(cons.cn0_dbhz, dtype=float) if isinstance(cons.cn0_dbhz, (list, tuple))
           else np.full(n_sat, float(cons.cn0_dbhz)))
    if cn0.shape != (n_sat,):
        raise ScenarioError("per-satellite cn0 list length must equal n_satellites")

    # all random draws up front, in a fixed layout
    unit_range = rng.standard_normal((n_ep, n_sat))
    unit_phase = rng.standard_normal((n_ep, n_sat))
    cont = cfg.contamination
    flags = rng.random((n_ep, n_sat)) < cont.probability
    bias_range = cont.range_bias_mean + cont.range_bias_sigma * rng.standard_normal((n_ep, n_sat))
    bias_phase = cont.phase_bias_mean + cont.phase_bias_sigma * rng.standard_normal((n_ep, n_sat))

    mask = math.radians(cons.elevation_mask_deg)
    observations: list[EpochObservation] = []
    satellites: list[list[SatelliteState]] = []
    for k, t in enumerate(epochs):
        visible = []
        for j in range(n_sat):
            sp = _sat_position(orbits[j], float(t))
            el = elevation_angle(positions[k], sp)
            if el <= mask:
                continue
            sat = SatelliteState(sat_ids[j], tuple(float(v) for v in sp), float(sat_clock[j]),
                                 float(el), float(cn0[j]))
            visible.append(sat)
            s_r, s_p = cfg.generating_sigmas(cn0[j])
            pr = model_pseudorange(sat, positions[k], clock[k], tropo[k], cfg.zenith_dry)
            cp = pr + ambiguity[j]
            pr += s_r * unit_range[k, j]
            cp += s_p * unit_phase[k, j]
            if flags[k, j]:
                pr += bias_range[k, j]
                cp += bias_phase[k, j]
            observations.append(EpochObservation(float(t), sat, float(pr), float(cp), bool(flags[k, j])))
        if len(visible) < 4:
            raise ScenarioError(f"only {len(visible)} satellites visible at epoch {t}")
        satellites.append(visible)
    return Scenario(truth, observations, satellites, cfg.zenith_dry, cfg)
