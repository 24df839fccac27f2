"""Experiment configuration files.

A config is one JSON object whose sections mirror the dataclass field names::

    {"scenario": {...ScenarioConfig...}, "solver": {...SolverConfig...},
     "bce": {..., "vb": {...VBConfig...}}, "graph": {...GraphOptions...},
     "estimators": ["l2", "dcs", "maxmix", "bce"], "kernel_width": null,
     "scales": [0.01, 0.1, 1, 10, 100], "bench_repeats": 3}

Every section and field is optional.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..bce import BCEConfig
from ..gnss_sim import ScenarioConfig
from ..solver import SolverConfig
from .estimators import ESTIMATOR_NAMES
from .graph_build import GraphOptions

COMPARISON_ESTIMATORS = ("l2", "dcs", "maxmix", "bce")
DEFAULT_SCALES = (0.01, 0.1, 1.0, 10.0, 100.0)


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    solver: SolverConfig = field(default_factory=SolverConfig)
    bce: BCEConfig = field(default_factory=BCEConfig)
    graph: GraphOptions = field(default_factory=GraphOptions)
    estimators: list[str] = field(default_factory=lambda: list(COMPARISON_ESTIMATORS))
    kernel_width: float | None = None
    scales: list[float] = field(default_factory=lambda: list(DEFAULT_SCALES))
    bench_repeats: int = 3

    def __post_init__(self):
        bad = [e for e in self.estimators if e not in ESTIMATOR_NAMES]
        if bad or not self.estimators:
            raise ConfigError(f"unknown estimators {bad}; choose from {', '.join(ESTIMATOR_NAMES)}")
        if not self.scales or any(not s > 0 for s in self.scales):
            raise ConfigError("scales must be a non-empty list of positive numbers")
        if self.kernel_width is not None and not self.kernel_width > 0:
            raise ConfigError("kernel_width must be positive")
        if self.bench_repeats < 1:
            raise ConfigError("bench_repeats must be at least 1")

    @property
    def apriori_cov(self) -> np.ndarray:
        return np.diag([self.graph.sigma_range ** 2, self.graph.sigma_phase ** 2])

    def to_dict(self) -> dict:
        return json.loads(json.dumps(dataclasses.asdict(self), default=_jsonable))


def _jsonable(v):
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    raise TypeError(f"not serializable: {type(v).__name__}")


_SECTIONS = {"scenario": ScenarioConfig, "solver": SolverConfig, "bce": BCEConfig,
             "graph": GraphOptions}


def config_from_dict(doc: dict) -> ExperimentConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    known = {f.name for f in dataclasses.fields(ExperimentConfig)}
    unknown = sorted(set(doc) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    kwargs = {}
    try:
        for key, value in doc.items():
            if key in _SECTIONS:
                if not isinstance(value, dict):
                    raise ConfigError(f"section {key!r} must be an object")
                kwargs[key] = _SECTIONS[key](**value)
            else:
                kwargs[key] = value
        return ExperimentConfig(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid config: {exc}") from exc


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"{path}: no such file") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    return config_from_dict(doc)
