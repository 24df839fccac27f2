"""Horizontal positioning error statistics."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from ..gnss_sim import enu_rotation


@dataclass
class StatsSummary:
    median: float
    variance: float
    max: float
    per_epoch_errors: list[float] = field(default_factory=list)

    def to_dict(self, with_epochs: bool = False) -> dict:
        d = asdict(self)
        if not with_epochs:
            d.pop("per_epoch_errors")
        return d


def horizontal_errors(estimated, truth) -> np.ndarray:
    """Per-epoch east/north error norm in an ENU frame at the truth centroid."""
    est = np.asarray(estimated, dtype=float)
    tru = np.asarray(truth, dtype=float)
    if est.ndim != 2 or est.shape[1] != 3 or est.shape != tru.shape:
        raise ValueError(f"position arrays must both be (n, 3); got {est.shape} and {tru.shape}")
    if est.shape[0] == 0:
        raise ValueError("no epochs")
    rot = enu_rotation(tru.mean(axis=0))
    enu = (est - tru) @ rot.T
    return np.hypot(enu[:, 0], enu[:, 1])


def summarize(errors) -> StatsSummary:
    e = np.asarray(errors, dtype=float)
    return StatsSummary(float(np.median(e)), float(np.var(e)), float(np.max(e)), e.tolist())


def rsos_horizontal_stats(estimated, truth) -> StatsSummary:
    """Median, variance (population) and max of the horizontal RSOS error."""
    return summarize(horizontal_errors(estimated, truth))
