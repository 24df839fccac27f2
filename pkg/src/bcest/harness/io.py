"""Observation and truth CSV files."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from ..gnss_sim import EpochObservation, SatelliteState, Scenario, TruthTrajectory

OBS_COLUMNS = ("epoch_s", "sat_id", "sat_x_m", "sat_y_m", "sat_z_m", "sat_clock_m",
               "elevation_rad", "cn0_dbhz", "pseudorange_m", "carrier_phase_m", "contaminated")
OBS_OPTIONAL = ("contaminated",)
TRUTH_COLUMNS = ("epoch_s", "x_m", "y_m", "z_m", "clock_m", "tropo_wet_m")
DEFAULT_ZENITH_DRY = 2.3


class FormatError(ValueError):
    pass


def _fmt(v: float) -> str:
    return repr(float(v))


def write_observations(scenario: Scenario, path) -> Path:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(OBS_COLUMNS)
        for o in scenario.observations:
            s = o.sat
            flag = "" if o.contaminated is None else str(int(o.contaminated))
            w.writerow([_fmt(o.epoch), s.sat_id, *map(_fmt, s.position), _fmt(s.clock_bias),
                        _fmt(s.elevation), _fmt(s.cn0_dbhz), _fmt(o.pseudorange),
                        _fmt(o.carrier_phase), flag])
    return path


def write_truth(truth: TruthTrajectory, path) -> Path:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(TRUTH_COLUMNS)
        for k in range(len(truth)):
            w.writerow([_fmt(truth.epochs[k]), *map(_fmt, truth.positions[k]),
                        _fmt(truth.clock[k]), _fmt(truth.tropo_wet[k])])
    return path


def _read_rows(path, required):
    """Yield ``(line_number, row_dict)`` after checking the header."""
    path = Path(path)
    if not path.is_file():
        raise FormatError(f"{path}: no such file")
    fh = path.open(newline="", encoding="utf-8")
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise FormatError(f"{path}: no epochs")
        header = [h.strip() for h in header]
        missing = [c for c in required if c not in header]
        if missing:
            raise FormatError(f"{path}: missing column {', '.join(missing)}")
        for row in reader:
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise FormatError(f"{path}, line {reader.line_num}: expected {len(header)} fields, "
                                  f"got {len(row)}")
            yield reader.line_num, dict(zip(header, (c.strip() for c in row)))


def _float(row, col, path, line):
    try:
        v = float(row[col])
    except ValueError:
        raise FormatError(f"{path}, line {line}: bad value {row[col]!r} in column {col}") from None
    if not np.isfinite(v):
        raise FormatError(f"{path}, line {line}: non-finite value in column {col}")
    return v


def load_observations(path, zenith_dry: float = DEFAULT_ZENITH_DRY) -> Scenario:
    """Observation CSV as a truth-less scenario; rows are grouped by epoch on use.

    A missing or blank ``contaminated`` field loads as unknown (``None``).
    """
    required = [c for c in OBS_COLUMNS if c not in OBS_OPTIONAL]
    obs = []
    for line, row in _read_rows(path, required):
        f = {c: _float(row, c, path, line) for c in required if c != "sat_id"}
        sat_id = row["sat_id"]
        if not sat_id:
            raise FormatError(f"{path}, line {line}: empty sat_id")
        flag = row.get("contaminated", "")
        if flag in ("", None):
            contaminated = None
        elif flag in ("0", "1"):
            contaminated = flag == "1"
        else:
            raise FormatError(f"{path}, line {line}: contaminated must be 0 or 1, got {flag!r}")
        if not f["elevation_rad"] > 0:
            raise FormatError(f"{path}, line {line}: elevation must be positive")
        sat = SatelliteState(sat_id, (f["sat_x_m"], f["sat_y_m"], f["sat_z_m"]), f["sat_clock_m"],
                             f["elevation_rad"], f["cn0_dbhz"])
        obs.append(EpochObservation(f["epoch_s"], sat, f["pseudorange_m"], f["carrier_phase_m"],
                                    contaminated))
    if not obs:
        raise FormatError(f"{path}: no epochs")
    return Scenario(None, obs, zenith_dry=zenith_dry)


def load_truth(path) -> TruthTrajectory:
    rows = [[_float(row, c, path, line) for c in TRUTH_COLUMNS]
            for line, row in _read_rows(path, TRUTH_COLUMNS)]
    if not rows:
        raise FormatError(f"{path}: no epochs")
    a = np.array(rows)
    order = np.argsort(a[:, 0], kind="stable")
    a = a[order]
    if np.any(np.diff(a[:, 0]) == 0):
        raise FormatError(f"{path}: duplicate truth epoch")
    return TruthTrajectory(a[:, 0], a[:, 1:4], a[:, 4], a[:, 5])


def load_scenario(obs_path, truth_path=None, zenith_dry: float = DEFAULT_ZENITH_DRY) -> Scenario:
    """Observations plus optional truth; truth epochs must match the observation epochs."""
    sc = load_observations(obs_path, zenith_dry)
    if truth_path is not None:
        truth = load_truth(truth_path)
        ep = sc.epochs
        if ep.shape != truth.epochs.shape or not np.allclose(ep, truth.epochs, rtol=0, atol=1e-9):
            raise FormatError(f"truth epochs ({len(truth)}) do not match observation epochs ({len(ep)})")
        sc.truth = truth
    return sc
