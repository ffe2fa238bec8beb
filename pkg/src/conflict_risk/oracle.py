"""
Brute-force collision referee for checking the conflict kernel.

Both footprints are advanced at constant velocity on a fixed time grid and
tested with the separating-axis theorem. Nothing here shares code with the
kernel's decision tree apart from corner construction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .kernel import KinematicState, corners


@dataclass(frozen=True)
class OracleConfig:
    dt: float = 0.001
    horizon: float = 30.0
    penetration_tol: float = 0.01
    chunk: int = 20000

    def __post_init__(self):
        if not self.dt > 0 or not self.horizon > self.dt:
            raise ValueError("need dt > 0 and horizon > dt")


def _axes(s1: KinematicState, s2: KinematicState) -> np.ndarray:
    return np.vstack([s1.direction, s1.left_normal, s2.direction, s2.left_normal])


def _velocity(s: KinematicState) -> np.ndarray:
    return s.direction * s.speed


def penetration_depth(s1: KinematicState, s2: KinematicState, t: np.ndarray | float) -> np.ndarray:
    """Minimum projected overlap over the four box axes at time(s) ``t``.

    Positive values mean the footprints overlap by that many meters along
    the least-overlapping axis; zero or negative means separated.
    """
    t = np.atleast_1d(np.asarray(t, dtype=float))
    axes = _axes(s1, s2)
    p1 = corners(s1).as_array() @ axes.T  # (4 corners, 4 axes)
    p2 = corners(s2).as_array() @ axes.T
    v = (_velocity(s1) - _velocity(s2)) @ axes.T  # (4 axes,)
    shift = t[:, None] * v[None, :]
    lo1, hi1 = p1.min(axis=0) + shift, p1.max(axis=0) + shift
    lo2, hi2 = p2.min(axis=0), p2.max(axis=0)
    overlap = np.minimum(hi1, hi2) - np.maximum(lo1, lo2)
    return overlap.min(axis=1)


def oracle_ttc(s1: KinematicState, s2: KinematicState, config: OracleConfig = OracleConfig()) -> float:
    """First grid time at which the two footprints overlap, else ``inf``."""
    n = int(math.floor(config.horizon / config.dt)) + 1
    for start in range(0, n, config.chunk):
        steps = np.arange(start, min(n, start + config.chunk))
        depth = penetration_depth(s1, s2, steps * config.dt)
        hit = np.flatnonzero(depth > 0)
        if hit.size:
            return float(steps[hit[0]] * config.dt)
    return math.inf


def max_penetration(s1: KinematicState, s2: KinematicState, t0: float, window: float = 0.05, dt: float = 0.0005) -> float:
    """Deepest overlap reached in ``[t0, t0 + window]``."""
    t = t0 + np.arange(0.0, window + dt / 2, dt)
    return float(penetration_depth(s1, s2, t).max())


def swept_sat_ttc(s1: KinematicState, s2: KinematicState) -> float:
    """Exact first-contact time for two boxes in uniform linear motion.

    On each separating axis the projections overlap during a time interval
    that is linear in the relative speed; the boxes overlap when all four
    intervals do. Returns ``inf`` when the common interval lies in the past
    or is empty, and ``0.0`` when they overlap now.
    """
    axes = _axes(s1, s2)
    p1 = corners(s1).as_array() @ axes.T
    p2 = corners(s2).as_array() @ axes.T
    v = (_velocity(s1) - _velocity(s2)) @ axes.T
    enter, leave = -math.inf, math.inf
    for k in range(4):
        lo = p2[:, k].min() - p1[:, k].max()  # need shift > lo
        hi = p2[:, k].max() - p1[:, k].min()  # need shift < hi
        if abs(v[k]) < 1e-15:
            if not (lo < 0 < hi):
                return math.inf
            continue
        a, b = lo / v[k], hi / v[k]
        if a > b:
            a, b = b, a
        enter, leave = max(enter, a), min(leave, b)
    if enter >= leave or leave <= 0:
        return math.inf
    return max(enter, 0.0)
