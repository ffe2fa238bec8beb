"""
Synthetic inputs with known answers: trajectory scenes, kernel test pairs and
choice data drawn from a grouped mixed logit with chosen parameters.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd

from .kernel import KinematicState
from .mixed_logit.model import CONSTANT, ChoiceDataset, Layout, ModelSpec, probabilities_from_utilities
from .oracle import swept_sat_ttc
from .trajectory import VehicleTrack, ZoneMap, write_trajectories


# ---------------------------------------------------------------------------
# trajectory scenes


@dataclass
class VehicleSpec:
    """Initial pose plus optional per-frame speed and heading profiles."""

    vehicle_id: str
    x: float
    y: float
    heading: float
    speed: float
    length: float = 4.5
    width: float = 1.8
    vehicle_class: str = "PrivateCar"
    payment: str = "Manual"
    first_frame: int = 0
    n_frames: Optional[int] = None
    speed_profile: Optional[list] = None
    heading_profile: Optional[list] = None


@dataclass
class SceneSpec:
    vehicles: list = field(default_factory=list)
    n_frames: int = 300
    fps: int = 30

    def __post_init__(self):
        self.vehicles = [v if isinstance(v, VehicleSpec) else VehicleSpec(**v) for v in self.vehicles]
        ids = [v.vehicle_id for v in self.vehicles]
        if len(set(ids)) != len(ids):
            raise ValueError("vehicle ids must be unique")
        if self.fps <= 0 or self.n_frames < 0:
            raise ValueError("need fps > 0 and n_frames >= 0")

    @classmethod
    def load(cls, path) -> "SceneSpec":
        doc = json.loads(Path(path).read_text())
        return cls(**doc)


def vehicle_track(v: VehicleSpec, n_frames: int, fps: int) -> VehicleTrack:
    """Integrate the profiles so that backward differences return them exactly.

    Position at frame ``k`` is position at ``k - 1`` plus ``speed[k] * dt``
    along ``heading[k]``.
    """
    n = v.n_frames if v.n_frames is not None else n_frames
    speed = np.full(n, float(v.speed)) if v.speed_profile is None else np.asarray(v.speed_profile, dtype=float)[:n]
    heading = (np.full(n, float(v.heading)) if v.heading_profile is None
               else np.asarray(v.heading_profile, dtype=float)[:n])
    if len(speed) != n or len(heading) != n:
        raise ValueError(f"profiles of {v.vehicle_id} are shorter than {n} frames")
    dt = 1.0 / fps
    rad = np.radians(heading)
    dx = speed * dt * np.cos(rad)
    dy = speed * dt * np.sin(rad)
    dx[0] = dy[0] = 0.0
    return VehicleTrack(
        vehicle_id=str(v.vehicle_id),
        vehicle_class=v.vehicle_class,
        payment=v.payment,
        frames=np.arange(v.first_frame, v.first_frame + n),
        x=v.x + np.cumsum(dx),
        y=v.y + np.cumsum(dy),
        length=np.full(n, float(v.length)),
        width=np.full(n, float(v.width)),
        heading=heading % 360.0,
    )


def scene_tracks(spec: SceneSpec) -> list[VehicleTrack]:
    return [vehicle_track(v, spec.n_frames, spec.fps) for v in spec.vehicles]


def generate_scene(spec: SceneSpec, path) -> list[VehicleTrack]:
    """Write the scene in the trajectory input format; no vehicles gives an empty file."""
    tracks = scene_tracks(spec)
    if not tracks:
        Path(path).write_text("")
        return tracks
    write_trajectories(tracks, path)
    return tracks


def crossing_scene(angle: float = 8.0, collide_at: float = 4.0, speeds=(12.0, 15.0), n_frames: int = 180,
                   fps: int = 30, lateral: float = 3.0) -> SceneSpec:
    """Two vehicles on converging straight paths that first touch at ``collide_at`` seconds.

    The pair is built at an arbitrary converging placement, its exact
    contact time found with the swept separating-axis test, and both
    vehicles are then slid back along their paths by the same amount.
    """
    a = KinematicState(0.0, 0.0, 0.0, speeds[0], 4.5, 1.8, "1")
    b = KinematicState(0.0, lateral, -abs(angle), speeds[1], 4.5, 1.8, "2")
    t0 = swept_sat_ttc(a, b)
    if not math.isfinite(t0):
        raise ValueError("placement does not converge")
    shift = collide_at - t0
    pa, pb = (s.moved(*(-shift * s.speed * s.direction)) for s in (a, b))
    return SceneSpec(
        vehicles=[
            VehicleSpec("1", pa.x, pa.y, pa.heading, pa.speed, payment="Manual"),
            VehicleSpec("2", pb.x, pb.y, pb.heading, pb.speed, payment="Electronic"),
        ],
        n_frames=n_frames,
        fps=fps,
    )


def covering_zones(tracks: list[VehicleTrack], margin: float = 50.0, name: str = "Zone 3") -> ZoneMap:
    """A single zone equal to the study area, a box around every track."""
    xs = np.concatenate([t.x for t in tracks])
    ys = np.concatenate([t.y for t in tracks])
    x0, x1 = xs.min() - margin, xs.max() + margin
    y0, y1 = ys.min() - margin, ys.max() + margin
    box = np.array([[x0, y0], [x1, y0], [x1, y1], [x0, y1]])
    return ZoneMap(zones=[(name, box)], study_area=box)


# ---------------------------------------------------------------------------
# kernel test pairs


@dataclass(frozen=True)
class PairSampler:
    """Random near-parallel vehicle pairs around the origin."""

    angle: tuple = (1.0, 9.0)
    longitudinal: tuple = (-30.0, 30.0)
    lateral: tuple = (-8.0, 8.0)
    length: tuple = (3.5, 12.0)
    width: tuple = (1.6, 2.6)
    speed: tuple = (1.0, 25.0)

    def sample(self, rng: np.random.Generator) -> tuple[KinematicState, KinematicState]:
        h1 = rng.uniform(0.0, 360.0)
        a = rng.uniform(*self.angle) * rng.choice([-1.0, 1.0])
        l1, l2 = rng.uniform(*self.length, 2)
        w1, w2 = rng.uniform(*self.width, 2)
        v1, v2 = rng.uniform(*self.speed, 2)
        s1 = KinematicState(0.0, 0.0, h1, v1, l1, w1, "1")
        c = rng.uniform(*self.longitudinal) * s1.direction + rng.uniform(*self.lateral) * s1.left_normal
        s2 = KinematicState(float(c[0]), float(c[1]), h1 + a, v2, l2, w2, "2")
        return s1, s2


# ---------------------------------------------------------------------------
# choice data


@dataclass
class SimulationTruth:
    """Known parameters and covariate distributions for synthetic choices.

    ``coefficients`` is keyed like estimation output: ``"alt:var"`` for
    fixed terms and random means, ``"alt:var|z"`` for heterogeneity
    loadings. ``covariates`` maps a column to ``("normal", mean, sd)``,
    ``("uniform", lo, hi)`` or ``("bernoulli", p)``; columns listed in
    ``group_level`` are drawn once per group.
    """

    spec: ModelSpec
    coefficients: dict
    gamma: np.ndarray
    n_groups: int
    obs_per_group: int
    covariates: dict
    group_level: tuple = ()
    seed: int = 0

    def __post_init__(self):
        k = self.spec.n_random
        self.gamma = np.asarray(self.gamma, dtype=float).reshape(k, k)
        if np.triu(self.gamma, 1).any():
            raise ValueError("Cholesky factor must be lower triangular")
        names = set(Layout(self.spec).names)
        extra = set(self.coefficients) - names
        if extra:
            raise ValueError(f"coefficients not in the model: {sorted(extra)}")


@dataclass
class SimulatedChoices:
    dataset: ChoiceDataset
    group_coefficients: np.ndarray  # (G, K): mean + Gamma omega_g
    obs_coefficients: np.ndarray  # (N, K): including heterogeneity shifts
    omega: np.ndarray  # (G, K)


def _draw_column(rng, dist, n):
    kind = dist[0]
    if kind == "normal":
        return rng.normal(dist[1], dist[2], n)
    if kind == "uniform":
        return rng.uniform(dist[1], dist[2], n)
    if kind == "bernoulli":
        return (rng.random(n) < dist[1]).astype(float)
    raise ValueError(f"unknown distribution {kind!r}")


def simulate_choices(truth: SimulationTruth) -> SimulatedChoices:
    """Sample outcomes group by group with one coefficient draw per group."""
    spec = truth.spec
    rng = np.random.default_rng(truth.seed)
    g, m = truth.n_groups, truth.obs_per_group
    n = g * m
    cols = {}
    for name in sorted(truth.covariates):
        if name in truth.group_level:
            cols[name] = np.repeat(_draw_column(rng, truth.covariates[name], g), m)
        else:
            cols[name] = _draw_column(rng, truth.covariates[name], n)
    frame = pd.DataFrame(cols)
    frame.insert(0, "group_id", np.repeat([f"g{i:05d}" for i in range(g)], m))

    def col(v):
        return np.ones(n) if v == CONSTANT else frame[v].to_numpy(dtype=float)

    alts = spec.alternatives
    coef = truth.coefficients
    v = np.zeros((n, len(alts)))
    for j, alt in enumerate(alts[1:], start=1):
        for var in spec.fixed.get(alt, []):
            v[:, j] += coef.get(f"{alt}:{var}", 0.0) * col(var)
    k = spec.n_random
    omega = rng.standard_normal((g, k))
    means = np.array([0.0 if r.zero_mean else coef.get(r.name, 0.0) for r in spec.random])
    group_coef = means + omega @ truth.gamma.T
    obs_coef = np.repeat(group_coef, m, axis=0)
    for kk, r in enumerate(spec.random):
        for z in r.heterogeneity:
            obs_coef[:, kk] += coef.get(f"{r.name}|{z}", 0.0) * col(z)
        v[:, alts.index(r.alternative)] += obs_coef[:, kk] * col(r.variable)
    p = probabilities_from_utilities(v)
    u = rng.random(n)
    choice = (u[:, None] > np.cumsum(p, axis=1)).sum(axis=1)
    choice = np.minimum(choice, len(alts) - 1)
    frame["outcome"] = np.asarray(alts, dtype=object)[choice]
    return SimulatedChoices(ChoiceDataset(frame, alternatives=alts), group_coef, obs_coef, omega)
