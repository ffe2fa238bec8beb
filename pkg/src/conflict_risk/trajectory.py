"""
Trajectory ingestion, kinematic features and interaction observations.

Input is one delimited row per (vehicle, frame). Output observations carry the
covariates used by the conflict models: payment mix, zone dummies, and for
leader and follower the one-second average speed, acceleration, angular speed
and vehicle class.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np
import pandas as pd

from .kernel import (
    ConflictSeverity,
    ConflictType,
    KernelConfig,
    KernelError,
    KinematicState,
    classify,
    modified_ttc,
)

log = logging.getLogger(__name__)

VEHICLE_CLASSES = ("PrivateCar", "Taxi", "GoodsVehicle", "Bus", "Motorcycle")
PAYMENTS = ("Manual", "Electronic")
OUTSIDE = "outside"

REQUIRED_FIELDS = ("frame", "vehicle_id", "x", "y", "length", "width", "vehicle_class", "payment")
OPTIONAL_FIELDS = ("heading",)

ROLE_FIELDS = ("avg_speed", "acceleration", "angular_speed") + tuple(
    f"class_{c}" for c in VEHICLE_CLASSES
)
OBS_COLUMNS = (
    ("group_id", "frame", "family", "outcome", "ttc", "zone", "leader_id", "follower_id",
     "electronic_involved", "zone1", "zone2")
    + tuple(f"leader_{f}" for f in ROLE_FIELDS)
    + tuple(f"follower_{f}" for f in ROLE_FIELDS)
)


class TrajectoryError(ValueError):
    pass


class SchemaMismatch(TrajectoryError):
    pass


class NonMonotoneFrames(TrajectoryError):
    pass


class TooShort(TrajectoryError):
    pass


class EmptyData(TrajectoryError):
    pass


@dataclass
class FormatConfig:
    """Column mapping from track fields to file headers."""

    delimiter: str = ","
    columns: dict = field(default_factory=dict)
    fps: int = 30

    def column(self, name: str) -> str:
        return self.columns.get(name, name)


@dataclass
class VehicleTrack:
    vehicle_id: str
    vehicle_class: str
    payment: str
    frames: np.ndarray
    x: np.ndarray
    y: np.ndarray
    length: np.ndarray
    width: np.ndarray
    heading: np.ndarray
    speed: Optional[np.ndarray] = None
    avg_speed_1s: Optional[np.ndarray] = None
    acceleration: Optional[np.ndarray] = None
    angular_speed: Optional[np.ndarray] = None
    angular_speed_signed: Optional[np.ndarray] = None

    def __len__(self):
        return len(self.frames)

    def index(self, frame: int) -> Optional[int]:
        i = int(np.searchsorted(self.frames, frame))
        if i < len(self.frames) and self.frames[i] == frame:
            return i
        return None

    def state(self, i: int) -> KinematicState:
        return KinematicState(
            x=float(self.x[i]),
            y=float(self.y[i]),
            heading=float(self.heading[i]),
            speed=float(self.speed[i]),
            length=float(self.length[i]),
            width=float(self.width[i]),
            vehicle_id=self.vehicle_id,
        )


def _natural_key(value: str):
    return [int(t) if t.isdigit() else t for t in re.split(r"(\d+)", str(value))]


def load_trajectories(path, fmt: FormatConfig = FormatConfig()) -> list[VehicleTrack]:
    """Read a trajectory file into tracks sorted by vehicle id.

    Rows that fail to parse are skipped with a warning naming their line.
    """
    path = Path(path)
    rows: dict[str, list] = {}
    meta: dict[str, tuple] = {}
    bad_lines = []
    with path.open(newline="") as fh:
        reader = csv.reader(fh, delimiter=fmt.delimiter)
        header = next(reader, None)
        if header is None:
            log.warning("%s is empty", path)
            return []
        header = [h.strip() for h in header]
        missing = [f for f in REQUIRED_FIELDS if fmt.column(f) not in header]
        if missing:
            raise SchemaMismatch(f"{path}: missing columns {missing}")
        idx = {f: header.index(fmt.column(f)) for f in REQUIRED_FIELDS}
        hcol = fmt.column("heading")
        head_idx = header.index(hcol) if hcol in header else None

        for lineno, rec in enumerate(reader, start=2):
            if not rec or all(not r.strip() for r in rec):
                continue
            try:
                vid = rec[idx["vehicle_id"]].strip()
                frame = int(rec[idx["frame"]])
                vals = [float(rec[idx[k]]) for k in ("x", "y", "length", "width")]
                heading = math.nan
                if head_idx is not None and rec[head_idx].strip():
                    heading = float(rec[head_idx])
                vclass = rec[idx["vehicle_class"]].strip()
                payment = rec[idx["payment"]].strip()
            except (ValueError, IndexError):
                bad_lines.append(lineno)
                continue
            if vclass not in VEHICLE_CLASSES or payment not in PAYMENTS:
                bad_lines.append(lineno)
                continue
            if vid in meta and meta[vid] != (vclass, payment):
                raise SchemaMismatch(f"{path}:{lineno}: class/payment changes for vehicle {vid}")
            meta[vid] = (vclass, payment)
            track_rows = rows.setdefault(vid, [])
            if track_rows and frame <= track_rows[-1][0]:
                raise NonMonotoneFrames(
                    f"{path}:{lineno}: frame {frame} of vehicle {vid} does not follow {track_rows[-1][0]}"
                )
            track_rows.append((frame, *vals, heading))

    if bad_lines:
        log.warning("%s: skipped malformed rows at lines %s", path, bad_lines)
    if not rows:
        log.warning("%s has no trajectory rows", path)

    tracks = []
    for vid in sorted(rows, key=_natural_key):
        arr = np.array(rows[vid], dtype=float)
        vclass, payment = meta[vid]
        tracks.append(
            VehicleTrack(
                vehicle_id=vid,
                vehicle_class=vclass,
                payment=payment,
                frames=arr[:, 0].astype(int),
                x=arr[:, 1],
                y=arr[:, 2],
                length=arr[:, 3],
                width=arr[:, 4],
                heading=arr[:, 5],
            )
        )
    return tracks


def write_trajectories(tracks: Iterable[VehicleTrack], path, fmt: FormatConfig = FormatConfig()) -> None:
    fields = REQUIRED_FIELDS + OPTIONAL_FIELDS
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, delimiter=fmt.delimiter, lineterminator="\n")
        w.writerow([fmt.column(f) for f in fields])
        for t in tracks:
            for i in range(len(t)):
                w.writerow([
                    int(t.frames[i]), t.vehicle_id, repr(float(t.x[i])), repr(float(t.y[i])),
                    repr(float(t.length[i])), repr(float(t.width[i])), t.vehicle_class, t.payment,
                    "" if math.isnan(t.heading[i]) else repr(float(t.heading[i])),
                ])


def _wrap180(deg: np.ndarray) -> np.ndarray:
    return (deg + 180.0) % 360.0 - 180.0


def derive_kinematics(track: VehicleTrack, fps: int = 30) -> VehicleTrack:
    """Fill speed, one-second average speed, acceleration and angular speed.

    Speed and angular speed are backward differences (the first frame copies
    the second). Acceleration is the central difference of speed. The
    one-second average at frame ``i`` is the mean speed of frames
    ``i - fps .. i - 1`` and is NaN for the first ``fps`` frames. Angular
    speed is stored as a magnitude; the signed series (clockwise positive)
    is kept alongside.
    """
    n = len(track)
    if n < 2:
        raise TooShort(f"vehicle {track.vehicle_id} has {n} frame(s)")
    dt = np.diff(track.frames) / fps
    dx, dy = np.diff(track.x), np.diff(track.y)
    step = np.hypot(dx, dy) / dt
    speed = np.concatenate([step[:1], step])

    heading = track.heading.copy()
    if np.isnan(heading).any():
        motion = np.degrees(np.arctan2(dy, dx))
        motion = np.concatenate([motion[:1], motion])
        heading = np.where(np.isnan(heading), motion, heading)
    heading = heading % 360.0

    t = track.frames / fps
    acceleration = np.gradient(speed, t)
    turn = -_wrap180(np.diff(heading)) / dt
    turn = np.concatenate([turn[:1], turn])

    csum = np.concatenate([[0.0], np.cumsum(speed)])
    avg = np.full(n, np.nan)
    if n > fps:
        i = np.arange(fps, n)
        avg[fps:] = (csum[i] - csum[i - fps]) / fps

    track.heading = heading
    track.speed = speed
    track.avg_speed_1s = avg
    track.acceleration = acceleration
    track.angular_speed_signed = turn
    track.angular_speed = np.abs(turn)
    return track


def pair_candidates(tracks: list[VehicleTrack], frame: int, gating_radius: float = 50.0) -> list:
    """Pairs of tracks present at ``frame`` whose centroids are within the radius.

    Returns ``(track_i, i, track_j, j)`` tuples with ``i``/``j`` the row
    index of ``frame`` in each track.
    """
    if not gating_radius > 0:
        raise ValueError("gating radius must be positive")
    present = []
    for tr in tracks:
        i = tr.index(frame)
        if i is not None:
            present.append((tr, i))
    if len(present) < 2:
        return []
    pts = np.array([[tr.x[i], tr.y[i]] for tr, i in present])
    d = np.hypot(pts[:, None, 0] - pts[None, :, 0], pts[:, None, 1] - pts[None, :, 1])
    out = []
    for a in range(len(present)):
        for b in range(a + 1, len(present)):
            if d[a, b] <= gating_radius:
                out.append((*present[a], *present[b]))
    return out


# ---------------------------------------------------------------------------
# zones
# ---------------------------------------------------------------------------


@dataclass
class ZoneMap:
    zones: list  # [(name, (k, 2) array)] in priority order
    study_area: np.ndarray

    @classmethod
    def load(cls, path) -> "ZoneMap":
        with Path(path).open() as fh:
            doc = json.load(fh)
        return cls.from_dict(doc)

    @classmethod
    def from_dict(cls, doc: dict) -> "ZoneMap":
        zones = [(z["name"], np.asarray(z["polygon"], dtype=float)) for z in doc["zones"]]
        return cls(zones=zones, study_area=np.asarray(doc["study_area"], dtype=float))

    def to_dict(self) -> dict:
        return {
            "study_area": self.study_area.tolist(),
            "zones": [{"name": n, "polygon": p.tolist()} for n, p in self.zones],
        }


def _on_segment(p, a, b, tol=1e-9) -> bool:
    ab, ap = b - a, p - a
    cross = ab[0] * ap[1] - ab[1] * ap[0]
    if abs(cross) > tol * max(1.0, np.hypot(*ab)):
        return False
    dot = np.dot(ap, ab)
    return -tol <= dot <= np.dot(ab, ab) + tol


def point_in_polygon(point, polygon: np.ndarray) -> bool:
    """Even-odd test; points on the boundary count as inside."""
    p = np.asarray(point, dtype=float)
    inside = False
    n = len(polygon)
    for k in range(n):
        a, b = polygon[k], polygon[(k + 1) % n]
        if _on_segment(p, a, b):
            return True
        if (a[1] > p[1]) != (b[1] > p[1]):
            x = a[0] + (p[1] - a[1]) * (b[0] - a[0]) / (b[1] - a[1])
            if p[0] < x:
                inside = not inside
    return inside


def assign_zone(point, zones: ZoneMap) -> str:
    """Name of the first zone containing ``point``, else :data:`OUTSIDE`.

    Zones are checked in file order, so a point on a shared boundary goes to
    the lower-numbered zone. Points outside the study area, or inside it but
    in no zone, are :data:`OUTSIDE`.
    """
    if point is None or not np.all(np.isfinite(point)):
        return OUTSIDE
    if not point_in_polygon(point, zones.study_area):
        return OUTSIDE
    for name, poly in zones.zones:
        if point_in_polygon(point, poly):
            return name
    return OUTSIDE


# ---------------------------------------------------------------------------
# observations
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CongestionFilterConfig:
    window_seconds: float = 10.0
    speed_threshold: float = 3.0

    def __post_init__(self):
        if not self.speed_threshold > 0:
            raise ValueError("congestion speed threshold must be positive")


@dataclass(frozen=True)
class SamplingConfig:
    stride: int = 30
    gating_radius: float = 50.0
    zone_names: tuple = ("Zone 1", "Zone 2", "Zone 3")

    def __post_init__(self):
        if self.stride < 1:
            raise ValueError("stride must be at least 1")
        if len(self.zone_names) != 3:
            raise ValueError("zone_names must name the three approach zones, nearest the booths last")


def congested_frames(tracks: list[VehicleTrack], zones: ZoneMap, config: CongestionFilterConfig, fps: int = 30) -> set:
    """Frames whose trailing window has a low mean speed in the study area."""
    per_frame: dict[int, list] = {}
    for tr in tracks:
        for i, f in enumerate(tr.frames):
            if point_in_polygon((tr.x[i], tr.y[i]), zones.study_area):
                acc = per_frame.setdefault(int(f), [0.0, 0])
                acc[0] += tr.speed[i]
                acc[1] += 1
    if not per_frame:
        return set()
    lo, hi = min(per_frame), max(per_frame)
    sums = np.zeros(hi - lo + 1)
    counts = np.zeros(hi - lo + 1)
    for f, (s, c) in per_frame.items():
        sums[f - lo], counts[f - lo] = s, c
    w = max(1, int(round(config.window_seconds * fps)))
    cs = np.concatenate([[0.0], np.cumsum(sums)])
    cc = np.concatenate([[0.0], np.cumsum(counts)])
    idx = np.arange(len(sums))
    start = np.maximum(0, idx - w + 1)
    tot, num = cs[idx + 1] - cs[start], cc[idx + 1] - cc[start]
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = tot / num
    return {int(lo + k) for k in idx if num[k] > 0 and mean[k] < config.speed_threshold}


@dataclass
class InteractionObservation:
    group_id: str
    frame: int
    family: str
    outcome: str
    ttc: float
    zone: str
    leader_id: str
    follower_id: str
    covariates: dict

    def as_row(self) -> dict:
        row = {
            "group_id": self.group_id,
            "frame": self.frame,
            "family": self.family,
            "outcome": self.outcome,
            "ttc": self.ttc,
            "zone": self.zone,
            "leader_id": self.leader_id,
            "follower_id": self.follower_id,
        }
        row.update(self.covariates)
        return {c: row[c] for c in OBS_COLUMNS}


def _role_covariates(prefix: str, tr: VehicleTrack, i: int) -> dict:
    out = {
        f"{prefix}_avg_speed": float(tr.avg_speed_1s[i]),
        f"{prefix}_acceleration": float(tr.acceleration[i]),
        f"{prefix}_angular_speed": float(tr.angular_speed[i]),
    }
    for c in VEHICLE_CLASSES:
        out[f"{prefix}_class_{c}"] = int(tr.vehicle_class == c)
    return out


def group_id(a: str, b: str) -> str:
    lo, hi = sorted((a, b), key=_natural_key)
    return f"{lo}|{hi}"


def _evaluate(ta, ia, tb, ib, zones, kconf):
    """Kernel result and covariates for one pair at one frame, or None."""
    try:
        res = modified_ttc(ta.state(ia), tb.state(ib), kconf)
    except KernelError as exc:
        log.debug("pair %s/%s frame %s skipped: %s", ta.vehicle_id, tb.vehicle_id, ta.frames[ia], exc)
        return None
    ctype, sev = classify(res, kconf.thresholds)
    if ctype is None or ctype is ConflictType.UNSUPPORTED:
        return None
    where = res.region.centroid if res.region is not None else res.contact_point
    zone = assign_zone(where, zones)
    if zone == OUTSIDE:
        return None
    return res, ctype, sev, zone


def build_observations(
    tracks: list[VehicleTrack],
    zones: ZoneMap,
    kernel_config: KernelConfig = KernelConfig(),
    congestion: CongestionFilterConfig = CongestionFilterConfig(),
    sampling: SamplingConfig = SamplingConfig(),
    fps: int = 30,
) -> list[InteractionObservation]:
    """Label vehicle-pair interactions with conflict outcomes.

    Frames are grouped into windows of ``sampling.stride`` frames. For each
    pair within the gating radius, the kernel is evaluated on every frame of
    the window with instantaneous speeds, and the frame with the smallest
    predicted TTC becomes the observation. Pairs with no predicted contact in
    a window are not interactions and emit nothing. Covariates use the
    one-second average speed, never the instantaneous one.
    """
    if any(t.speed is None for t in tracks):
        raise ValueError("derive kinematics before building observations")
    if not tracks:
        return []
    jam = congested_frames(tracks, zones, congestion, fps)
    lo = min(int(t.frames[0]) for t in tracks)
    hi = max(int(t.frames[-1]) for t in tracks)
    stride = max(1, int(sampling.stride))
    zone_flags = sampling.zone_names

    observations = []
    for w0 in range(lo, hi + 1, stride):
        best: dict[str, tuple] = {}
        for f in range(w0, min(hi + 1, w0 + stride)):
            if f in jam:
                continue
            for ta, ia, tb, ib in pair_candidates(tracks, f, sampling.gating_radius):
                if np.isnan(ta.avg_speed_1s[ia]) or np.isnan(tb.avg_speed_1s[ib]):
                    continue
                hit = _evaluate(ta, ia, tb, ib, zones, kernel_config)
                if hit is None:
                    continue
                gid = group_id(ta.vehicle_id, tb.vehicle_id)
                if gid not in best or hit[0].ttc < best[gid][0][0].ttc:
                    best[gid] = (hit, f, (ta, ia), (tb, ib))
        for gid, (hit, f, (ta, ia), (tb, ib)) in best.items():
            res, ctype, sev, zone = hit
            if res.leader_id == ta.vehicle_id:
                (lt, li), (ft, fi) = (ta, ia), (tb, ib)
            else:
                (lt, li), (ft, fi) = (tb, ib), (ta, ia)
            cov = {
                "electronic_involved": int("Electronic" in (ta.payment, tb.payment)),
                "zone1": int(zone == zone_flags[0]),
                "zone2": int(zone == zone_flags[1]),
            }
            cov.update(_role_covariates("leader", lt, li))
            cov.update(_role_covariates("follower", ft, fi))
            observations.append(
                InteractionObservation(
                    group_id=gid,
                    frame=f,
                    family=ctype.value,
                    outcome=sev.value,
                    ttc=float(res.ttc),
                    zone=zone,
                    leader_id=lt.vehicle_id,
                    follower_id=ft.vehicle_id,
                    covariates=cov,
                )
            )
    observations.sort(key=lambda o: (_natural_key(o.group_id), o.frame))
    return observations


def observations_frame(observations: list[InteractionObservation]) -> pd.DataFrame:
    return pd.DataFrame([o.as_row() for o in observations], columns=list(OBS_COLUMNS))


def write_observations(observations: list[InteractionObservation], path) -> None:
    observations_frame(observations).to_csv(path, index=False, float_format="%.10g", lineterminator="\n")


def read_observations(path) -> pd.DataFrame:
    # "None" is an outcome label here, not a missing value
    df = pd.read_csv(path, dtype={"group_id": str, "leader_id": str, "follower_id": str, "zone": str, "outcome": str},
                     keep_default_na=False, na_values=["", "nan", "NaN"])
    missing = [c for c in OBS_COLUMNS if c not in df.columns]
    if missing:
        raise SchemaMismatch(f"{path}: missing observation columns {missing}")
    return df


# ---------------------------------------------------------------------------
# descriptive statistics
# ---------------------------------------------------------------------------

SUMMARY_ROWS = (
    ("electronic_involved", "At least one vehicle uses electronic toll payment"),
    ("zone1", "Zone 1"),
    ("zone2", "Zone 2"),
    ("zone3", "Zone 3"),
) + tuple(
    (f"{role}_{f}", f"{role.capitalize()} vehicle: {label}")
    for role in ("leader", "follower")
    for f, label in (
        ("avg_speed", "Average speed (m/s)"),
        ("acceleration", "Acceleration (m/s^2)"),
        ("angular_speed", "Angular speed (deg/s)"),
    )
    + tuple((f"class_{c}", c) for c in VEHICLE_CLASSES)
)
OUTCOMES = (ConflictSeverity.NONE.value, ConflictSeverity.SLIGHT.value, ConflictSeverity.SEVERE.value)


def summarize_dataset(observations) -> dict:
    """Per-family descriptive statistics in the layout of a data table.

    Standard deviations are sample (n - 1) values, with 0 for a single
    observation. Returns ``{family: {"stats": DataFrame, "counts": dict}}``.
    """
    df = observations if isinstance(observations, pd.DataFrame) else observations_frame(observations)
    if df.empty:
        raise EmptyData("no observations to summarize")
    df = df.assign(zone3=1 - df["zone1"] - df["zone2"])
    out = {}
    for family in sorted(df["family"].unique()):
        sub = df[df["family"] == family]
        rows = []
        for col, label in SUMMARY_ROWS:
            v = sub[col].to_numpy(dtype=float)
            sd = float(np.std(v, ddof=1)) if len(v) > 1 else 0.0
            rows.append({"variable": col, "label": label, "mean": float(v.mean()), "sd": sd,
                         "min": float(v.min()), "max": float(v.max())})
        counts = {o: int((sub["outcome"] == o).sum()) for o in OUTCOMES}
        counts["Total"] = int(len(sub))
        out[family] = {"stats": pd.DataFrame(rows), "counts": counts}
    return out


def format_count(count: int, total: int) -> str:
    return f"{count} ({100.0 * count / total:.1f}%)"


def format_summary(summary: dict) -> str:
    lines = []
    labels = {"None": "No conflict", "Slight": "Slight conflicts", "Severe": "Severe conflicts"}
    for family, block in summary.items():
        lines.append(f"{family} interaction and conflict")
        lines.append(f"{'Factor':<52}{'Mean':>9}{'S.D.':>9}{'Min.':>9}{'Max.':>9}")
        for r in block["stats"].itertuples():
            lines.append(f"{r.label:<52}{r.mean:>9.2f}{r.sd:>9.2f}{r.min:>9.2f}{r.max:>9.2f}")
        total = block["counts"]["Total"]
        for o in OUTCOMES:
            lines.append(f"{labels[o]:<52}{format_count(block['counts'][o], total)}")
        lines.append(f"{'Total observations':<52}{total}")
        lines.append("")
    return "\n".join(lines)
