"""
Footprint-aware time-to-collision for pairs of vehicles.

Vehicles are oriented rectangles moving at constant speed along their heading.
Headings are in degrees, counter-clockwise from the +x axis. Corner naming
follows the vehicle: A front-left, B front-right, C rear-right, D rear-left.

For two vehicles on intersecting paths the forward corridors (strips of
vehicle width along each heading) overlap in a parallelogram with corners

    a = right side line of 1  x  left side line of 2
    b = left side line of 1   x  left side line of 2
    c = left side line of 1   x  right side line of 2
    d = right side line of 1  x  right side line of 2

where the pair is ordered so that vehicle 2's heading is counter-clockwise
from vehicle 1's by an angle in (0, 90) degrees. With that ordering ``a`` is
where both vehicles enter the region and ``c`` where both leave it. The
first-contact time is then read off a decision tree over the times at which
vehicle corners reach region corners.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Hashable, NamedTuple, Optional

import numpy as np

INF = math.inf

#: Equal-time branches compare arrival times with this tolerance (seconds).
TIME_TOL = 1e-9
#: Interpolation denominators below this magnitude are treated as degenerate.
DENOM_TOL = 1e-9


class KernelError(Exception):
    """Base class for conflict-kernel failures."""


class OverlappingInput(KernelError):
    """The two footprints already overlap; no time-to-collision exists."""


class EmptyOverlap(KernelError):
    """The forward corridors of the two vehicles never meet."""


class ZeroSpeed(KernelError):
    """Arrival times requested for a vehicle that is not moving."""


class UnsupportedGeometry(KernelError):
    """Intersecting angle outside the range the decision tree covers."""


class ContactClass(str, enum.Enum):
    FRONT_TO_REAR = "front_to_rear"
    CORNER_TO_SIDE = "corner_to_side"
    NONE = "none"


class ConflictType(str, enum.Enum):
    REAR_END = "RearEnd"
    SIDESWIPE = "Sideswipe"
    UNSUPPORTED = "Unsupported"


class ConflictSeverity(str, enum.Enum):
    NONE = "None"
    SLIGHT = "Slight"
    SEVERE = "Severe"


@dataclass(frozen=True)
class KinematicState:
    """Instantaneous pose and speed of one vehicle footprint."""

    x: float
    y: float
    heading: float
    speed: float
    length: float
    width: float
    vehicle_id: Hashable = None

    def __post_init__(self):
        if not self.length > 0 or not self.width > 0:
            raise ValueError(f"vehicle dimensions must be positive: {self.length} x {self.width}")
        if not self.speed >= 0:
            raise ValueError(f"speed must be non-negative, got {self.speed}")
        object.__setattr__(self, "heading", float(self.heading) % 360.0)

    @property
    def direction(self) -> np.ndarray:
        h = math.radians(self.heading)
        return np.array([math.cos(h), math.sin(h)])

    @property
    def left_normal(self) -> np.ndarray:
        h = math.radians(self.heading)
        return np.array([-math.sin(h), math.cos(h)])

    @property
    def centroid(self) -> np.ndarray:
        return np.array([self.x, self.y], dtype=float)

    def moved(self, dx: float = 0.0, dy: float = 0.0, dheading: float = 0.0, **changes) -> "KinematicState":
        fields = dict(
            x=self.x + dx,
            y=self.y + dy,
            heading=self.heading + dheading,
            speed=self.speed,
            length=self.length,
            width=self.width,
            vehicle_id=self.vehicle_id,
        )
        fields.update(changes)
        return KinematicState(**fields)


class CornerSet(NamedTuple):
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray

    def as_array(self) -> np.ndarray:
        return np.vstack(self)


@dataclass(frozen=True)
class OverlapRegion:
    """Parallelogram shared by the two corridors (see module docstring)."""

    a: np.ndarray
    b: np.ndarray
    c: np.ndarray
    d: np.ndarray
    alpha: float
    degenerate: bool = False

    @property
    def corners(self) -> dict:
        return {"a": self.a, "b": self.b, "c": self.c, "d": self.d}

    @property
    def centroid(self) -> np.ndarray:
        return (self.a + self.b + self.c + self.d) / 4.0

    @property
    def area(self) -> float:
        p = np.vstack([self.a, self.b, self.c, self.d])
        x, y = p[:, 0], p[:, 1]
        return 0.5 * abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


@dataclass(frozen=True)
class TtcResult:
    ttc: float
    leader_id: Hashable
    contact_class: ContactClass
    alpha: float
    branch: str = ""
    region: Optional[OverlapRegion] = field(default=None, compare=False)
    contact_point: Optional[np.ndarray] = field(default=None, compare=False)

    @property
    def finite(self) -> bool:
        return math.isfinite(self.ttc)


@dataclass(frozen=True)
class SeverityThresholds:
    slight: float = 3.0
    severe: float = 1.5
    unsupported_angle: float = 30.0

    def __post_init__(self):
        if not self.slight > self.severe > 0:
            raise ValueError("thresholds must satisfy slight > severe > 0")


@dataclass(frozen=True)
class KernelConfig:
    parallel_cutoff: float = 0.5
    max_angle: float = 90.0
    thresholds: SeverityThresholds = field(default_factory=SeverityThresholds)


# ---------------------------------------------------------------------------
# geometry
# ---------------------------------------------------------------------------


def corners(state: KinematicState) -> CornerSet:
    c = state.centroid
    u = state.direction * (state.length / 2.0)
    n = state.left_normal * (state.width / 2.0)
    return CornerSet(A=c + u + n, B=c + u - n, C=c - u - n, D=c - u + n)


def relative_heading(s1: KinematicState, s2: KinematicState) -> float:
    """Heading of ``s2`` relative to ``s1`` wrapped to (-180, 180]."""
    phi = (s2.heading - s1.heading) % 360.0
    return phi - 360.0 if phi > 180.0 else phi


def intersecting_angle(s1: KinematicState, s2: KinematicState) -> float:
    return abs(relative_heading(s1, s2))


def _line_intersection(p: np.ndarray, u: np.ndarray, q: np.ndarray, w: np.ndarray) -> np.ndarray:
    # p + s*u == q + r*w
    det = u[0] * (-w[1]) - u[1] * (-w[0])
    rhs = q - p
    s = (rhs[0] * (-w[1]) - rhs[1] * (-w[0])) / det
    return p + s * u


def _state_key(s: KinematicState) -> tuple:
    return (s.x, s.y, s.heading, s.speed, s.length, s.width, repr(s.vehicle_id))


def canonical_order(s1: KinematicState, s2: KinematicState) -> tuple[KinematicState, KinematicState, bool]:
    """Order a pair so the second heading is counter-clockwise of the first.

    Returns ``(first, second, swapped)``. The result does not depend on the
    argument order, which makes every downstream quantity label-symmetric.
    """
    phi = relative_heading(s1, s2)
    if 0.0 < phi < 180.0:
        return s1, s2, False
    if -180.0 < phi < 0.0:
        return s2, s1, True
    if _state_key(s1) <= _state_key(s2):
        return s1, s2, False
    return s2, s1, True


def overlap_region(s1: KinematicState, s2: KinematicState, parallel_cutoff: float = 0.5) -> OverlapRegion:
    """Parallelogram where the two forward corridors overlap.

    Corner labels assume ``s2`` is counter-clockwise of ``s1``; use
    :func:`canonical_order` first for arbitrary pairs. A corridor starts at
    the vehicle's rear edge, so a region lying wholly behind either vehicle
    raises :class:`EmptyOverlap`.
    """
    if not (s1.speed > 0 and s2.speed > 0):
        raise ZeroSpeed("overlap region needs both vehicles moving")
    alpha = intersecting_angle(s1, s2)
    if alpha < parallel_cutoff or alpha > 180.0 - parallel_cutoff:
        nan = np.full(2, np.nan)
        return OverlapRegion(nan, nan, nan, nan, alpha, degenerate=True)

    u1, n1 = s1.direction, s1.left_normal
    u2, n2 = s2.direction, s2.left_normal
    left1 = s1.centroid + n1 * s1.width / 2
    right1 = s1.centroid - n1 * s1.width / 2
    left2 = s2.centroid + n2 * s2.width / 2
    right2 = s2.centroid - n2 * s2.width / 2
    region = OverlapRegion(
        a=_line_intersection(right1, u1, left2, u2),
        b=_line_intersection(left1, u1, left2, u2),
        c=_line_intersection(left1, u1, right2, u2),
        d=_line_intersection(right1, u1, right2, u2),
        alpha=alpha,
    )
    for s in (s1, s2):
        rear = np.dot(s.centroid, s.direction) - s.length / 2
        ahead = [np.dot(q, s.direction) - rear for q in region.corners.values()]
        if max(ahead) <= 0:
            raise EmptyOverlap(f"overlap region lies behind vehicle {s.vehicle_id!r}")
    return region


def arrival_times(state: KinematicState, region: OverlapRegion, signed: bool = False) -> dict:
    """Times at which each vehicle corner reaches the region corners on its trace.

    Keys are ``(corner, region_corner)`` such as ``("B", "a")``. Only pairs
    whose region corner lies on the corner's trace line are present. Region
    corners behind the vehicle corner map to ``inf`` unless ``signed`` is
    set, in which case the (negative) time since passing is returned.
    """
    if region.degenerate:
        raise ValueError("arrival times are undefined for a degenerate region")
    if not state.speed > 0:
        raise ZeroSpeed(f"vehicle {state.vehicle_id!r} has zero speed")
    u, n = state.direction, state.left_normal
    tol = 1e-6 * max(1.0, state.width)
    times = {}
    for name, p in corners(state)._asdict().items():
        lat_p = np.dot(p, n)
        for qname, q in region.corners.items():
            if abs(np.dot(q, n) - lat_p) > tol:
                continue
            t = (np.dot(q, u) - np.dot(p, u)) / state.speed
            if t < 0 and not signed:
                t = INF
            times[(name, qname)] = float(t)
    return times


def footprints_overlap(s1: KinematicState, s2: KinematicState) -> bool:
    """Separating-axis test with touching counted as not overlapping."""
    p1, p2 = corners(s1).as_array(), corners(s2).as_array()
    for axis in (s1.direction, s1.left_normal, s2.direction, s2.left_normal):
        a, b = p1 @ axis, p2 @ axis
        if a.max() <= b.min() or b.max() <= a.min():
            return False
    return True


# ---------------------------------------------------------------------------
# TTC
# ---------------------------------------------------------------------------


def ttc_longitudinal(leader: KinematicState, follower: KinematicState) -> float:
    """Car-following time-to-collision along the leader's axis."""
    axis = leader.direction
    x_l = np.dot(leader.centroid, axis) + leader.length / 2
    x_f = np.dot(follower.centroid, axis) + follower.length / 2
    v_l = leader.speed
    v_f = follower.speed * math.cos(math.radians(relative_heading(leader, follower)))
    if not v_f > v_l:
        return INF
    with np.errstate(over="ignore"):  # a subnormal closing speed correctly gives inf
        ttc = (x_l - x_f - leader.length) / (v_f - v_l)
    if ttc < 0:
        raise OverlappingInput(
            f"follower {follower.vehicle_id!r} front is ahead of leader {leader.vehicle_id!r} rear"
        )
    return float(ttc)


def _lt(x, y):
    return x < y - TIME_TOL


def _gt(x, y):
    return x > y + TIME_TOL


def _crossing(num: float, den: float, fallback: float) -> float:
    if abs(den) < DENOM_TOL:
        return fallback
    return num / den


def _tree(t1: dict, t2: dict) -> tuple[float, str]:
    """First-contact time from corner arrival times.

    Returns ``(ttc, branch)``; ``branch`` names the contact that fired.
    """
    t1Ba, t1Ca, t1Cd, t1Dc = t1["B", "a"], t1["C", "a"], t1["C", "d"], t1["D", "c"]
    t1Ab, t1Ac = t1["A", "b"], t1["A", "c"]
    t2Aa, t2Da, t2Bd, t2Bc = t2["A", "a"], t2["D", "a"], t2["B", "d"], t2["B", "c"]
    t2Db, t2Cc = t2["D", "b"], t2["C", "c"]

    if _lt(t1Ba, t2Aa):
        if _lt(t1Ca, t2Aa):
            if _lt(t1Cd, t2Bd):
                if _gt(t1Dc, t2Bc):
                    num = t2Bd * t1Dc - t1Cd * t2Bc
                    den = t2Bd + t1Dc - t1Cd - t2Bc
                    return _crossing(num, den, min(t2Bc, t2Bd)), "2B-rear1"
                if not _lt(t1Dc, t2Bc):
                    return t2Bc, "2B-1D"
                return INF, "clear"
            if _gt(t1Cd, t2Bd):
                num = t1Cd * t2Aa - t2Bd * t1Ca
                den = t1Cd + t2Aa - t2Bd - t1Ca
                return _crossing(num, den, min(t2Aa, t2Bd)), "1C-front2"
            return t2Bd, "2B-1C"
        if _gt(t1Ca, t2Aa):
            return t2Aa, "2A-side1"
        return t2Aa, "2A-1C"
    if _gt(t1Ba, t2Aa):
        if _gt(t1Ba, t2Da):
            if _gt(t1Ab, t2Db):
                if _lt(t1Ac, t2Cc):
                    num = t2Cc * t1Ab - t1Ac * t2Db
                    den = t2Cc + t1Ab - t1Ac - t2Db
                    return _crossing(num, den, min(t1Ab, t1Ac)), "1A-rear2"
                if not _gt(t1Ac, t2Cc):
                    return t1Ac, "1A-2C"
                return INF, "clear"
            if _lt(t1Ab, t2Db):
                num = t2Db * t1Ba - t1Ab * t2Da
                den = t2Db + t1Ba - t1Ab - t2Da
                return _crossing(num, den, min(t1Ba, t1Ab)), "2D-front1"
            return t1Ab, "1A-2D"
        if _lt(t1Ba, t2Da):
            return t1Ba, "1B-side2"
        return t1Ba, "1B-2D"
    return t1Ba, "1B-2A"


_SIDE_BRANCHES = {"2A-side1", "1B-side2"}

# Region corner where a branch makes contact, or for interpolated branches the
# region edge plus the vehicle corner that slides along it.
_BRANCH_POINT = {
    "2B-rear1": ("c", "d", 2, "B"),
    "1C-front2": ("a", "d", 1, "C"),
    "1A-rear2": ("b", "c", 1, "A"),
    "2D-front1": ("a", "b", 2, "D"),
    "2B-1D": "c",
    "2B-1C": "d",
    "2A-side1": "a",
    "2A-1C": "a",
    "1A-2C": "c",
    "1A-2D": "b",
    "1B-side2": "a",
    "1B-2D": "a",
    "1B-2A": "a",
}


def _contact_point(region: OverlapRegion, branch: str, s1: KinematicState, s2: KinematicState, ttc: float) -> np.ndarray:
    where = _BRANCH_POINT[branch]
    if isinstance(where, str):
        return region.corners[where].copy()
    p, q = region.corners[where[0]], region.corners[where[1]]
    state = s1 if where[2] == 1 else s2
    pos = getattr(corners(state), where[3]) + state.direction * state.speed * ttc
    edge = q - p
    s = np.clip(np.dot(pos - p, edge) / np.dot(edge, edge), 0.0, 1.0)
    return p + s * edge


def _none_result(s1, s2, alpha, branch, region=None) -> TtcResult:
    return TtcResult(INF, s1.vehicle_id, ContactClass.NONE, alpha, branch, region)


def _parallel_ttc(s1: KinematicState, s2: KinematicState, alpha: float) -> TtcResult:
    """Near-parallel paths: car-following TTC when the corridors overlap laterally."""
    n = s1.left_normal
    lat1 = corners(s1).as_array() @ n
    lat2 = corners(s2).as_array() @ n
    if lat1.max() <= lat2.min() or lat2.max() <= lat1.min():
        return _none_result(s1, s2, alpha, "parallel-clear")
    if alpha > 90.0:
        raise UnsupportedGeometry(f"opposing near-parallel paths (alpha={alpha:.2f})")
    axis = s1.direction
    if np.dot(s1.centroid, axis) >= np.dot(s2.centroid, axis):
        leader, follower = s1, s2
    else:
        leader, follower = s2, s1
    ttc = ttc_longitudinal(leader, follower)
    if not math.isfinite(ttc):
        return _none_result(leader, follower, alpha, "parallel-opening")
    point = leader.centroid - leader.direction * leader.length / 2
    return TtcResult(ttc, leader.vehicle_id, ContactClass.FRONT_TO_REAR, alpha, "parallel", None, point)


def _static_ttc(s1: KinematicState, s2: KinematicState, alpha: float) -> TtcResult:
    """One vehicle stopped: sweep the moving footprint into the static one."""
    if s1.speed == 0 and s2.speed == 0:
        return _none_result(s1, s2, alpha, "both-static")
    static, mover = (s1, s2) if s1.speed == 0 else (s2, s1)
    u, n = mover.direction, mover.left_normal
    front = np.dot(mover.centroid, u) + mover.length / 2
    lat0 = np.dot(mover.centroid, n)
    half = mover.width / 2
    # clip the static footprint to the mover's corridor
    poly = [p for p in corners(static)]
    for sign in (1.0, -1.0):
        poly = _clip(poly, sign * n, sign * lat0 + half)
        if not poly:
            return _none_result(static, mover, alpha, "static-clear")
    ahead = [np.dot(p, u) - front for p in poly]
    k = int(np.argmin(ahead))
    gap = ahead[k]
    if gap < 0:
        raise OverlappingInput(f"vehicle {mover.vehicle_id!r} overlaps stopped vehicle {static.vehicle_id!r}")
    point = poly[k]
    # contact on the stopped vehicle's rear or front face reads as rear-end
    sc = corners(static)
    on_end = False
    for e0, e1 in ((sc.C, sc.D), (sc.A, sc.B)):
        edge = e1 - e0
        rel = point - e0
        cross = edge[0] * rel[1] - edge[1] * rel[0]
        if abs(cross) <= 1e-9 * max(1.0, float(np.dot(edge, edge))):
            on_end = True
    inside_corridor = abs(np.dot(point, n) - lat0) < half - 1e-9
    cls = ContactClass.FRONT_TO_REAR if (on_end or inside_corridor) else ContactClass.CORNER_TO_SIDE
    return TtcResult(gap / mover.speed, static.vehicle_id, cls, alpha, "static", None, point)


def _clip(poly: list, normal: np.ndarray, offset: float) -> list:
    """Keep the part of a convex polygon with ``normal . p <= offset``."""
    out = []
    for i, p in enumerate(poly):
        q = poly[(i + 1) % len(poly)]
        dp, dq = np.dot(normal, p) - offset, np.dot(normal, q) - offset
        if dp <= 0:
            out.append(p)
        if dp * dq < 0:
            out.append(p + (q - p) * (dp / (dp - dq)))
    return out


def modified_ttc(s1: KinematicState, s2: KinematicState, config: KernelConfig = KernelConfig()) -> TtcResult:
    """Two-dimensional time-to-collision of a vehicle pair.

    Raises :class:`OverlappingInput` when the footprints overlap now and
    :class:`UnsupportedGeometry` for intersecting angles above
    ``config.max_angle``. A pair whose paths never bring the footprints
    together gets ``ttc = inf`` and contact class ``none``.
    """
    # a stopped footprint is the same rectangle either way round; face it along the mover
    if s1.speed == 0 and s2.speed > 0 and abs(relative_heading(s2, s1)) > 90.0:
        s1 = s1.moved(dheading=180.0)
    if s2.speed == 0 and s1.speed > 0 and abs(relative_heading(s1, s2)) > 90.0:
        s2 = s2.moved(dheading=180.0)
    first, second, _ = canonical_order(s1, s2)
    alpha = intersecting_angle(first, second)
    if footprints_overlap(first, second):
        raise OverlappingInput(f"vehicles {first.vehicle_id!r} and {second.vehicle_id!r} overlap")
    if alpha < config.parallel_cutoff or alpha > 180.0 - config.parallel_cutoff:
        return _parallel_ttc(first, second, alpha)
    if first.speed == 0 or second.speed == 0:
        return _static_ttc(first, second, alpha)
    if alpha > config.max_angle:
        raise UnsupportedGeometry(f"intersecting angle {alpha:.2f} exceeds {config.max_angle}")

    try:
        region = overlap_region(first, second, config.parallel_cutoff)
    except EmptyOverlap:
        return _none_result(first, second, alpha, "empty")
    t1 = arrival_times(first, region, signed=True)
    t2 = arrival_times(second, region, signed=True)
    ttc, branch = _tree(t1, t2)
    leader = first if t1["B", "a"] <= t2["A", "a"] else second
    if not math.isfinite(ttc) or ttc <= 0:
        # contact window lies entirely in the past (the present was ruled out above)
        return _none_result(leader, first if leader is second else second, alpha, branch, region)
    cls = ContactClass.CORNER_TO_SIDE if branch in _SIDE_BRANCHES else ContactClass.FRONT_TO_REAR
    point = _contact_point(region, branch, first, second, ttc)
    return TtcResult(float(ttc), leader.vehicle_id, cls, alpha, branch, region, point)


def classify(result: TtcResult, thresholds: SeverityThresholds = SeverityThresholds()):
    """Conflict type and severity of a TTC result.

    The type is ``None`` when no contact is predicted.
    """
    if result.contact_class is ContactClass.NONE or not math.isfinite(result.ttc):
        return None, ConflictSeverity.NONE
    if result.alpha >= thresholds.unsupported_angle:
        ctype = ConflictType.UNSUPPORTED
    elif result.contact_class is ContactClass.FRONT_TO_REAR:
        ctype = ConflictType.REAR_END
    else:
        ctype = ConflictType.SIDESWIPE
    return ctype, severity(result.ttc, thresholds)


def severity(ttc: float, thresholds: SeverityThresholds = SeverityThresholds()) -> ConflictSeverity:
    if ttc < thresholds.severe:
        return ConflictSeverity.SEVERE
    if ttc < thresholds.slight:
        return ConflictSeverity.SLIGHT
    return ConflictSeverity.NONE
