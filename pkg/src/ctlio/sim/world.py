"""Analytic scene primitives and vectorised ray casting."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Sequence, Tuple

import numpy as np

from ..errors import ContractViolation

_EPS = 1e-9


def _safe_dirs(d):
    """Replace exact zero direction components so slab divisions stay finite-signed."""
    d = np.array(d, dtype=float, copy=True)
    zero = d == 0.0
    d[zero] = 1e-300
    return d


@dataclass(frozen=True)
class Box:
    """Axis-aligned solid box; rays from inside hit the far face."""

    lo: Tuple[float, float, float]
    hi: Tuple[float, float, float]
    id: str = "box"

    def __post_init__(self):
        lo, hi = np.asarray(self.lo, float), np.asarray(self.hi, float)
        if lo.shape != (3,) or hi.shape != (3,) or not np.all(np.isfinite(lo)) or not np.all(np.isfinite(hi)):
            raise ContractViolation("box corners must be finite 3-vectors")
        if np.any(hi <= lo):
            raise ContractViolation(f"box {self.id} has non-positive extent")

    def intersect(self, o, d):
        lo, hi = np.asarray(self.lo), np.asarray(self.hi)
        with np.errstate(over="ignore", invalid="ignore"):
            t1 = (lo - o) / d
            t2 = (hi - o) / d
        tnear = np.minimum(t1, t2).max(axis=1)
        tfar = np.maximum(t1, t2).min(axis=1)
        t = np.where(tnear > _EPS, tnear, tfar)
        ok = (tfar >= tnear) & (t > _EPS)
        return np.where(ok, t, np.inf)


@dataclass(frozen=True)
class Plane:
    """Infinite plane through ``point`` with normal ``normal``."""

    point: Tuple[float, float, float]
    normal: Tuple[float, float, float]
    id: str = "plane"

    def __post_init__(self):
        n = np.asarray(self.normal, float)
        if n.shape != (3,) or not np.linalg.norm(n) > 0:
            raise ContractViolation("plane normal must be a nonzero 3-vector")

    def intersect(self, o, d):
        n = np.asarray(self.normal, float)
        n = n / np.linalg.norm(n)
        den = d @ n
        num = (np.asarray(self.point, float) - o) @ n
        with np.errstate(divide="ignore", invalid="ignore"):
            t = num / den
        return np.where((np.abs(den) > 1e-12) & (t > _EPS), t, np.inf)


@dataclass(frozen=True)
class Panel:
    """Finite rectangle: centre, normal, in-plane axis ``u`` and half extents along ``u`` and ``n x u``."""

    center: Tuple[float, float, float]
    normal: Tuple[float, float, float]
    u: Tuple[float, float, float]
    half_u: float
    half_v: float
    id: str = "panel"

    def __post_init__(self):
        n = np.asarray(self.normal, float)
        u = np.asarray(self.u, float)
        if not np.linalg.norm(n) > 0 or not np.linalg.norm(u) > 0:
            raise ContractViolation("panel axes must be nonzero")
        if abs(n @ u) > 1e-9 * np.linalg.norm(n) * np.linalg.norm(u):
            raise ContractViolation("panel axis u must lie in the panel plane")
        if not (self.half_u > 0 and self.half_v > 0):
            raise ContractViolation("panel extents must be positive")

    def intersect(self, o, d):
        c = np.asarray(self.center, float)
        n = np.asarray(self.normal, float)
        n = n / np.linalg.norm(n)
        u = np.asarray(self.u, float)
        u = u / np.linalg.norm(u)
        v = np.cross(n, u)
        den = d @ n
        with np.errstate(divide="ignore", invalid="ignore"):
            t = ((c - o) @ n) / den
        hit = o + d * t[:, None]
        rel = hit - c
        inside = (np.abs(rel @ u) <= self.half_u) & (np.abs(rel @ v) <= self.half_v)
        return np.where((np.abs(den) > 1e-12) & (t > _EPS) & inside, t, np.inf)


def axis_panel(axis: int, offset: float, lo: Sequence[float], hi: Sequence[float], id="panel") -> Panel:
    """Panel perpendicular to ``axis`` at ``offset`` spanning [lo, hi] over the other two axes."""
    others = [a for a in range(3) if a != axis]
    c = np.zeros(3)
    c[axis] = offset
    c[others] = (np.asarray(lo, float) + np.asarray(hi, float)) / 2
    n = np.zeros(3)
    n[axis] = 1.0
    u = np.zeros(3)
    u[others[0]] = 1.0
    half = (np.asarray(hi, float) - np.asarray(lo, float)) / 2
    # v = n x u is +/- the second in-plane axis; extents are symmetric so the sign is irrelevant
    return Panel(tuple(c), tuple(n), tuple(u), float(half[0]), float(half[1]), id)


@dataclass
class World:
    primitives: List = field(default_factory=list)
    name: str = "world"

    def __post_init__(self):
        if not self.primitives:
            raise ContractViolation("a world needs at least one primitive")

    def cast(self, origins, dirs, max_range=np.inf):
        """Distance to the first hit along each unit ray (``inf`` for a miss) and the primitive index."""
        o = np.atleast_2d(np.asarray(origins, dtype=float))
        d = _safe_dirs(np.atleast_2d(np.asarray(dirs, dtype=float)))
        o = np.broadcast_to(o, d.shape)
        best = np.full(len(d), np.inf)
        which = np.full(len(d), -1)
        for k, prim in enumerate(self.primitives):
            t = prim.intersect(o, d)
            closer = t < best
            best = np.where(closer, t, best)
            which = np.where(closer, k, which)
        miss = best > max_range
        best[miss] = np.inf
        which[miss] = -1
        return best, which


# ---------------------------------------------------------------------------
# scene presets


def room_world(size=(12.0, 8.0, 3.0)) -> World:
    """Enclosed room with furniture breaking its symmetries."""
    sx, sy, sz = size
    prims = [
        Box((-sx / 2, -sy / 2, 0.0), (sx / 2, sy / 2, sz), "room"),
        Box((2.0, 1.5, 0.0), (2.6, 2.1, sz), "pillar"),
        Box((-sx / 2, -sy / 2, 0.0), (-sx / 2 + 1.2, -sy / 2 + 1.0, 1.2), "cabinet"),
        Box((3.0, -3.0, 0.0), (4.0, -2.0, 0.8), "crate"),
        Box((-2.5, 2.8, 0.0), (-1.0, sy / 2, 2.0), "shelf"),
        Box((-1.0, -1.6, 0.0), (-0.4, -1.0, 0.5), "stool"),
    ]
    return World(prims, "room")


def small_room_world(size=(3.0, 2.5, 2.4)) -> World:
    sx, sy, sz = size
    prims = [
        Box((-sx / 2, -sy / 2, 0.0), (sx / 2, sy / 2, sz), "room"),
        Box((sx / 2 - 0.6, -sy / 2, 0.0), (sx / 2, -sy / 2 + 0.5, 0.9), "desk"),
        Box((-sx / 2, sy / 2 - 0.4, 0.0), (-sx / 2 + 0.8, sy / 2, 1.8), "locker"),
    ]
    return World(prims, "small_room")


def hall_world(size=(40.0, 30.0, 10.0)) -> World:
    sx, sy, sz = size
    prims = [Box((-sx / 2, -sy / 2, 0.0), (sx / 2, sy / 2, sz), "hall")]
    for k, (x, y) in enumerate([(-10, -6), (-3, 7), (5, -4), (12, 6), (9, -10), (-14, 9)]):
        prims.append(Box((x - 0.6, y - 0.6, 0.0), (x + 0.6, y + 0.6, sz), f"column{k}"))
    prims.append(Box((-6.0, -12.0, 0.0), (-2.0, -9.0, 2.5), "container"))
    return World(prims, "hall")


def corridor_world(half_width=1.2, height=2.8) -> World:
    """Featureless straight corridor along x: unconstrained in that direction."""
    return World([
        Plane((0, -half_width, 0), (0, 1, 0), "wall_right"),
        Plane((0, half_width, 0), (0, -1, 0), "wall_left"),
        Plane((0, 0, 0), (0, 0, 1), "floor"),
        Plane((0, 0, height), (0, 0, -1), "ceiling"),
    ], "corridor")


def doorway_world(room=(8.0, 8.0, 3.0), door_half=0.8, door_height=2.2, corridor_len=60.0) -> World:
    """Room on x < 0 opening through a door at x = 0 into a long corridor along +x."""
    rx, ry, rz = room
    h = ry / 2
    prims = [
        axis_panel(2, 0.0, (-rx, -h), (0.0, h), "room_floor"),
        axis_panel(2, rz, (-rx, -h), (0.0, h), "room_ceiling"),
        axis_panel(0, -rx, (-h, 0.0), (h, rz), "room_back"),
        axis_panel(1, -h, (-rx, 0.0), (0.0, rz), "room_right"),
        axis_panel(1, h, (-rx, 0.0), (0.0, rz), "room_left"),
        axis_panel(0, 0.0, (-h, 0.0), (-door_half, rz), "door_wall_r"),
        axis_panel(0, 0.0, (door_half, 0.0), (h, rz), "door_wall_l"),
        axis_panel(0, 0.0, (-door_half, door_height), (door_half, rz), "lintel"),
        axis_panel(2, 0.0, (0.0, -door_half), (corridor_len, door_half), "corr_floor"),
        axis_panel(2, door_height, (0.0, -door_half), (corridor_len, door_half), "corr_ceiling"),
        axis_panel(1, -door_half, (0.0, 0.0), (corridor_len, door_height), "corr_right"),
        axis_panel(1, door_half, (0.0, 0.0), (corridor_len, door_height), "corr_left"),
        Box((-rx + 0.5, -h + 0.5, 0.0), (-rx + 1.5, -h + 1.7, 1.4), "cabinet"),
        Box((-3.0, 1.5, 0.0), (-2.2, 2.3, rz), "pillar"),
        Box((-5.5, -2.5, 0.0), (-4.5, -1.8, 0.9), "crate"),
    ]
    return World(prims, "doorway")


def staircase_world(footprint=10.0, storey=3.0, slab=0.6, well=((-5.0, 5.0), (-5.0, -3.0))) -> World:
    """Two storeys separated by a thick slab with a stairwell opening along one side."""
    f = footprint / 2
    top = 2 * storey + slab
    (wx0, wx1), (wy0, wy1) = well
    prims = [
        Box((-f, -f, 0.0), (f, f, top), "shell"),
        # slab with the stairwell cut out, as the part north of the well
        Box((-f, wy1, storey), (f, f, storey + slab), "slab"),
        # steps: 8 risers climbing along +x inside the well
    ]
    n = 8
    run = (wx1 - wx0) / n
    rise = (storey + slab) / n
    for k in range(n):
        prims.append(Box((wx0 + k * run, wy0, 0.0), (wx0 + (k + 1) * run, wy1, (k + 1) * rise), f"step{k}"))
    prims += [
        Box((1.0, 1.0, 0.0), (2.0, 2.5, 1.5), "lower_crate"),
        Box((-3.5, 2.0, 0.0), (-2.8, 2.7, storey), "lower_pillar"),
        Box((-2.0, 0.5, storey + slab), (-0.8, 1.5, storey + slab + 1.2), "upper_crate"),
        Box((2.5, 2.5, storey + slab), (3.2, 3.2, top), "upper_pillar"),
    ]
    return World(prims, "staircase")


def loop_course_world(outer=11.0, inner=4.5, height=3.0) -> World:
    """Ring corridor around a solid block, with irregular landmarks along the outer wall."""
    prims = [
        Box((-outer, -outer, 0.0), (outer, outer, height), "outer"),
        Box((-inner, -inner, 0.0), (inner, inner, height), "block"),
    ]
    marks = [(8.0, -10.6), (-3.0, -10.6), (10.6, -5.0), (10.6, 6.5), (2.0, 10.6), (-9.0, 10.6),
             (-10.6, 4.0), (-10.6, -7.0), (5.0, 10.6), (10.6, 1.0)]
    for k, (x, y) in enumerate(marks):
        sz = 0.5 + 0.15 * (k % 4)
        prims.append(Box((x - sz, y - sz, 0.0), (x + sz, y + sz, 1.0 + 0.4 * (k % 3)), f"mark{k}"))
    return World(prims, "square_loop")


def mixed_scale_world() -> World:
    """Large hall with a small closet room in one corner, connected by a door."""
    hall = hall_world()
    # closet walls as panels: interior x in [-19.5, -17], y in [-14.5, -12]; door on the +x side
    x0, x1, y0, y1, h = -19.5, -17.0, -14.5, -12.0, 2.4
    prims = list(hall.primitives) + [
        axis_panel(2, h, (x0, y0), (x1, y1), "closet_ceiling"),
        axis_panel(0, x1, (y0, 0.0), (-13.8, h), "closet_wall_a"),
        axis_panel(0, x1, (-12.8, 0.0), (y1, h), "closet_wall_b"),
        axis_panel(1, y1, (x0, 0.0), (x1, h), "closet_wall_c"),
        Box((-19.5, -14.5, 0.0), (-18.8, -13.7, 1.0), "closet_box"),
    ]
    return World(prims, "mixed_scale")


WORLDS: Dict[str, Callable[[], World]] = {
    "room": room_world,
    "small_room": small_room_world,
    "hall": hall_world,
    "corridor": corridor_world,
    "doorway": doorway_world,
    "staircase": staircase_world,
    "square_loop": loop_course_world,
    "mixed_scale": mixed_scale_world,
}
