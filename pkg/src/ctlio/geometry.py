"""Quaternions, rigid transforms, stamped point clouds and k-d tree queries.

Quaternions are Hamilton, scalar-first ``[w, x, y, z]``. ``R(q)`` maps body
coordinates into the parent frame, so ``T.apply(p) = R p + t``.
The array-level helpers (``quat_mul``, ``quat_to_matrix`` ...) broadcast over
leading axes; the dataclasses wrap single values.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree

from .errors import ContractViolation

FRAMES = ("lidar", "robot", "world")


# ---------------------------------------------------------------------------
# array-level quaternion helpers


def quat_mul(a, b):
    """Hamilton product ``a ⊗ b`` over trailing axis 4."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    aw, ax, ay, az = np.moveaxis(a, -1, 0)
    bw, bx, by, bz = np.moveaxis(b, -1, 0)
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quat_conj(q):
    q = np.asarray(q, dtype=float)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def quat_normalize(q):
    q = np.asarray(q, dtype=float)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(n == 0.0):
        raise ContractViolation("cannot normalize a zero quaternion")
    return q / n


def pure(v):
    """Embed 3-vectors as pure quaternions ``(0, v)``."""
    v = np.asarray(v, dtype=float)
    return np.concatenate([np.zeros(v.shape[:-1] + (1,)), v], axis=-1)


def quat_to_matrix(q):
    q = np.asarray(q, dtype=float)
    w, x, y, z = np.moveaxis(q, -1, 0)
    xx, yy, zz = x * x, y * y, z * z
    xy, xz, yz = x * y, x * z, y * z
    wx, wy, wz = w * x, w * y, w * z
    m = np.stack(
        [
            1 - 2 * (yy + zz), 2 * (xy - wz), 2 * (xz + wy),
            2 * (xy + wz), 1 - 2 * (xx + zz), 2 * (yz - wx),
            2 * (xz - wy), 2 * (yz + wx), 1 - 2 * (xx + yy),
        ],
        axis=-1,
    )
    return m.reshape(q.shape[:-1] + (3, 3))


def quat_from_matrix(m):
    """Shepperd's method for a single 3x3 rotation matrix."""
    m = np.asarray(m, dtype=float)
    tr = np.trace(m)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
    elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
        s = 2.0 * np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2])
        q = [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
    elif m[1, 1] > m[2, 2]:
        s = 2.0 * np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2])
        q = [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1])
        q = [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
    return quat_normalize(np.array(q))


def quat_from_rotvec(v):
    v = np.asarray(v, dtype=float)
    theta = np.linalg.norm(v, axis=-1, keepdims=True)
    half = 0.5 * theta
    # sin(x/2)/x, with its series near zero
    small = theta < 1e-8
    safe = np.where(small, 1.0, theta)
    k = np.where(small, 0.5 - theta**2 / 48.0, np.sin(half) / safe)
    return np.concatenate([np.cos(half), k * v], axis=-1)


def quat_to_rotvec(q):
    q = np.asarray(q, dtype=float)
    q = np.where(q[..., :1] < 0, -q, q)
    w = np.clip(q[..., :1], -1.0, 1.0)
    vec = q[..., 1:]
    s = np.linalg.norm(vec, axis=-1, keepdims=True)
    angle = 2.0 * np.arctan2(s, w)
    small = s < 1e-12
    k = np.where(small, 2.0 / np.where(w == 0, 1.0, w), angle / np.where(small, 1.0, s))
    return k * vec


def skew(v):
    v = np.asarray(v, dtype=float)
    z = np.zeros(v.shape[:-1])
    x, y, w = v[..., 0], v[..., 1], v[..., 2]
    return np.stack(
        [np.stack([z, -w, y], -1), np.stack([w, z, -x], -1), np.stack([-y, x, z], -1)], -2
    )


def so3_left_jacobian(phi):
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi)
    K = skew(phi)
    if theta < 1e-8:
        return np.eye(3) + 0.5 * K + K @ K / 6.0
    return (
        np.eye(3)
        + (1 - np.cos(theta)) / theta**2 * K
        + (theta - np.sin(theta)) / theta**3 * K @ K
    )


def so3_left_jacobian_inv(phi):
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi)
    K = skew(phi)
    if theta < 1e-8:
        return np.eye(3) - 0.5 * K + K @ K / 12.0
    half = 0.5 * theta
    coef = (1.0 - half * np.cos(half) / np.sin(half)) / theta**2
    return np.eye(3) - 0.5 * K + coef * K @ K


# ---------------------------------------------------------------------------
# value types


@dataclass(frozen=True)
class UnitQuaternion:
    w: float = 1.0
    x: float = 0.0
    y: float = 0.0
    z: float = 0.0

    def __post_init__(self):
        n = np.sqrt(self.w**2 + self.x**2 + self.y**2 + self.z**2)
        if not np.isfinite(n) or n == 0.0:
            raise ContractViolation(f"invalid quaternion components {self.w, self.x, self.y, self.z}")
        if abs(n - 1.0) > 1e-12:
            object.__setattr__(self, "w", self.w / n)
            object.__setattr__(self, "x", self.x / n)
            object.__setattr__(self, "y", self.y / n)
            object.__setattr__(self, "z", self.z / n)

    @classmethod
    def identity(cls):
        return cls(1.0, 0.0, 0.0, 0.0)

    @classmethod
    def from_array(cls, q):
        q = np.asarray(q, dtype=float)
        return cls(float(q[0]), float(q[1]), float(q[2]), float(q[3]))

    @classmethod
    def from_rotvec(cls, v):
        return cls.from_array(quat_from_rotvec(v))

    @classmethod
    def from_matrix(cls, m):
        return cls.from_array(quat_from_matrix(m))

    @classmethod
    def from_axis_angle(cls, axis, angle):
        axis = np.asarray(axis, dtype=float)
        return cls.from_rotvec(axis / np.linalg.norm(axis) * angle)

    @property
    def array(self) -> np.ndarray:
        return np.array([self.w, self.x, self.y, self.z])

    @property
    def vec(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z])

    def __mul__(self, other: "UnitQuaternion") -> "UnitQuaternion":
        return UnitQuaternion.from_array(quat_mul(self.array, other.array))

    def conjugate(self) -> "UnitQuaternion":
        return UnitQuaternion(self.w, -self.x, -self.y, -self.z)

    inverse = conjugate

    def as_matrix(self) -> np.ndarray:
        return quat_to_matrix(self.array)

    def as_rotvec(self) -> np.ndarray:
        return quat_to_rotvec(self.array)

    def rotate(self, v):
        return np.asarray(v, dtype=float) @ self.as_matrix().T

    def canonical(self) -> "UnitQuaternion":
        """Representative with ``w >= 0`` for comparisons."""
        return self if self.w >= 0 else UnitQuaternion(-self.w, -self.x, -self.y, -self.z)

    def angle_to(self, other: "UnitQuaternion") -> float:
        d = abs(float(np.dot(self.array, other.array)))
        return 2.0 * float(np.arccos(min(1.0, d)))


def _frozen(a, shape=None):
    a = np.array(a, dtype=float)
    if shape is not None:
        a = a.reshape(shape)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class RigidTransform:
    rotation: UnitQuaternion = field(default_factory=UnitQuaternion.identity)
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        t = _frozen(self.translation, (3,))
        if not np.all(np.isfinite(t)):
            raise ContractViolation("non-finite translation")
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls):
        return cls()

    @classmethod
    def from_matrix(cls, m):
        m = np.asarray(m, dtype=float)
        return cls(UnitQuaternion.from_matrix(m[:3, :3]), m[:3, 3])

    @classmethod
    def from_rotvec(cls, rotvec, translation=(0.0, 0.0, 0.0)):
        return cls(UnitQuaternion.from_rotvec(rotvec), translation)

    @classmethod
    def exp(cls, xi):
        """SE(3) exponential of a twist ``(rho, phi)``, translation part first."""
        xi = np.asarray(xi, dtype=float)
        rho, phi = xi[:3], xi[3:]
        return cls(UnitQuaternion.from_rotvec(phi), so3_left_jacobian(phi) @ rho)

    def log(self) -> np.ndarray:
        phi = self.rotation.as_rotvec()
        rho = so3_left_jacobian_inv(phi) @ self.translation
        return np.concatenate([rho, phi])

    @property
    def R(self) -> np.ndarray:
        return self.rotation.as_matrix()

    @property
    def t(self) -> np.ndarray:
        return self.translation

    def as_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.R
        m[:3, 3] = self.translation
        return m

    def __matmul__(self, other: "RigidTransform") -> "RigidTransform":
        return RigidTransform(
            self.rotation * other.rotation,
            self.rotation.rotate(other.translation) + self.translation,
        )

    def inverse(self) -> "RigidTransform":
        qi = self.rotation.conjugate()
        return RigidTransform(qi, -qi.rotate(self.translation))

    def apply(self, points):
        points = np.asarray(points, dtype=float)
        return points @ self.R.T + self.translation

    def rotation_angle(self) -> float:
        return float(np.linalg.norm(self.rotation.as_rotvec()))

    def almost_equal(self, other: "RigidTransform", tol=1e-9) -> bool:
        return (
            np.allclose(self.translation, other.translation, atol=tol, rtol=0)
            and self.rotation.angle_to(other.rotation) <= max(tol, 1e-7)
        )


@dataclass(frozen=True)
class StampedPointCloud:
    """Points with per-point time offsets from ``t_start``.

    ``t_rel`` is not assumed sorted; spinning sensors interleave channels.
    """

    points: np.ndarray
    t_rel: np.ndarray = None
    t_start: float = 0.0
    frame: str = "lidar"

    def __post_init__(self):
        pts = _frozen(self.points)
        if pts.size == 0:
            pts = _frozen(np.zeros((0, 3)))
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ContractViolation(f"points must be (N, 3), got {pts.shape}")
        t = np.zeros(len(pts)) if self.t_rel is None else self.t_rel
        t = _frozen(t, (len(pts),))
        if self.frame not in FRAMES:
            raise ContractViolation(f"unknown frame tag {self.frame!r}")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "t_rel", t)
        object.__setattr__(self, "t_start", float(self.t_start))

    def __len__(self):
        return len(self.points)

    @property
    def times(self) -> np.ndarray:
        """Absolute timestamps of every point."""
        return self.t_start + self.t_rel

    @property
    def t_end(self) -> float:
        return self.t_start + (float(self.t_rel.max()) if len(self) else 0.0)

    def with_points(self, points, frame=None) -> "StampedPointCloud":
        return StampedPointCloud(points, self.t_rel, self.t_start, frame or self.frame)

    def select(self, mask_or_idx) -> "StampedPointCloud":
        return StampedPointCloud(
            self.points[mask_or_idx], self.t_rel[mask_or_idx], self.t_start, self.frame
        )

    @staticmethod
    def concatenate(clouds: Sequence["StampedPointCloud"], frame=None) -> "StampedPointCloud":
        if not clouds:
            return StampedPointCloud(np.zeros((0, 3)), frame=frame or "world")
        t0 = min(c.t_start for c in clouds)
        return StampedPointCloud(
            np.concatenate([c.points for c in clouds]),
            np.concatenate([c.t_rel + (c.t_start - t0) for c in clouds]),
            t0,
            frame or clouds[0].frame,
        )


class SpatialIndex:
    """Balanced k-d tree over 3-vectors, read-only after construction.

    Exact k-NN with ties broken by insertion order. ``query_nearest`` is
    the bulk path used by registration.
    """

    def __init__(self, points, leaf_size: int = 16):
        pts = np.asarray(points, dtype=float).reshape(-1, 3)
        self.points = _frozen(pts)
        self.leaf_size = leaf_size
        self._tree = cKDTree(pts, leafsize=leaf_size, balanced_tree=True) if len(pts) else None

    def __len__(self):
        return len(self.points)

    def knn(self, query, k: int):
        """Return ``(indices, distances)`` of the ``min(k, n)`` nearest points."""
        if k < 1:
            raise ContractViolation("k must be >= 1")
        n = len(self.points)
        if n == 0:
            return np.zeros(0, dtype=int), np.zeros(0)
        k = min(k, n)
        query = np.asarray(query, dtype=float).reshape(3)
        d, i = self._tree.query(query, k=k)
        d = np.atleast_1d(d)
        # gather every point tied with the k-th distance, then order by (distance, index)
        radius = d[-1]
        cand = np.array(self._tree.query_ball_point(query, radius * (1 + 1e-12) + 1e-300), dtype=int)
        cand_d = np.linalg.norm(self.points[cand] - query, axis=1)
        order = np.lexsort((cand, cand_d))[:k]
        return cand[order], cand_d[order]

    def query_nearest(self, queries, max_distance=np.inf, k: int = 1):
        """Bulk nearest-neighbor query; misses come back with ``inf`` distance."""
        queries = np.asarray(queries, dtype=float).reshape(-1, 3)
        if self._tree is None:
            shape = (len(queries),) if k == 1 else (len(queries), k)
            return np.full(shape, np.inf), np.full(shape, 0, dtype=int)
        return self._tree.query(queries, k=k, distance_upper_bound=max_distance)

    def query_ball(self, query, radius):
        if self._tree is None:
            return []
        return self._tree.query_ball_point(query, radius)


def transform_cloud(cloud: StampedPointCloud, T: RigidTransform, frame=None) -> StampedPointCloud:
    """Map every point ``p -> R p + t``; timestamps and order preserved."""
    if len(cloud) == 0:
        return cloud.with_points(cloud.points, frame)
    return cloud.with_points(T.apply(cloud.points), frame)


def knn(index: SpatialIndex, query, k: int):
    """List of ``(point, distance)`` pairs sorted by distance, ties by insertion order."""
    idx, dist = index.knn(query, k)
    return [(index.points[i].copy(), float(d)) for i, d in zip(idx, dist)]


def voxel_keys(points, leaf):
    return np.floor(np.asarray(points) / leaf).astype(np.int64)


def voxel_downsample(cloud: StampedPointCloud, leaf: float) -> StampedPointCloud:
    """Keep the first-arriving point of every occupied ``leaf``-sized cell."""
    if leaf <= 0:
        raise ContractViolation("voxel leaf must be positive")
    if len(cloud) == 0:
        return cloud
    keys = voxel_keys(cloud.points, leaf)
    _, first = np.unique(keys, axis=0, return_index=True)
    first.sort()
    return cloud.select(first)


def box_filter(cloud: StampedPointCloud, size: float = 1.0) -> StampedPointCloud:
    """Drop points inside an axis-aligned cube of edge ``size`` centred at the origin."""
    half = 0.5 * size
    inside = np.all(np.abs(cloud.points) <= half, axis=1)
    return cloud.select(~inside)
