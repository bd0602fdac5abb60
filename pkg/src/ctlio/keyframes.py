"""Keyframes, environment metrics, 3D Jaccard overlap and submap assembly."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import ContractViolation
from .geometry import RigidTransform, SpatialIndex, StampedPointCloud, transform_cloud
from .gicp import estimate_covariances, rotate_covariances


@dataclass(frozen=True)
class SpaciousnessTracker:
    m: Optional[float] = None
    alpha: float = 0.95
    beta: float = 0.05


def update_spaciousness(tracker: SpaciousnessTracker, cloud) -> SpaciousnessTracker:
    """Low-pass filter the median point range of a robot-frame cloud."""
    pts = cloud.points if isinstance(cloud, StampedPointCloud) else np.asarray(cloud)
    if len(pts) == 0:
        raise ContractViolation("spaciousness needs a nonempty cloud")
    M = float(np.median(np.linalg.norm(pts, axis=1)))
    m = M if tracker.m is None else tracker.alpha * tracker.m + tracker.beta * M
    return SpaciousnessTracker(m, tracker.alpha, tracker.beta)


def global_degeneracy(H_tt, m: float, z: float) -> float:
    """Largest of ``m**2 / (lambda * sqrt(z))`` over the eigenvalues of ``H_tt``."""
    if not z > 0 or not m > 0:
        raise ContractViolation("spaciousness and sparsity must be positive")
    lam = np.linalg.eigvalsh(np.asarray(H_tt, dtype=float))
    if lam.min() <= 0.0:
        return math.inf
    return float(np.max(m * m / (lam * math.sqrt(z))))


def axis_degeneracy(H_tt, m: float, z: float, axis) -> float:
    """The same scaling applied to the curvature ``a^T H a`` along a unit direction ``a``."""
    if not z > 0 or not m > 0:
        raise ContractViolation("spaciousness and sparsity must be positive")
    a = np.asarray(axis, dtype=float)
    a = a / np.linalg.norm(a)
    lam = float(a @ np.asarray(H_tt, dtype=float) @ a)
    return math.inf if lam <= 0.0 else m * m / (lam * math.sqrt(z))


@dataclass(frozen=True)
class Keyframe:
    id: int
    pose: RigidTransform
    cloud: StampedPointCloud
    index: SpatialIndex = field(repr=False, compare=False)
    covariances: np.ndarray = field(repr=False, compare=False)
    degeneracy: float = math.inf

    @classmethod
    def create(cls, id, pose, cloud, degeneracy=math.inf, k_neighbors=20, epsilon=1e-3):
        index = SpatialIndex(cloud.points)
        cov = estimate_covariances(cloud, k_neighbors, epsilon, index=index)
        return cls(id, pose, cloud, index, cov, degeneracy)

    @property
    def points(self):
        return self.cloud.points

    def transformed(self, delta: RigidTransform) -> "Keyframe":
        """Rigidly move the keyframe (pose, cloud and covariances) by ``delta``."""
        cloud = transform_cloud(self.cloud, delta)
        return Keyframe(
            self.id,
            delta @ self.pose,
            cloud,
            SpatialIndex(cloud.points),
            rotate_covariances(self.covariances, delta.R),
            self.degeneracy,
        )


@dataclass(frozen=True)
class KeyframeThresholds:
    degeneracy: float = 1.0
    translation: float = 1.0
    rotation: float = math.radians(30.0)


def should_insert_keyframe(pose: RigidTransform, degeneracy: float, keyframes: Sequence[Keyframe],
                           thresholds: KeyframeThresholds = KeyframeThresholds()):
    """Return ``(insert, reasons)``; reasons is a tuple drawn from {"bootstrap", "degeneracy", "motion"}."""
    if not keyframes:
        return True, ("bootstrap",)
    reasons = []
    last = keyframes[-1]
    if abs(degeneracy - last.degeneracy) > thresholds.degeneracy:
        reasons.append("degeneracy")
    positions = np.array([k.pose.translation for k in keyframes])
    dist = np.linalg.norm(positions - pose.translation, axis=1)
    nearest = keyframes[int(np.argmin(dist))]
    if dist.min() > thresholds.translation or pose.rotation.angle_to(nearest.pose.rotation) > thresholds.rotation:
        reasons.append("motion")
    return bool(reasons), tuple(reasons)


# ---------------------------------------------------------------------------
# Jaccard overlap


def _parts(x):
    """Points and optional cached index of a keyframe, cloud or array."""
    if isinstance(x, Keyframe):
        return x.points, x.index
    if isinstance(x, StampedPointCloud):
        return x.points, None
    return np.asarray(x, dtype=float).reshape(-1, 3), None


def _order_key(x):
    if isinstance(x, Keyframe):
        return (1, -x.id, b"")
    pts, _ = _parts(x)
    return (0, len(pts), np.ascontiguousarray(pts).tobytes())


def _candidates(index: SpatialIndex, tgt, src, rows, radius: float, k: int):
    """Sorted (distance, target) lists within ``radius`` for ``src[rows]`` plus a
    flag telling whether each list may have been truncated at ``k``."""
    _, j = index.query_nearest(src[rows], max_distance=radius, k=k)
    if k == 1:
        j = j[:, None]
    valid = j < len(tgt)
    jc = np.where(valid, j, 0)
    d = np.linalg.norm(tgt[jc] - src[rows][:, None, :], axis=2)
    d[~valid] = np.inf
    order = np.lexsort((j, d), axis=-1)
    d = np.take_along_axis(d, order, axis=1)
    j = np.take_along_axis(j, order, axis=1)
    full = valid[:, -1]
    return d.tolist(), j.tolist(), full.tolist()


def greedy_match_count(src, tgt, corr_dist: float, tgt_index: Optional[SpatialIndex] = None,
                       k: int = 8, k_wide: int = 48, block: int = 256) -> int:
    """One-to-one matches: each source point, in index order, claims its nearest
    unclaimed target point within ``corr_dist`` (distance ties go to the lower index).

    Candidates come from a bulk ``k``-nearest query. When a point's list is
    exhausted, the full lists of the next ``block`` points are widened to
    ``k_wide`` in one query; an exact ball query is the last resort.
    """
    if len(src) == 0 or len(tgt) == 0:
        return 0
    index = tgt_index if tgt_index is not None else SpatialIndex(tgt)
    tgt = index.points
    src = np.asarray(src, dtype=float)
    # points outside the target's padded bounding box cannot match; dropping them keeps the order
    lo = tgt.min(axis=0) - corr_dist
    hi = tgt.max(axis=0) + corr_dist
    rows = np.flatnonzero(np.all((src >= lo) & (src <= hi), axis=1))
    if rows.size == 0:
        return 0
    pad = corr_dist * (1 + 1e-9)  # tree distances may round differently; exact test below
    # likewise points with no target inside the padded radius
    near, _ = index.query_nearest(src[rows], max_distance=pad)
    rows = rows[np.isfinite(near)]
    if rows.size == 0:
        return 0
    k = min(k, len(tgt))
    k_wide = min(k_wide, len(tgt))
    D, J, F = _candidates(index, tgt, src, rows, pad, k)
    widened = 0  # rows before this position already carry their widest list
    taken = bytearray(len(tgt))
    count = 0

    def claim(dr, jr, full):
        """Pick from a sorted list; ``None`` when the list cannot decide."""
        last = dr[-1] * (1 - 1e-12) if full else math.inf
        for dc, jj in zip(dr, jr):
            if not dc <= corr_dist:
                return False
            if dc >= last:
                return None  # order among points tied with the list's last entry is unknown
            if not taken[jj]:
                taken[jj] = 1
                return True
        return None if full else False

    for r, i in enumerate(rows.tolist()):
        got = claim(D[r], J[r], F[r])
        if got is None and r >= widened and k_wide > k:
            sel = [q for q in range(r, min(r + block, len(rows))) if F[q]]
            Dw, Jw, Fw = _candidates(index, tgt, src, rows[sel], pad, k_wide)
            for q, dw, jw, fw in zip(sel, Dw, Jw, Fw):
                D[q], J[q], F[q] = dw, jw, fw
            widened = r + block
            got = claim(D[r], J[r], F[r])
        if got is None:
            cand = np.asarray(index.query_ball(src[i], pad), dtype=int)
            cd = np.linalg.norm(tgt[cand] - src[i], axis=1) if cand.size else np.zeros(0)
            keep = cd <= corr_dist
            cand, cd = cand[keep], cd[keep]
            got = False
            for cc in cand[np.lexsort((cand, cd))].tolist():
                if not taken[cc]:
                    taken[cc] = 1
                    got = True
                    break
        count += bool(got)
    return count


def jaccard(a, b, corr_dist: float = 0.5) -> float:
    """3D intersection-over-union of two clouds in a common frame.

    The pair is evaluated in a canonical order (keyframes by descending id,
    raw clouds before keyframes), so the result is symmetric.
    """
    if corr_dist <= 0:
        raise ContractViolation("correspondence distance must be positive")
    if _order_key(b) < _order_key(a):
        a, b = b, a
    pa, _ = _parts(a)
    pb, ib = _parts(b)
    if len(pa) == 0 or len(pb) == 0:
        raise ContractViolation("jaccard needs nonempty clouds")
    inter = greedy_match_count(pa, pb, corr_dist, ib)
    union = len(pa) + len(pb) - inter
    return inter / union


# ---------------------------------------------------------------------------
# submaps and connectivity


@dataclass(frozen=True)
class Submap:
    points: np.ndarray
    covariances: np.ndarray
    index: SpatialIndex = field(repr=False)
    keyframe_ids: tuple

    def __len__(self):
        return len(self.points)


def build_submap(keyframes: Sequence[Keyframe]) -> Submap:
    """Concatenate cached keyframe clouds and covariances; only the index is rebuilt."""
    pts = np.concatenate([k.points for k in keyframes])
    cov = np.concatenate([k.covariances for k in keyframes])
    return Submap(pts, cov, SpatialIndex(pts), tuple(k.id for k in keyframes))


def jaccard_upper_bound(a, b, corr_dist: float = 0.5, a_index: Optional[SpatialIndex] = None) -> float:
    """Cheap bound ``>= jaccard(a, b)``: a one-to-one match count cannot exceed the
    number of points on either side that have any partner within ``corr_dist``."""
    pa, ia = _parts(a)
    pb, ib = _parts(b)
    ia = a_index or ia or SpatialIndex(pa)
    ib = ib if ib is not None else SpatialIndex(pb)
    pad = corr_dist * (1 + 1e-9)
    na = int(np.isfinite(ib.query_nearest(pa, max_distance=pad)[0]).sum())
    nb = int(np.isfinite(ia.query_nearest(pb, max_distance=pad)[0]).sum())
    m = min(na, nb)
    return m / (len(pa) + len(pb) - m)


def select_submap_keyframes(scan, keyframes: Sequence[Keyframe], threshold: float = 0.2,
                            corr_dist: float = 0.5):
    """Keyframes whose overlap with ``scan`` reaches ``threshold``, or else the best one.

    Keyframes whose upper bound already misses the threshold are not scored
    exactly (their entry in the returned scores is ``None``) unless the
    fallback needs every score.
    """
    if not keyframes:
        raise ContractViolation("submap extraction needs at least one keyframe")
    if corr_dist <= 0:
        raise ContractViolation("correspondence distance must be positive")
    pts, index = _parts(scan)
    index = index or SpatialIndex(pts)
    scores = [jaccard(scan, kf, corr_dist) if jaccard_upper_bound(pts, kf, corr_dist, index) >= threshold
              else None for kf in keyframes]
    chosen = [kf for kf, s in zip(keyframes, scores) if s is not None and s >= threshold]
    if not chosen:
        scores = [jaccard(scan, kf, corr_dist) if s is None else s for kf, s in zip(keyframes, scores)]
        chosen = [keyframes[int(np.argmax(scores))]]
    return chosen, scores


def extract_submap(scan, keyframes: Sequence[Keyframe], threshold: float = 0.2,
                   corr_dist: float = 0.5) -> Submap:
    chosen, _ = select_submap_keyframes(scan, keyframes, threshold, corr_dist)
    return build_submap(chosen)


@dataclass(frozen=True)
class ConnectivityMatrix:
    ids: tuple = ()
    values: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))

    def __len__(self):
        return len(self.ids)

    def row(self, kf_id):
        return self.values[self.ids.index(kf_id)]

    def get(self, i_id, j_id) -> float:
        return float(self.values[self.ids.index(i_id), self.ids.index(j_id)])


def update_connectivity(C: ConnectivityMatrix, new_kf: Keyframe, keyframes: Sequence[Keyframe],
                        corr_dist: float = 0.5) -> ConnectivityMatrix:
    """Append the overlap row/column for ``new_kf`` against the keyframes already in ``C``."""
    if new_kf.id in C.ids:
        raise ContractViolation(f"keyframe {new_kf.id} already in connectivity matrix")
    by_id = {k.id: k for k in keyframes}
    n = len(C)
    out = np.eye(n + 1)
    out[:n, :n] = C.values
    for col, kid in enumerate(C.ids):
        out[n, col] = out[col, n] = jaccard(new_kf, by_id[kid], corr_dist)
    return ConnectivityMatrix(C.ids + (new_kf.id,), out)
