"""Keyframe pose graph: sequential, connective and loop factors, optimisation,
and the map/odometry frame offset that keeps odometry output continuous."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from .errors import ContractViolation, InsufficientCorrespondenceError, OptimizationFailedError
from .geometry import RigidTransform, SpatialIndex, skew
from .gicp import GicpSettings, register, rotate_covariances
from .keyframes import ConnectivityMatrix, Submap

log = logging.getLogger(__name__)

SEQUENTIAL_NOISE = 1e-2
CONNECTIVE_NOISE_FLOOR = 1e-6
LOOP_NOISE_FLOOR = 1e-3


@dataclass(frozen=True)
class Factor:
    kind: str  # prior | sequential | connective | loop
    i: int
    j: int
    measurement: RigidTransform
    noise: float


@dataclass
class PoseGraph:
    nodes: Dict[int, RigidTransform] = field(default_factory=dict)
    factors: List[Factor] = field(default_factory=list)

    def copy(self) -> "PoseGraph":
        return PoseGraph(dict(self.nodes), list(self.factors))

    def count(self, kind: str) -> int:
        return sum(f.kind == kind for f in self.factors)

    @property
    def prior_id(self) -> Optional[int]:
        return next((f.i for f in self.factors if f.kind == "prior"), None)

    def is_connected(self) -> bool:
        if not self.nodes:
            return True
        adj = {k: set() for k in self.nodes}
        for f in self.factors:
            adj[f.i].add(f.j)
            adj[f.j].add(f.i)
        start = self.prior_id if self.prior_id is not None else next(iter(self.nodes))
        seen, stack = {start}, [start]
        while stack:
            for n in adj[stack.pop()]:
                if n not in seen:
                    seen.add(n)
                    stack.append(n)
        return len(seen) == len(self.nodes)


def add_keyframe_node(graph: PoseGraph, kf_id: int, pose: RigidTransform, prev_id: Optional[int] = None,
                      measurement: Optional[RigidTransform] = None, noise: float = SEQUENTIAL_NOISE) -> PoseGraph:
    """Insert a node; the first one gets the prior, later ones a sequential factor to ``prev_id``."""
    if kf_id in graph.nodes:
        raise ContractViolation(f"keyframe {kf_id} already in graph")
    g = graph.copy()
    if not g.nodes:
        g.nodes[kf_id] = pose
        g.factors.append(Factor("prior", kf_id, kf_id, pose, 0.0))
        return g
    if prev_id not in g.nodes:
        raise ContractViolation(f"previous keyframe {prev_id} not in graph")
    if measurement is None:
        measurement = g.nodes[prev_id].inverse() @ pose
    g.nodes[kf_id] = pose
    g.factors.append(Factor("sequential", prev_id, kf_id, measurement, noise))
    return g


def add_connective_factors(graph: PoseGraph, kf_id: int, C: ConnectivityMatrix, thresh: float = 0.3,
                           zeta: float = 0.1, measurements: Optional[Dict[int, RigidTransform]] = None) -> PoseGraph:
    """Factors from ``kf_id`` to every other keyframe overlapping by at least ``thresh``.

    The sequential neighbour is skipped. Noise is ``zeta * (1 - C)``
    floored at 1e-6. Measurements default to the relative node poses.
    """
    g = graph.copy()
    seq = {f.i for f in g.factors if f.kind == "sequential" and f.j == kf_id}
    row = C.row(kf_id)
    for col, other in enumerate(C.ids):
        if other == kf_id or other in seq or other not in g.nodes:
            continue
        c = float(row[col])
        if c < thresh:
            continue
        if measurements is not None and other in measurements:
            z = measurements[other]
        else:
            z = g.nodes[other].inverse() @ g.nodes[kf_id]
        g.factors.append(Factor("connective", other, kf_id, z, max(zeta * (1.0 - c), CONNECTIVE_NOISE_FLOOR)))
    return g


def _adjoint(T: RigidTransform) -> np.ndarray:
    R = T.R
    A = np.zeros((6, 6))
    A[:3, :3] = R
    A[:3, 3:] = skew(T.translation) @ R
    A[3:, 3:] = R
    return A


def factor_residual(f: Factor, nodes) -> np.ndarray:
    if f.kind == "prior":
        return np.zeros(6)
    return (f.measurement.inverse() @ nodes[f.i].inverse() @ nodes[f.j]).log()


def total_residual(graph: PoseGraph, nodes=None) -> float:
    """Sum of squared factor residuals weighted by inverse noise variance."""
    nodes = graph.nodes if nodes is None else nodes
    total = 0.0
    for f in graph.factors:
        if f.kind == "prior":
            continue
        e = factor_residual(f, nodes)
        total += float(e @ e) / f.noise**2
    return total


def optimize(graph: PoseGraph, max_iterations: int = 50, tol: float = 1e-10) -> PoseGraph:
    """Damped Gauss-Newton over node poses with the prior node held fixed."""
    if len(graph.nodes) <= 1:
        return graph.copy()
    if not graph.is_connected():
        raise ContractViolation("pose graph is not connected")
    fixed = graph.prior_id
    free = [k for k in graph.nodes if k != fixed]
    col = {k: 6 * n for n, k in enumerate(free)}
    nodes = dict(graph.nodes)
    cost = total_residual(graph, nodes)
    start_cost = cost
    mu = 1e-6
    for _ in range(max_iterations):
        if cost == 0.0:
            break
        H = np.zeros((6 * len(free), 6 * len(free)))
        b = np.zeros(6 * len(free))
        for f in graph.factors:
            if f.kind == "prior":
                continue
            e = factor_residual(f, nodes)
            w = 1.0 / f.noise**2
            # right perturbations of T_j and T_i; J_r^{-1}(e) taken as identity
            Jj = np.eye(6)
            Ji = -_adjoint(nodes[f.j].inverse() @ nodes[f.i])
            blocks = [(f.i, Ji), (f.j, Jj)]
            for a, Ja in blocks:
                if a not in col:
                    continue
                ia = col[a]
                b[ia:ia + 6] += w * Ja.T @ e
                for c_, Jc in blocks:
                    if c_ not in col:
                        continue
                    ic = col[c_]
                    H[ia:ia + 6, ic:ic + 6] += w * Ja.T @ Jc
        scale = max(np.trace(H) / len(H), 1e-12)
        accepted = False
        for _ in range(12):
            dx = np.linalg.solve(H + mu * scale * np.eye(len(H)), -b)
            trial = dict(nodes)
            for k in free:
                i = col[k]
                trial[k] = nodes[k] @ RigidTransform.exp(dx[i:i + 6])
            new_cost = total_residual(graph, trial)
            if new_cost <= cost:
                accepted = True
                mu = max(mu / 10.0, 1e-12)
                break
            mu *= 10.0
        if not accepted:
            break
        done = cost - new_cost <= tol * max(cost, 1e-300) or np.linalg.norm(dx) < 1e-12
        nodes, cost = trial, new_cost
        if done:
            break
    if cost > start_cost * (1 + 1e-9) + 1e-12:
        raise OptimizationFailedError(f"residual rose from {start_cost} to {cost}")
    return PoseGraph(nodes, list(graph.factors))


# ---------------------------------------------------------------------------
# loop closures


@dataclass(frozen=True)
class LoopFrame:
    """What the mapper keeps per keyframe: body-frame cloud and covariances."""

    id: int
    points: np.ndarray
    covariances: np.ndarray


@dataclass(frozen=True)
class LoopCandidateSet:
    ids: tuple
    closest: int


@dataclass(frozen=True)
class LoopSettings:
    radius: float = 10.0
    fitness_threshold: float = 0.3
    exclude_recent: int = 10
    max_corr: float = 2.0
    min_overlap: float = 0.3


def loop_candidates(graph: PoseGraph, kf_id: int, radius: float, exclude_recent: int = 10,
                    connectivity: Optional[ConnectivityMatrix] = None) -> Optional[LoopCandidateSet]:
    older = sorted(k for k in graph.nodes if k != kf_id)
    eligible = older[: max(0, len(older) - exclude_recent)]
    if not eligible:
        return None
    here = graph.nodes[kf_id].translation
    dist = {k: float(np.linalg.norm(graph.nodes[k].translation - here)) for k in eligible}
    chosen = [k for k in eligible if dist[k] <= radius]
    if connectivity is not None and kf_id in connectivity.ids:
        chosen += [k for k in eligible if k not in chosen and k in connectivity.ids and connectivity.get(kf_id, k) > 0]
    if not chosen:
        return None
    chosen.sort()
    return LoopCandidateSet(tuple(chosen), min(chosen, key=lambda k: dist[k]))


@dataclass(frozen=True)
class LoopResult:
    factor: Optional[Factor]
    fitness: float
    candidates: Optional[LoopCandidateSet]


def detect_loop(graph: PoseGraph, kf_id: int, frames: Dict[int, LoopFrame],
                settings: LoopSettings = LoopSettings(),
                connectivity: Optional[ConnectivityMatrix] = None) -> LoopResult:
    """Register the new keyframe against a loop cloud of old, nearby keyframes.

    Candidate clouds are concatenated in the frame of the candidate closest to
    the new keyframe; the new keyframe's body cloud is primed with the graph's
    current relative pose. A factor is returned when the mean correspondence
    distance is at most the fitness threshold.
    """
    cands = loop_candidates(graph, kf_id, settings.radius, settings.exclude_recent, connectivity)
    if cands is None:
        return LoopResult(None, np.inf, None)
    anchor = graph.nodes[cands.closest]
    anchor_inv = anchor.inverse()
    pts, covs = [], []
    for k in cands.ids:
        rel = anchor_inv @ graph.nodes[k]
        pts.append(rel.apply(frames[k].points))
        covs.append(rotate_covariances(frames[k].covariances, rel.R))
    loop_pts = np.concatenate(pts)
    target = Submap(loop_pts, np.concatenate(covs), SpatialIndex(loop_pts), cands.ids)
    prior = anchor_inv @ graph.nodes[kf_id]
    src = frames[kf_id]
    src_pts = prior.apply(src.points)
    src_cov = rotate_covariances(src.covariances, prior.R)
    try:
        res = register(src_pts, src_cov, target, prior, settings.max_corr, GicpSettings(max_iterations=40))
    except InsufficientCorrespondenceError:
        return LoopResult(None, np.inf, cands)
    overlap = res.correspondences / len(src_pts)
    if res.fitness > settings.fitness_threshold or overlap < settings.min_overlap:
        return LoopResult(None, res.fitness, cands)
    noise = max(res.fitness, LOOP_NOISE_FLOOR)
    return LoopResult(Factor("loop", cands.closest, kf_id, res.pose, noise), res.fitness, cands)


# ---------------------------------------------------------------------------
# map <-> odometry hand-back


@dataclass(frozen=True)
class FrameOffset:
    """Map-from-odometry transform."""

    transform: RigidTransform = field(default_factory=RigidTransform)

    def to_map(self, odom_pose: RigidTransform) -> RigidTransform:
        return self.transform @ odom_pose

    def to_odom(self, map_pose: RigidTransform) -> RigidTransform:
        return self.transform.inverse() @ map_pose


def apply_map_update(offset: FrameOffset, old_poses: Dict[int, RigidTransform],
                     new_poses: Dict[int, RigidTransform], tol: float = 1e-12):
    """Re-anchor the offset on the latest keyframe.

    ``old_poses`` are odometry-frame poses; ``new_poses`` are optimised
    map-frame poses. Returns ``(offset, updated odometry poses)``. The latest
    keyframe keeps its odometry pose object untouched; only keyframes whose
    odometry pose changes appear in the returned dict.
    """
    common = [k for k in new_poses if k in old_poses]
    if not common:
        return offset, {}
    moved = [k for k in common if not offset.to_map(old_poses[k]).almost_equal(new_poses[k], tol)]
    if not moved:
        return offset, {}
    latest = max(common)
    new_offset = FrameOffset(new_poses[latest] @ old_poses[latest].inverse())
    updates = {}
    for k in common:
        if k == latest:
            continue
        updates[k] = new_offset.to_odom(new_poses[k])
    return new_offset, updates


@dataclass(frozen=True)
class KeyframeMessage:
    """Odometry -> mapper hand-off for one new keyframe."""

    id: int
    odom_pose: RigidTransform
    body_points: np.ndarray
    body_covariances: np.ndarray
    connectivity: ConnectivityMatrix


@dataclass(frozen=True)
class MapUpdate:
    """Mapper -> odometry hand-back after an optimisation that moved nodes."""

    offset: FrameOffset
    map_poses: Dict[int, RigidTransform]
    loop: bool


@dataclass(frozen=True)
class MapperSettings:
    connective_threshold: float = 0.3
    zeta: float = 0.1
    loop_closure: bool = True
    loop: LoopSettings = LoopSettings()


class Mapper:
    """Background mapping: one ``process`` call per keyframe message."""

    def __init__(self, settings: MapperSettings = MapperSettings()):
        self.settings = settings
        self.graph = PoseGraph()
        self.frames: Dict[int, LoopFrame] = {}
        self.offset = FrameOffset()
        self.odom_poses: Dict[int, RigidTransform] = {}
        self.connectivity = ConnectivityMatrix()
        self.last_id: Optional[int] = None
        self.loops: List[Factor] = []

    def process(self, msg: KeyframeMessage) -> Optional[MapUpdate]:
        s = self.settings
        self.frames[msg.id] = LoopFrame(msg.id, msg.body_points, msg.body_covariances)
        self.connectivity = msg.connectivity
        map_pose = self.offset.to_map(msg.odom_pose)
        if self.last_id is None:
            self.graph = add_keyframe_node(self.graph, msg.id, map_pose)
        else:
            rel = self.odom_poses[self.last_id].inverse() @ msg.odom_pose
            self.graph = add_keyframe_node(self.graph, msg.id, map_pose, self.last_id, rel)
        self.odom_poses[msg.id] = msg.odom_pose
        self.last_id = msg.id
        if msg.id in self.connectivity.ids:
            self.graph = add_connective_factors(self.graph, msg.id, self.connectivity, s.connective_threshold, s.zeta)
        if not s.loop_closure:
            return None
        res = detect_loop(self.graph, msg.id, self.frames, s.loop, self.connectivity)
        if res.factor is None:
            return None
        log.info("loop closure %d -> %d (fitness %.4f)", res.factor.i, res.factor.j, res.fitness)
        self.graph.factors.append(res.factor)
        self.loops.append(res.factor)
        self.graph = optimize(self.graph)
        new_offset, changed = apply_map_update(self.offset, self.odom_poses, self.graph.nodes)
        if new_offset is self.offset and not changed:
            return None
        for k, pose in changed.items():
            self.odom_poses[k] = pose
        self.offset = new_offset
        return MapUpdate(new_offset, dict(self.graph.nodes), True)
