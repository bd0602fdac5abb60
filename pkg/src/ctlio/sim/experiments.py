"""Scripted simulator experiments used by the acceptance suite.

Each function returns plain numbers so callers can apply their own
tolerances; nothing here asserts.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np

from ..config import PipelineConfig
from ..deskew import build_coarse_trajectory, deskew
from ..geometry import RigidTransform, SpatialIndex, StampedPointCloud, UnitQuaternion, box_filter, voxel_downsample
from ..gicp import cloud_sparsity, estimate_covariances, register
from ..keyframes import (
    ConnectivityMatrix,
    Keyframe,
    axis_degeneracy,
    global_degeneracy,
    jaccard,
    select_submap_keyframes,
    update_connectivity,
)
from ..mapping import (
    KeyframeMessage,
    LoopSettings,
    Mapper,
    MapperSettings,
    PoseGraph,
    add_connective_factors,
    add_keyframe_node,
    optimize,
    total_residual,
)
from . import trajectory as tr
from . import world as wd
from .scenarios import DEFAULT_IMU, DEFAULT_LIDAR, generate, run_scenario, true_state
from .sensors import SensorSpec, SimulatedScan, simulate_imu, simulate_scan

VOXEL = 0.2
BOX = 1.0


def _prep(points: np.ndarray, leaf: float = VOXEL) -> StampedPointCloud:
    c = box_filter(StampedPointCloud(points, frame="robot"), BOX)
    return voxel_downsample(c, leaf) if leaf > 0 else c


def truth_deskewed(scan: SimulatedScan, traj: tr.AnalyticTrajectory, spec: SensorSpec, t_ref: float) -> np.ndarray:
    """Lidar points moved into the robot frame at ``t_ref`` using the true motion (noise kept)."""
    cloud = scan.cloud
    t = cloud.t_start - spec.lidar.clock_offset + cloud.t_rel
    E = spec.lidar.extrinsic
    R = traj.rotation(t)
    world = np.einsum("nij,nj->ni", R, E.apply(cloud.points)) + traj.position(t)
    return traj.pose(t_ref).inverse().apply(world)


def snapshot(world: wd.World, pose: RigidTransform, spec: SensorSpec, seed=0) -> np.ndarray:
    """Robot-frame points of one sweep taken while standing still at ``pose``."""
    yaw = math.atan2(pose.R[1, 0], pose.R[0, 0])
    still = tr.static(tuple(pose.translation), yaw, 1.0)
    if not np.allclose(still.pose(0.0).R, pose.R, atol=1e-9):
        raise ValueError("snapshot poses must be level (yaw only)")
    sc = simulate_scan(world, still, spec, 0.0, np.random.default_rng(seed))
    return spec.lidar.extrinsic.apply(sc.cloud.points)


# ---------------------------------------------------------------------------
# deskew fidelity


@dataclass
class DeskewResult:
    corrected_rms: float
    uncorrected_rms: float
    points: int
    seconds: float


def deskew_fidelity(scan_starts: Sequence[float] = (0.5, 1.0, 1.5, 2.0), seed: int = 0) -> DeskewResult:
    """Noise-free aggressive spin: deskew from the true start state and IMU only."""
    tic = time.perf_counter()
    traj = tr.aggressive_spin()
    world = wd.room_world()
    spec = SensorSpec(DEFAULT_LIDAR, DEFAULT_IMU).noiseless()
    err_c, err_u = [], []
    for ts in scan_starts:
        sc = simulate_scan(world, traj, spec, ts, seed)
        imu = simulate_imu(traj, spec, ts, ts + spec.lidar.period + 0.02, seed)
        ct = build_coarse_trajectory(true_state(traj, ts), imu, sc.cloud.t_end)
        out = deskew(sc.cloud.with_points(sc.cloud.points, "robot"), ct)
        err_c.append(np.sum((out.points - sc.world_points) ** 2, axis=1))
        err_u.append(np.sum((traj.pose(ts).apply(sc.cloud.points) - sc.world_points) ** 2, axis=1))
    c, u = np.concatenate(err_c), np.concatenate(err_u)
    return DeskewResult(float(np.sqrt(c.mean())), float(np.sqrt(u.mean())), len(c), time.perf_counter() - tic)


# ---------------------------------------------------------------------------
# degeneracy


@dataclass
class DegeneracyProbe:
    d_global: float
    d_axis: float
    eigenvalues: np.ndarray
    sparsity: float
    spaciousness: float


def degeneracy_probe(world: wd.World, position=(0.0, 0.0, 1.0), step=(0.3, 0.0, 0.0), axis=(1.0, 0.0, 0.0),
                     spec: Optional[SensorSpec] = None, seed: int = 0) -> DegeneracyProbe:
    """Register a still scan against one taken ``step`` behind it and read the Hessian."""
    spec = spec or SensorSpec(DEFAULT_LIDAR, DEFAULT_IMU)
    p = np.asarray(position, float)
    here = RigidTransform(UnitQuaternion.identity(), p)
    back = RigidTransform(UnitQuaternion.identity(), p - np.asarray(step, float))
    kf_cloud = _prep(snapshot(world, back, spec, seed))
    scan = _prep(snapshot(world, here, spec, seed + 1))
    kf = Keyframe.create(0, back, StampedPointCloud(back.apply(kf_cloud.points), frame="world"))
    src = here.apply(scan.points)
    cov = estimate_covariances(src)
    z = cloud_sparsity(src)
    m = float(np.median(np.linalg.norm(scan.points, axis=1)))
    res = register(src, cov, kf, RigidTransform(), z)
    H = res.H_tt
    return DegeneracyProbe(global_degeneracy(H, m, z), axis_degeneracy(H, m, z, axis), np.linalg.eigvalsh(H), z, m)


@dataclass
class DoorwayTrace:
    transition_scan: int  # first scan ending past the door plane
    degeneracy_keyframes: List[int]
    motion_keyframes: List[int]
    first_degeneracy_after_room: Optional[int]
    correspondence_min_scan: int
    degeneracy: List[float]
    skipped: int


def doorway_trace(scan_limit: int = 50, seed: int = 0, config: Optional[PipelineConfig] = None) -> DoorwayTrace:
    data = generate("doorway", seed, scan_limit=scan_limit)
    trace = run_scenario("doorway", config, data=data)
    xs = data.truth.p[:, 0]
    transition = int(np.argmax(xs >= 0.0))
    recs = trace.records
    deg = [r.index for r in recs if "degeneracy" in r.reasons]
    mot = [r.index for r in recs if "motion" in r.reasons]
    late = [k for k in deg if xs[k] > -1.0]
    after = [r for r in recs if r.index >= transition and r.correspondences > 0]
    cmin = min(after, key=lambda r: r.correspondences).index if after else -1
    return DoorwayTrace(transition, deg, mot, late[0] if late else None, cmin,
                        [r.degeneracy for r in recs], sum(r.skipped is not None for r in recs))


# ---------------------------------------------------------------------------
# keyframes along a trajectory


@dataclass
class SimKeyframe:
    t: float
    truth: RigidTransform
    body: np.ndarray  # robot-frame cloud, filtered
    covariances: np.ndarray


def keyframes_along(traj: tr.AnalyticTrajectory, world: wd.World, spacing: float, t_begin: float = 0.0,
                    t_end: Optional[float] = None, spec: Optional[SensorSpec] = None, seed: int = 0,
                    limit: Optional[int] = None) -> List[SimKeyframe]:
    """Keyframes every ``spacing`` metres of path; clouds deskewed with the true motion."""
    spec = spec or SensorSpec(DEFAULT_LIDAR, DEFAULT_IMU)
    period = spec.lidar.period
    t_end = (traj.duration if t_end is None else t_end) - period
    ts = np.arange(t_begin, t_end, 0.01)
    seg = np.linalg.norm(np.diff(traj.position(ts), axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    picks, nxt = [], 0.0
    for t, d in zip(ts, s):
        if d >= nxt - 1e-12:
            picks.append(float(t))
            nxt = d + spacing
            if limit is not None and len(picks) >= limit:
                break
    rng = np.random.default_rng(seed)
    out = []
    for t in picks:
        sc = simulate_scan(world, traj, spec, t, rng)
        t_ref = sc.cloud.t_end - spec.lidar.clock_offset
        body = _prep(truth_deskewed(sc, traj, spec, t_ref)).points
        out.append(SimKeyframe(t_ref, traj.pose(t_ref), body, estimate_covariances(body)))
    return out


def _scaled(rel: RigidTransform, scale: float) -> RigidTransform:
    return RigidTransform(rel.rotation, rel.translation * scale)


def odometry_chain(truth: Sequence[RigidTransform], scale: float = 1.0, rng=None, sigma_t: float = 0.0,
                   sigma_r: float = 0.0, yaw_bias: float = 0.0) -> List[RigidTransform]:
    """Compose true increments with a translation scale error, a per-step yaw bias and optional noise."""
    out = [truth[0]]
    for a, b in zip(truth[:-1], truth[1:]):
        rel = _scaled(a.inverse() @ b, scale)
        if yaw_bias:
            rel = rel @ RigidTransform.from_rotvec((0.0, 0.0, yaw_bias))
        if rng is not None and (sigma_t > 0 or sigma_r > 0):
            xi = np.concatenate([rng.normal(0, sigma_t, 3), rng.normal(0, sigma_r, 3)])
            rel = rel @ RigidTransform.exp(xi)
        out.append(out[-1] @ rel)
    return out


# ---------------------------------------------------------------------------
# loop closure


@dataclass
class LoopOutcome:
    final_error: float
    mean_error: float
    loops: int
    keyframes: int
    updates: int


def square_loop_keyframes(spacing: float = 2.0, seed: int = 0) -> List[SimKeyframe]:
    traj = tr.squircle_loop(7.5, 2.5, laps=1.0, overshoot=0.6)
    return keyframes_along(traj, wd.loop_course_world(), spacing, seed=seed)


def loop_closure_run(kfs: Sequence[SimKeyframe], closures: bool, scale: float = 1.05, yaw_bias: float = 0.0,
                     loop: LoopSettings = LoopSettings(radius=10.0, fitness_threshold=0.3, exclude_recent=10,
                                                       max_corr=1.0, min_overlap=0.3)) -> LoopOutcome:
    """Feed keyframes with scale-biased odometry to the mapper and score its final map poses.

    Connective factors are left out (identity connectivity) so the comparison
    isolates loop closures.
    """
    truth = [k.truth for k in kfs]
    odom = odometry_chain(truth, scale, yaw_bias=yaw_bias)
    mapper = Mapper(MapperSettings(connective_threshold=1.0, zeta=0.1, loop_closure=closures, loop=loop))
    updates = 0
    for i, (k, T) in enumerate(zip(kfs, odom)):
        C = ConnectivityMatrix(tuple(range(i + 1)), np.eye(i + 1))
        if mapper.process(KeyframeMessage(i, T, k.body, k.covariances, C)) is not None:
            updates += 1
    est = [mapper.graph.nodes[i] for i in range(len(kfs))]
    err = np.array([np.linalg.norm(e.translation - t.translation) for e, t in zip(est, truth)])
    return LoopOutcome(float(err[-1]), float(err.mean()), len(mapper.loops), len(kfs), updates)


@dataclass
class VelocityCheck:
    max_ratio: float  # worst |dv| / per-step bound over the window around the update
    steps: int
    map_jump: float  # how far the map-frame pose moved at the update
    retransformed: int


def map_update_velocity_check(scan_limit: int = 24, inject_after: int = 12, seed: int = 0,
                              offset_xi=(0.8, -0.5, 0.1, 0.0, 0.0, 0.25), window: float = 0.3) -> VelocityCheck:
    """Inject a loop-closure style map update mid-run; measure velocity steps around it.

    The per-step bound is the largest change an IMU step can cause on its own,
    ``dt * (|f| + g)`` with ``f`` the measured specific force.
    """
    from ..mapping import FrameOffset, MapUpdate
    from ..pipeline import Pipeline

    from ..io import merged_stream

    data = generate("room", seed, scan_limit=scan_limit)
    cfg = PipelineConfig()
    with Pipeline(cfg, initial_state=data.initial_state, single_thread=True) as pipe:
        t_event = None
        moved = 0
        before = after = None
        for kind, obj in merged_stream([s.cloud for s in data.scans], data.imu):
            if kind == "imu":
                pipe.on_imu(obj)
            else:
                pipe.on_scan(obj)
            if t_event is None and len(pipe.records) == inject_after:
                ids, poses = pipe.keyframe_poses("odom")
                delta = RigidTransform.exp(np.asarray(offset_xi, float))
                new = {}
                for n, (k, p) in enumerate(zip(ids, poses)):
                    bend = RigidTransform.exp(np.array([0.02 * n, 0, 0, 0, 0, 0.002 * n]))
                    new[k] = delta @ p @ (bend if k != ids[-1] else RigidTransform())
                latest = ids[-1]
                upd = MapUpdate(FrameOffset(new[latest] @ poses[-1].inverse()), new, True)
                before = pipe.trajectory("map")[1][-1]
                t_event = pipe.loop.state.t
                pipe.on_map_update(upd)
                moved = pipe.pending_retransforms
                after = pipe.loop.offset.to_map(pipe.records[-1].state.pose)
        pipe.finish()
    states = pipe.imu_states
    g = cfg.sensor.gravity
    f_by_t = {s.t: np.linalg.norm(s.accel) for s in data.imu}
    worst, n = 0.0, 0
    for a, b in zip(states[:-1], states[1:]):
        if abs(b.t - t_event) > window:
            continue
        dt = b.t - a.t
        f = max(f_by_t.get(a.t, 0.0), f_by_t.get(b.t, 0.0))
        bound = dt * (f + g)
        worst = max(worst, float(np.linalg.norm(b.v - a.v)) / bound)
        n += 1
    jump = float(np.linalg.norm(after.translation - before.translation))
    return VelocityCheck(worst, n, jump, moved)


# ---------------------------------------------------------------------------
# connectivity sweep


@dataclass
class SweepPoint:
    threshold: float
    factors: int
    connective: int
    optimized_residual: float  # graph objective at its optimum
    truth_residual: float  # squared pose error of the optimum against ground truth


def connectivity_graph_inputs(n: int = 12, spacing: float = 1.5, seed: int = 0):
    """Fixed simulated inputs: keyframes, their connectivity and noisy odometry."""
    kfs = square_loop_keyframes(spacing, seed)[:n]
    C = ConnectivityMatrix()
    placed = []
    for i, k in enumerate(kfs):
        kf = Keyframe(i, k.truth, StampedPointCloud(k.truth.apply(k.body), frame="world"),
                      SpatialIndex(k.truth.apply(k.body)), k.covariances)
        C = update_connectivity(C, kf, placed)
        placed.append(kf)
    odom = odometry_chain([k.truth for k in kfs], 1.0, np.random.default_rng(seed + 7), 0.05, 0.01)
    return kfs, C, odom


def connectivity_sweep(thresholds: Sequence[float], inputs=None, zeta: float = 0.1) -> List[SweepPoint]:
    """Rebuild and optimise the same graph at each connective threshold.

    Sequential factors carry the noisy odometry; connective factors carry the
    true relative pose with noise ``zeta * (1 - C)``.
    """
    kfs, C, odom = inputs or connectivity_graph_inputs()
    truth = [k.truth for k in kfs]
    out = []
    for th in thresholds:
        g = PoseGraph()
        for i in range(len(kfs)):
            if i == 0:
                g = add_keyframe_node(g, 0, truth[0])
            else:
                g = add_keyframe_node(g, i, g.nodes[i - 1] @ (odom[i - 1].inverse() @ odom[i]), i - 1,
                                      odom[i - 1].inverse() @ odom[i])
            meas = {j: truth[j].inverse() @ truth[i] for j in range(i)}
            g = add_connective_factors(g, i, C, th, zeta, meas)
        opt = optimize(g)
        err = sum(float(np.sum((truth[i].inverse() @ opt.nodes[i]).log() ** 2)) for i in range(len(kfs)))
        out.append(SweepPoint(th, len(g.factors), g.count("connective"), total_residual(opt), err))
    return out


# ---------------------------------------------------------------------------
# adaptive correspondence distance


def scene_sparsity(world: wd.World, position, spec: Optional[SensorSpec] = None, seed: int = 0,
                   leaf: float = VOXEL) -> float:
    """Sparsity of one still sweep after box filtering and an optional voxel filter (``leaf`` 0 skips it)."""
    spec = spec or SensorSpec(DEFAULT_LIDAR, DEFAULT_IMU)
    pose = RigidTransform(UnitQuaternion.identity(), np.asarray(position, float))
    return cloud_sparsity(_prep(snapshot(world, pose, spec, seed), leaf).points)


@dataclass
class SuccessRates:
    rates: Dict[str, float]  # fraction of scans tracked within tolerance
    ate: Dict[str, float]  # aligned RMSE of the whole run
    scans: int


def registration_success(settings: Sequence[Optional[float]] = (None, 0.25, 1.0), seed: int = 0,
                         tol_t: float = 0.05, tol_r_deg: float = 1.0, scan_limit: Optional[int] = None) -> SuccessRates:
    """Full mixed-scale runs, closet into hall, with the adaptive or a fixed correspondence radius.

    ``None`` in ``settings`` means the adaptive radius. A scan counts as a
    success when its odometry pose lies within ``tol_t`` / ``tol_r_deg`` of truth.
    """
    data = generate("mixed_scale", seed, scan_limit=scan_limit)
    truth = data.truth.poses()
    rates, ate = {}, {}
    for s in settings:
        name = "adaptive" if s is None else f"fixed_{s:g}"
        cfg = PipelineConfig().replace(adaptive={"fixed_max_corr": s})
        trace = run_scenario("mixed_scale", cfg, data=data)
        ok = 0
        for r in trace.records:
            if r.state is None or r.skipped is not None:
                continue
            e = r.state.pose.inverse() @ truth[r.index]
            if np.linalg.norm(e.translation) <= tol_t and math.degrees(e.rotation_angle()) <= tol_r_deg:
                ok += 1
        rates[name] = ok / len(data.scans)
        ate[name] = float(trace.ate()["rmse"])
    return SuccessRates(rates, ate, len(data.scans))


# ---------------------------------------------------------------------------
# staircase submap


@dataclass
class StaircaseSubmap:
    nearest_id: int
    nearest_distance: float
    nearest_jaccard: float
    chosen: List[int]
    scores: list


def staircase_submap(seed: int = 0) -> StaircaseSubmap:
    """Ramp keyframes plus one ground-floor keyframe; query from the floor above it.

    The ground-floor keyframe is the spatially nearest one but the slab hides
    it from the query scan.
    """
    world = wd.staircase_world()
    spec = SensorSpec(DEFAULT_LIDAR, DEFAULT_IMU)
    traj = tr.stair_climb()
    ramp = keyframes_along(traj, world, 2.0, seed=seed)
    below = RigidTransform(UnitQuaternion.identity(), (2.0, 2.0, 1.0))
    above = RigidTransform(UnitQuaternion.identity(), (2.0, 2.0, 4.6))
    kfs = []
    for i, k in enumerate(ramp):
        pts = k.truth.apply(k.body)
        kfs.append(Keyframe(i, k.truth, StampedPointCloud(pts, frame="world"), SpatialIndex(pts), k.covariances))
    low = below.apply(_prep(snapshot(world, below, spec, seed + 100)).points)
    kfs.append(Keyframe.create(len(kfs), below, StampedPointCloud(low, frame="world")))
    scan = StampedPointCloud(above.apply(_prep(snapshot(world, above, spec, seed + 101)).points), frame="world")
    dist = [float(np.linalg.norm(k.pose.translation - above.translation)) for k in kfs]
    nn = int(np.argmin(dist))
    chosen, scores = select_submap_keyframes(scan, kfs, 0.2, 0.5)
    return StaircaseSubmap(kfs[nn].id, dist[nn], jaccard(scan, kfs[nn], 0.5), [k.id for k in chosen], scores)


# ---------------------------------------------------------------------------
# observer convergence


@dataclass
class ObserverRun:
    initial: Dict[str, float]
    final: Dict[str, float]

    @property
    def ratios(self) -> Dict[str, float]:
        return {k: self.final[k] / self.initial[k] for k in self.initial}


def observer_convergence(motion: str = "static", seconds: float = 30.0, imu_rate: float = 100.0,
                         update_rate: float = 10.0, b_a=(0.1, -0.05, 0.02), b_w=(0.01, -0.02, 0.005),
                         p_err=(0.5, -0.3, 0.2), rot_err=(0.1, -0.1, 0.2), v_err=(0.2, 0.0, 0.0),
                         gains=None) -> ObserverRun:
    """Propagate a biased, noise-free IMU stream and correct with true poses.

    Errors are norms of pose, velocity and both bias estimates against truth,
    at the start and after ``seconds``.
    """
    from ..imu import ImuCalibration, debias
    from ..observer import ObserverGains, propagate, update
    from .sensors import ImuSpec

    gains = gains or ObserverGains()
    traj = tr.static((0.0, 0.0, 1.0), 0.0, seconds + 1.0) if motion == "static" else tr.sinusoidal(1.0, seconds + 1.0)
    spec = SensorSpec(DEFAULT_LIDAR, ImuSpec(rate=imu_rate, accel_bias=tuple(b_a), gyro_bias=tuple(b_w)))
    imu = simulate_imu(traj, spec, 0.0, seconds + 0.5 / imu_rate, seed=0)
    ba, bw = np.asarray(b_a, float), np.asarray(b_w, float)
    s0 = true_state(traj, 0.0)
    st = s0.replace(p=s0.p + np.asarray(p_err, float), v=s0.v + np.asarray(v_err, float),
                    q=s0.q * UnitQuaternion.from_rotvec(rot_err))

    def errors(s):
        truth = true_state(traj, s.t)
        return {"position": float(np.linalg.norm(s.p - truth.p)), "attitude": s.q.angle_to(truth.q),
                "velocity": float(np.linalg.norm(s.v - truth.v)), "accel_bias": float(np.linalg.norm(s.b_a - ba)),
                "gyro_bias": float(np.linalg.norm(s.b_w - bw))}

    first = errors(st)
    calib = ImuCalibration()
    every = int(round(imu_rate / update_rate))
    prev = None
    last_update = st.t
    for k, raw in enumerate(imu):
        if raw.t <= st.t:
            prev = raw
            continue
        st = propagate(st, debias(raw, st), None if prev is None else debias(prev, st), calib)
        prev = raw
        if k % every == 0:
            st = update(st, traj.pose(st.t), st.t - last_update, gains)
            last_update = st.t
    return ObserverRun(first, errors(st))
