"""Odometry loop: IMU callback, LiDAR callback, submap builder and mapper hand-off.

Single-threaded mode runs the submap builder and the mapper inline. Threaded
mode moves both to worker threads; a new submap is still adopted at the scan
boundary after the one that requested it, so odometry output is identical in
both modes as long as the mapper publishes nothing (it only publishes after a
loop closure).
"""

from __future__ import annotations

import logging
import math
import time
from collections import deque
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence

import numpy as np

from .config import PipelineConfig
from .deskew import build_coarse_trajectory, deskew, query_state
from .errors import (
    ContractViolation,
    DegenerateCloudError,
    InsufficientCorrespondenceError,
    InsufficientImuError,
    OutOfRangeError,
    PipelineError,
    RejectedSampleError,
    StreamOrderError,
)
from .geometry import (
    RigidTransform,
    SpatialIndex,
    StampedPointCloud,
    UnitQuaternion,
    box_filter,
    transform_cloud,
    voxel_downsample,
)
from .gicp import GicpSettings, SparsityTracker, estimate_covariances, register, rotate_covariances, update_sparsity
from .imu import ImuCalibration, ImuSample, StateVector, step_state, transfer_to_body
from .keyframes import (
    ConnectivityMatrix,
    Keyframe,
    KeyframeThresholds,
    SpaciousnessTracker,
    Submap,
    build_submap,
    global_degeneracy,
    select_submap_keyframes,
    should_insert_keyframe,
    update_connectivity,
    update_spaciousness,
)
from .mapping import FrameOffset, KeyframeMessage, LoopSettings, Mapper, MapperSettings, MapUpdate
from .observer import ObserverGains, update as observer_update

log = logging.getLogger(__name__)


@dataclass
class ScanRecord:
    index: int
    t: float  # scan end, where the pose is measured
    state: Optional[StateVector]  # corrected state at ``t`` (odometry frame)
    map_pose: Optional[RigidTransform]
    keyframe: Optional[int] = None
    reasons: tuple = ()
    degeneracy: float = math.nan
    sparsity: float = math.nan
    spaciousness: float = math.nan
    correspondences: int = 0
    fitness: float = math.nan
    submap: tuple = ()
    skipped: Optional[str] = None
    duration: float = 0.0


@dataclass
class OdometryLoopState:
    state: Optional[StateVector] = None  # high-rate state at the latest IMU time
    anchor: Optional[StateVector] = None  # corrected state at the latest measurement time
    last_correction: Optional[float] = None
    spaciousness: SpaciousnessTracker = field(default_factory=SpaciousnessTracker)
    sparsity: SparsityTracker = field(default_factory=SparsityTracker)
    submap: Optional[Submap] = None
    keyframes: Dict[int, Keyframe] = field(default_factory=dict)
    connectivity: ConnectivityMatrix = field(default_factory=ConnectivityMatrix)
    offset: FrameOffset = field(default_factory=FrameOffset)


def _calibration(cfg: PipelineConfig) -> ImuCalibration:
    s = cfg.sensor
    return ImuCalibration(UnitQuaternion.from_rotvec(s.imu_rotvec), np.asarray(s.imu_lever_arm), s.gravity)


def gravity_aligned_attitude(mean_accel) -> UnitQuaternion:
    """Roll and pitch that put the measured specific force on world +z; yaw zero."""
    fx, fy, fz = np.asarray(mean_accel, dtype=float)
    roll = math.atan2(fy, fz)
    pitch = math.atan2(-fx, math.hypot(fy, fz))
    return UnitQuaternion.from_axis_angle((0, 1, 0), pitch) * UnitQuaternion.from_axis_angle((1, 0, 0), roll)


class Pipeline:
    def __init__(self, config: PipelineConfig = PipelineConfig(), initial_state: Optional[StateVector] = None,
                 single_thread: Optional[bool] = None):
        self.cfg = config
        self.single_thread = config.run.single_thread if single_thread is None else single_thread
        self.calib = _calibration(config)
        s = config.sensor
        self.lidar_extrinsic = RigidTransform(UnitQuaternion.from_rotvec(s.lidar_rotvec), s.lidar_translation)
        a = config.adaptive
        self.loop = OdometryLoopState(
            spaciousness=SpaciousnessTracker(None, a.alpha, a.beta),
            sparsity=SparsityTracker(None, a.alpha, a.beta, a.K),
        )
        g = config.gicp
        self.gicp = GicpSettings(max_iterations=g.max_iterations, step_tolerance=g.step_tolerance,
                                 min_correspondences=g.min_correspondences)
        k = config.keyframe
        self.thresholds = KeyframeThresholds(k.degeneracy_threshold, k.translation, math.radians(k.rotation_deg))
        o = config.observer
        self.gains = ObserverGains(o.g1, o.g2, o.g3, o.g4, o.g5)
        m = config.mapping
        self.mapper: Optional[Mapper] = None
        if m.enabled:
            self.mapper = Mapper(MapperSettings(
                m.connective_threshold, m.zeta, m.loop_closure,
                LoopSettings(m.loop_radius, m.loop_fitness, m.loop_exclude_recent, m.loop_max_corr, m.loop_min_overlap),
            ))

        self._raw: deque = deque()  # raw IMU samples not older than the anchor's predecessor
        self._prev_raw: Optional[ImuSample] = None
        self._edge: Optional[ImuSample] = None  # robot-frame sample at the high-rate state's time
        self._pending_scan: Optional[tuple] = None
        self._scan_count = 0
        self._last_scan_start = -math.inf
        self._submap_job = None  # Future or completed Submap, adopted at the next scan boundary
        self._submap_age = 0
        self._submap_dirty = False
        self._retransform: Dict[int, RigidTransform] = {}  # keyframe id -> target odometry pose
        self._mapper_jobs: deque = deque()
        self.records: List[ScanRecord] = []
        self.imu_states: List[StateVector] = []
        self.map_updates: List[MapUpdate] = []
        self._pool_submap = self._pool_mapper = None
        if not self.single_thread:
            self._pool_submap = ThreadPoolExecutor(1, thread_name_prefix="submap")
            self._pool_mapper = ThreadPoolExecutor(1, thread_name_prefix="mapper")
        if initial_state is not None:
            self.loop.anchor = initial_state
            self.loop.state = initial_state

    # ------------------------------------------------------------------ IMU
    @property
    def initialized(self) -> bool:
        return self.loop.anchor is not None

    def _body(self, raw: ImuSample, prev: Optional[ImuSample], state: StateVector) -> ImuSample:
        """Debias in the IMU frame with robot-frame biases, then move to the robot frame."""
        Rc = self.calib.rotation.as_matrix()
        ba, bw = Rc.T @ state.b_a, Rc.T @ state.b_w
        cur = ImuSample(raw.t, raw.accel - ba, raw.gyro - bw)
        pre = ImuSample(prev.t, prev.accel - ba, prev.gyro - bw) if prev is not None else None
        return transfer_to_body(cur, self.calib, pre)

    def _body_series(self, samples: Sequence[ImuSample], state: StateVector, before: Optional[ImuSample] = None):
        out = []
        prev = before
        for s in samples:
            out.append(self._body(s, prev, state))
            prev = s
        return out

    def on_imu(self, sample: ImuSample) -> Optional[StateVector]:
        """Buffer a raw sample and, once initialised, propagate the high-rate state."""
        if self._prev_raw is not None and sample.t <= self._prev_raw.t:
            raise StreamOrderError(f"IMU sample at {sample.t} does not follow {self._prev_raw.t}")
        if not sample.is_finite():
            raise RejectedSampleError(f"non-finite IMU sample at t={sample.t}")
        prev_raw = self._prev_raw
        self._prev_raw = sample
        self._raw.append(sample)
        out = None
        st = self.loop.state
        if st is not None and sample.t > st.t:
            cur = self._body(sample, prev_raw, st)
            if self._edge is None:
                self._edge = self._interp_body(st.t, st) or cur
            st = step_state(st, self._edge, cur, self.calib.gravity_vector)
            self._edge = cur
            self.loop.state = st
            self.imu_states.append(st)
            out = st
        if self._pending_scan is not None and sample.t >= self._pending_scan[1]:
            cloud, _ = self._pending_scan
            self._pending_scan = None
            self._process_scan(cloud)
        return out

    def _before(self, raw: ImuSample) -> Optional[ImuSample]:
        prev = None
        for s in self._raw:
            if s.t >= raw.t:
                break
            prev = s
        return prev

    def _interp_body(self, t: float, state: StateVector) -> Optional[ImuSample]:
        """Robot-frame sample linearly interpolated at ``t`` from the bracketing raw samples."""
        prev = nxt = None
        for s in self._raw:
            if s.t <= t:
                prev = s
            else:
                nxt = s
                break
        if prev is None:
            return None
        if prev.t == t or nxt is None:
            b = self._body(prev, self._before(prev), state)
            return ImuSample(t, b.accel, b.gyro)
        w = (t - prev.t) / (nxt.t - prev.t)
        bp = self._body(prev, self._before(prev), state)
        bn = self._body(nxt, prev, state)
        return ImuSample(t, (1 - w) * bp.accel + w * bn.accel, (1 - w) * bp.gyro + w * bn.gyro)

    def _prune_imu(self):
        t = self.loop.anchor.t
        while len(self._raw) > 2 and self._raw[1].t <= t:
            self._raw.popleft()

    # ---------------------------------------------------------------- scans
    def on_scan(self, cloud: StampedPointCloud) -> Optional[ScanRecord]:
        """Process a scan, or defer it until IMU data covers its end."""
        if cloud.t_start <= self._last_scan_start:
            raise StreamOrderError(f"scan at {cloud.t_start} does not follow {self._last_scan_start}")
        if self._pending_scan is not None:
            pending, t_end = self._pending_scan
            raise PipelineError(
                f"scan {self._scan_count} still lacks IMU coverage through {t_end:.6f} s",
                scan_index=self._scan_count, stage="imu-coverage",
            )
        self._last_scan_start = cloud.t_start
        t_end = cloud.t_end
        if self._prev_raw is None or self._prev_raw.t < t_end:
            self._pending_scan = (cloud, t_end)
            return None
        return self._process_scan(cloud)

    def finish(self):
        """Flush: a still-deferred scan is an error; wait for background work."""
        if self._pending_scan is not None:
            _, t_end = self._pending_scan
            self._pending_scan = None
            raise PipelineError(f"IMU stream ends before scan {self._scan_count} end {t_end:.6f} s",
                                scan_index=self._scan_count, stage="imu-coverage")
        self._drain_mapper(wait=True)

    def close(self):
        for pool in (self._pool_submap, self._pool_mapper):
            if pool is not None:
                pool.shutdown(wait=True)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    # ------------------------------------------------------------------------
    def _initialize(self, cloud: StampedPointCloud):
        """Gravity-aligned rest state at the first scan's start."""
        before = [s for s in self._raw if s.t <= cloud.t_start] or [self._raw[0]]
        f = np.mean([self._body(s, None, StateVector()).accel for s in before], axis=0)
        self._set_anchor(StateVector(q=gravity_aligned_attitude(f), t=cloud.t_start))

    def _process_scan(self, cloud: StampedPointCloud) -> ScanRecord:
        idx = self._scan_count
        self._scan_count += 1
        tic = time.perf_counter()
        try:
            rec = self._scan_body(idx, cloud)
        except PipelineError:
            raise
        except (ContractViolation, OutOfRangeError, InsufficientImuError) as err:
            raise PipelineError(f"scan {idx}: {err}", scan_index=idx, stage=type(err).__name__) from err
        rec.duration = time.perf_counter() - tic
        self.records.append(rec)
        return rec

    def _adopt_submap(self):
        job = self._submap_job
        if job is None:
            return
        self._submap_job = None
        self.loop.submap = job.result() if isinstance(job, Future) else job
        self._submap_age = 0

    def _request_submap(self, scan_world: StampedPointCloud):
        kfs = tuple(self.loop.keyframes[k] for k in sorted(self.loop.keyframes))
        sm = self.cfg.submap
        if self._pool_submap is None:
            self._submap_job = _build_submap(scan_world, kfs, sm.jaccard_threshold, sm.corr_dist)
        else:
            self._submap_job = self._pool_submap.submit(_build_submap, scan_world, kfs, sm.jaccard_threshold,
                                                        sm.corr_dist)

    def _scan_body(self, idx: int, raw_cloud: StampedPointCloud) -> ScanRecord:
        L = self.loop
        self._drain_mapper(wait=False)
        self._adopt_submap()
        self._service_retransforms()

        if not self.initialized:
            self._initialize(raw_cloud)

        # preprocessing, in the robot frame
        cloud = transform_cloud(raw_cloud, self.lidar_extrinsic, "robot")
        if self.cfg.preprocess.box_filter > 0:
            cloud = box_filter(cloud, self.cfg.preprocess.box_filter)
        if self.cfg.preprocess.voxel_leaf > 0:
            cloud = voxel_downsample(cloud, self.cfg.preprocess.voxel_leaf)
        anchor = L.anchor
        t_end = raw_cloud.t_end
        if raw_cloud.t_start < anchor.t - 1e-9:
            raise PipelineError(f"scan {idx} starts before the current anchor state", idx, "deskew")
        if len(cloud) < self.cfg.gicp.k_neighbors + 1:
            return self._skip(idx, t_end, "too few points after filtering", anchor)

        # discrete integration and continuous-time correction
        samples = [s for s in self._raw if s.t > anchor.t]
        seed = self._interp_body(anchor.t, anchor)
        body = self._body_series(samples, anchor, self._before(samples[0]) if samples else None)
        traj = build_coarse_trajectory(anchor, ([seed] if seed is not None else []) + body, t_end, self.calib)
        world = deskew(cloud, traj)
        predicted = query_state(traj, t_end, anchor)

        # adaptive parameters
        index = SpatialIndex(world.points)
        L.spaciousness = update_spaciousness(L.spaciousness, cloud)
        L.sparsity = update_sparsity(L.sparsity, world, index)
        z, m = L.sparsity.z, L.spaciousness.m
        max_corr = self.cfg.adaptive.fixed_max_corr or z
        try:
            cov = estimate_covariances(world, self.cfg.gicp.k_neighbors, self.cfg.gicp.epsilon, index)
        except DegenerateCloudError as err:
            return self._skip(idx, t_end, str(err), predicted)

        rec = ScanRecord(idx, t_end, None, None, sparsity=z, spaciousness=m)
        if not L.keyframes:
            # bootstrap: the first scan defines the map. A self-registration matches every point
            # exactly and understates d, so the keyframe's reference value is taken from the
            # first scan registered against it instead.
            kf = Keyframe(0, predicted.pose, world, index, cov, math.nan)
            res = register(world, cov, kf, RigidTransform(), max_corr, self.gicp)
            d = global_degeneracy(res.H_tt, m, z)
            self._insert_keyframe(kf, world)
            rec.keyframe, rec.reasons, rec.degeneracy = 0, ("bootstrap",), d
            rec.correspondences, rec.fitness = res.correspondences, res.fitness
            self._finish_scan(rec, predicted, predicted.pose, world, t_end)
            return rec

        if L.submap is None:
            self._request_submap(world)
            self._adopt_submap()
        try:
            res = register(world, cov, L.submap, predicted.pose, max_corr, self.gicp)
        except InsufficientCorrespondenceError as err:
            log.warning("scan %d: registration skipped (%s)", idx, err)
            return self._skip(idx, t_end, f"insufficient correspondences ({err.count})", predicted)
        rec.submap = L.submap.keyframe_ids
        rec.correspondences, rec.fitness = res.correspondences, res.fitness
        measured = res.pose
        d = global_degeneracy(res.H_tt, m, z)
        rec.degeneracy = d

        # keyframing
        last = L.keyframes[max(L.keyframes)]
        if math.isnan(last.degeneracy):
            L.keyframes[last.id] = replace(last, degeneracy=d)
        world_c = transform_cloud(world, res.correction)
        kfs = [L.keyframes[k] for k in sorted(L.keyframes)]
        insert, reasons = should_insert_keyframe(measured, d, kfs, self.thresholds)
        if insert:
            kid = max(L.keyframes) + 1
            kf = Keyframe(kid, measured, world_c, SpatialIndex(world_c.points),
                          rotate_covariances(cov, res.correction.R), d)
            self._insert_keyframe(kf, world_c)
            rec.keyframe, rec.reasons = kid, reasons

        self._finish_scan(rec, predicted, measured, world_c, t_end)
        return rec

    def _finish_scan(self, rec, predicted, measured, world_c, t_end):
        L = self.loop
        dt_plus = t_end - L.last_correction if L.last_correction is not None else self._period_hint(t_end)
        corrected = observer_update(predicted, measured, max(dt_plus, 1e-6), self.gains)
        self._set_anchor(corrected)
        L.last_correction = t_end
        rec.state = corrected
        rec.map_pose = L.offset.to_map(corrected.pose)
        self._submap_age += 1
        if self._submap_dirty or self._submap_age >= self.cfg.submap.refresh_scans or L.submap is None:
            self._submap_dirty = False
            self._request_submap(world_c)

    def _period_hint(self, t_end):
        return max(t_end - self._last_scan_start, 1e-3)

    def _skip(self, idx, t_end, why, predicted: StateVector) -> ScanRecord:
        """Propagate-only path: the uncorrected state at scan end becomes the new anchor."""
        log.info("scan %d skipped: %s", idx, why)
        if predicted.t != t_end:
            predicted = self._predict_to(t_end)
        self._set_anchor(predicted)
        return ScanRecord(idx, t_end, predicted, self.loop.offset.to_map(predicted.pose), skipped=why)

    def _predict_to(self, t_end) -> StateVector:
        anchor = self.loop.anchor
        samples = [s for s in self._raw if s.t > anchor.t]
        seed = self._interp_body(anchor.t, anchor)
        body = self._body_series(samples, anchor, self._before(samples[0]) if samples else None)
        traj = build_coarse_trajectory(anchor, ([seed] if seed is not None else []) + body, t_end, self.calib)
        return query_state(traj, t_end, anchor)

    def _set_anchor(self, st: StateVector):
        """Make ``st`` the anchor and re-propagate the high-rate state through newer samples."""
        L = self.loop
        L.anchor = st
        cur = st
        edge = self._interp_body(st.t, st)
        later = [s for s in self._raw if s.t > st.t]
        if later:
            body = self._body_series(later, st, self._before(later[0]))
            prev = edge if edge is not None else body[0]
            for b in body:
                cur = step_state(cur, prev, b, self.calib.gravity_vector)
                prev = b
            edge = prev
        L.state = cur
        self._edge = edge
        self._prune_imu()

    # -------------------------------------------------------------- keyframes
    def _insert_keyframe(self, kf: Keyframe, world_c: StampedPointCloud):
        L = self.loop
        L.connectivity = update_connectivity(L.connectivity, kf, list(L.keyframes.values()), self.cfg.submap.corr_dist)
        L.keyframes[kf.id] = kf
        self._submap_dirty = True
        if self.mapper is None:
            return
        inv = kf.pose.inverse()
        msg = KeyframeMessage(kf.id, kf.pose, inv.apply(kf.points), rotate_covariances(kf.covariances, inv.R),
                              L.connectivity)
        if self._pool_mapper is None:
            self._mapper_jobs.append(self.mapper.process(msg))
        else:
            self._mapper_jobs.append(self._pool_mapper.submit(self.mapper.process, msg))

    def _drain_mapper(self, wait: bool):
        while self._mapper_jobs:
            job = self._mapper_jobs[0]
            if isinstance(job, Future):
                if not wait and not job.done():
                    return
                upd = job.result()
            else:
                upd = job
            self._mapper_jobs.popleft()
            if upd is not None:
                self.on_map_update(upd)

    def on_map_update(self, update: MapUpdate):
        """Adopt the mapper's offset; keyframes move in the odometry frame, the live state does not."""
        L = self.loop
        if update.offset.transform.almost_equal(L.offset.transform, 1e-12) and all(
            k not in L.keyframes or L.offset.to_map(L.keyframes[k].pose).almost_equal(p, 1e-12)
            for k, p in update.map_poses.items()
        ):
            return
        self.map_updates.append(update)
        L.offset = update.offset
        latest = max(k for k in update.map_poses if k in L.keyframes)
        members = set(L.submap.keyframe_ids) if L.submap is not None else set()
        for k, p in update.map_poses.items():
            if k not in L.keyframes or k == latest:
                continue
            self._retransform[k] = update.offset.to_odom(p)
        # submap members first, the rest a few per scan
        for k in sorted(members & set(self._retransform)):
            self._retransform_one(k)
        self._submap_dirty = True

    def _retransform_one(self, k: int):
        target = self._retransform.pop(k)
        kf = self.loop.keyframes[k]
        self.loop.keyframes[k] = kf.transformed(target @ kf.pose.inverse())

    def _service_retransforms(self):
        for k in sorted(self._retransform)[: self.cfg.submap.retransform_per_scan]:
            self._retransform_one(k)

    @property
    def pending_retransforms(self) -> int:
        return len(self._retransform)

    # --------------------------------------------------------------- outputs
    def trajectory(self, frame: str = "map"):
        """``(times, poses)`` of every processed scan."""
        recs = [r for r in self.records if r.state is not None]
        poses = [r.map_pose if frame == "map" else r.state.pose for r in recs]
        return [r.t for r in recs], poses

    def keyframe_poses(self, frame: str = "map"):
        L = self.loop
        ids = sorted(L.keyframes)
        if frame == "map":
            return ids, [L.offset.to_map(L.keyframes[k].pose) for k in ids]
        return ids, [L.keyframes[k].pose for k in ids]

    def keyframe_clouds(self, frame: str = "map"):
        """``(ids, poses, body_points)``: each keyframe cloud in its own robot frame."""
        ids, poses = self.keyframe_poses(frame)
        body = [self.loop.keyframes[k].pose.inverse().apply(self.loop.keyframes[k].points) for k in ids]
        return ids, poses, body


def _build_submap(scan_world, keyframes, threshold, corr_dist) -> Submap:
    chosen, _ = select_submap_keyframes(scan_world, keyframes, threshold, corr_dist)
    return build_submap(chosen)
