"""Coarse-to-fine continuous-time motion correction.

The IMU stream is integrated into a coarse knot trajectory; every point then
gets its own pose from the closed-form constant-jerk / constant
angular-acceleration motion starting at the nearest preceding knot.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import InsufficientImuError, OutOfRangeError
from .geometry import (
    RigidTransform,
    StampedPointCloud,
    UnitQuaternion,
    pure,
    quat_mul,
    quat_normalize,
    quat_to_matrix,
)
from .imu import ImuCalibration, ImuSample, StateVector, integrate_discrete


@dataclass(frozen=True)
class CoarseTrajectory:
    times: np.ndarray
    states: tuple
    p: np.ndarray
    q: np.ndarray
    v: np.ndarray
    # per-interval terms, indexed by the interval's starting knot; last row is zero
    acc: np.ndarray
    gyro: np.ndarray
    jerk: np.ndarray
    alpha: np.ndarray

    @property
    def t_begin(self) -> float:
        return float(self.times[0])

    @property
    def t_end(self) -> float:
        return float(self.times[-1])

    def __len__(self):
        return len(self.times)


def build_coarse_trajectory(
    state0: StateVector,
    samples: Sequence[ImuSample],
    scan_end: float,
    calib: ImuCalibration = ImuCalibration(),
) -> CoarseTrajectory:
    """Integrate preprocessed samples from ``state0`` until just past ``scan_end``."""
    used = [s for s in samples if s.t >= state0.t]
    last = next((k for k, s in enumerate(used) if s.t >= scan_end), None)
    if last is None:
        latest = used[-1].t if used else state0.t
        raise InsufficientImuError(
            f"IMU coverage ends at {latest:.6f} s before scan end {scan_end:.6f} s "
            f"(gap {scan_end - latest:.6f} s)",
            gap=(latest, scan_end),
        )
    used = used[: last + 1]
    states = integrate_discrete(state0, used, calib)
    meas = list(used)
    if used[0].t > state0.t:
        states = [state0] + states
        meas = [used[0]] + meas

    g = calib.gravity_vector
    times = np.array([s.t for s in states])
    p = np.array([s.p for s in states])
    q = np.array([s.q.array for s in states])
    v = np.array([s.v for s in states])
    a_body = np.array([m.accel for m in meas])
    w_body = np.array([m.gyro for m in meas])
    acc = np.einsum("nij,nj->ni", quat_to_matrix(q), a_body) + g
    n = len(times)
    jerk = np.zeros((n, 3))
    alpha = np.zeros((n, 3))
    if n > 1:
        dt = np.diff(times)[:, None]
        jerk[:-1] = (acc[1:] - acc[:-1]) / dt
        alpha[:-1] = (w_body[1:] - w_body[:-1]) / dt
    return CoarseTrajectory(times, tuple(states), p, q, v, acc, w_body, jerk, alpha)


def query_poses(traj: CoarseTrajectory, t):
    """Vectorised pose lookup. Returns ``(positions (N,3), quaternions (N,4))``."""
    t = np.atleast_1d(np.asarray(t, dtype=float))
    bad = np.flatnonzero((t < traj.times[0]) | (t > traj.times[-1]))
    if bad.size:
        i = int(bad[0])
        raise OutOfRangeError(
            f"time {t[i]:.9f} outside trajectory span [{traj.t_begin:.9f}, {traj.t_end:.9f}]",
            point_index=i,
        )
    k = np.searchsorted(traj.times, t, side="right") - 1
    tau = (t - traj.times[k])[:, None]
    p = traj.p[k] + traj.v[k] * tau + 0.5 * traj.acc[k] * tau**2 + traj.jerk[k] * tau**3 / 6.0
    q0 = traj.q[k]
    q = q0 + 0.5 * quat_mul(q0, pure(traj.gyro[k])) * tau + 0.25 * quat_mul(q0, pure(traj.alpha[k])) * tau**2
    return p, quat_normalize(q)


def query_pose(traj: CoarseTrajectory, t: float) -> RigidTransform:
    p, q = query_poses(traj, [t])
    return RigidTransform(UnitQuaternion.from_array(q[0]), p[0])


def deskew(cloud: StampedPointCloud, traj: CoarseTrajectory) -> StampedPointCloud:
    """Place every robot-frame point in the world frame at its own timestamp."""
    if len(cloud) == 0:
        return cloud.with_points(cloud.points, "world")
    try:
        p, q = query_poses(traj, cloud.times)
    except OutOfRangeError as err:
        raise OutOfRangeError(f"point {err.point_index}: {err}", point_index=err.point_index) from err
    R = quat_to_matrix(q)
    world = np.einsum("nij,nj->ni", R, cloud.points) + p
    return cloud.with_points(world, "world")


def query_state(traj: CoarseTrajectory, t: float, template: StateVector) -> StateVector:
    """Full state at ``t``: pose and velocity from the knot motion, biases from ``template``."""
    p, q = query_poses(traj, [t])
    k = int(np.searchsorted(traj.times, t, side="right") - 1)
    tau = t - traj.times[k]
    v = traj.v[k] + traj.acc[k] * tau + 0.5 * traj.jerk[k] * tau**2
    return StateVector(p[0], UnitQuaternion.from_array(q[0]), v, template.b_a, template.b_w, t)
