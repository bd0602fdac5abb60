"""Sensor models: spinning LiDAR with per-column firing times and a biased, noisy IMU."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Tuple

import numpy as np

from ..errors import ContractViolation, EmptyScanError
from ..geometry import RigidTransform, StampedPointCloud
from ..imu import STANDARD_GRAVITY, ImuCalibration, ImuSample
from .trajectory import AnalyticTrajectory
from .world import World


@dataclass(frozen=True)
class LidarSpec:
    channels: int = 16
    columns: int = 256
    spin_rate: float = 10.0
    vertical_fov: Tuple[float, float] = (-15.0, 15.0)  # degrees
    min_range: float = 0.3
    max_range: float = 40.0
    range_noise: float = 0.0
    extrinsic: RigidTransform = field(default_factory=RigidTransform.identity)  # lidar -> robot
    clock_offset: float = 0.0

    def __post_init__(self):
        if self.channels < 1 or self.columns < 1:
            raise ContractViolation("lidar needs at least one channel and one column")
        if not self.spin_rate > 0:
            raise ContractViolation("spin rate must be positive")
        if not 0 <= self.min_range < self.max_range:
            raise ContractViolation("invalid lidar range limits")
        if self.range_noise < 0:
            raise ContractViolation("range noise must be non-negative")

    @property
    def period(self) -> float:
        return 1.0 / self.spin_rate

    def beam_directions(self) -> np.ndarray:
        """Unit beams in the lidar frame, shape (columns, channels, 3)."""
        lo, hi = np.radians(self.vertical_fov)
        elev = np.linspace(lo, hi, self.channels) if self.channels > 1 else np.array([(lo + hi) / 2])
        az = 2 * np.pi * np.arange(self.columns) / self.columns
        ce, se = np.cos(elev), np.sin(elev)
        d = np.empty((self.columns, self.channels, 3))
        d[..., 0] = np.cos(az)[:, None] * ce[None, :]
        d[..., 1] = np.sin(az)[:, None] * ce[None, :]
        d[..., 2] = se[None, :]
        return d

    def column_times(self) -> np.ndarray:
        return self.period * np.arange(self.columns) / self.columns


@dataclass(frozen=True)
class ImuSpec:
    rate: float = 200.0
    accel_noise: float = 0.0
    gyro_noise: float = 0.0
    accel_bias: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    gyro_bias: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    calibration: ImuCalibration = field(default_factory=ImuCalibration)
    clock_offset: float = 0.0

    def __post_init__(self):
        if not self.rate > 0:
            raise ContractViolation("IMU rate must be positive")
        if self.accel_noise < 0 or self.gyro_noise < 0:
            raise ContractViolation("noise levels must be non-negative")


@dataclass(frozen=True)
class SensorSpec:
    lidar: LidarSpec = field(default_factory=LidarSpec)
    imu: ImuSpec = field(default_factory=ImuSpec)

    @classmethod
    def ouster_os1_32(cls, **imu_kw) -> "SensorSpec":
        return cls(LidarSpec(channels=32, columns=512, spin_rate=10.0, vertical_fov=(-22.5, 22.5),
                             max_range=120.0), ImuSpec(rate=100.0, **imu_kw))

    def noiseless(self) -> "SensorSpec":
        lid = self.lidar
        return SensorSpec(
            LidarSpec(lid.channels, lid.columns, lid.spin_rate, lid.vertical_fov, lid.min_range, lid.max_range,
                      0.0, lid.extrinsic, lid.clock_offset),
            ImuSpec(self.imu.rate, 0.0, 0.0, (0.0, 0.0, 0.0), (0.0, 0.0, 0.0), self.imu.calibration,
                    self.imu.clock_offset),
        )


@dataclass(frozen=True)
class SimulatedScan:
    cloud: StampedPointCloud  # lidar frame, motion distorted
    world_points: np.ndarray  # noiseless hits, world frame
    primitive: np.ndarray  # index of the primitive hit by each point


def _rng(seed):
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def simulate_scan(world: World, traj: AnalyticTrajectory, spec: SensorSpec, t_start: float,
                  seed=None) -> SimulatedScan:
    """Cast every beam from the true sensor pose at its column's firing time."""
    lid = spec.lidar
    if t_start < -1e-12 or t_start + lid.period > traj.duration + 1e-9:
        raise ContractViolation(f"trajectory {traj.name} does not cover scan [{t_start}, {t_start + lid.period}]")
    t_col = lid.column_times()
    times = t_start + t_col
    R = traj.rotation(times)
    p = traj.position(times)
    E = lid.extrinsic
    beams = lid.beam_directions()
    dirs = np.einsum("cij,cnj->cni", R @ E.R, beams)
    origins = p + R @ E.t
    o = np.repeat(origins, lid.channels, axis=0)
    d = dirs.reshape(-1, 3)
    r, which = world.cast(o, d, lid.max_range)
    hit = np.isfinite(r) & (r >= lid.min_range)
    if not hit.any():
        raise EmptyScanError(f"no beam hit anything at t={t_start}")
    r_true = r[hit]
    r_meas = r_true
    if lid.range_noise > 0:
        r_meas = r_true + _rng(seed).normal(0.0, lid.range_noise, size=r_true.shape)
    local = beams.reshape(-1, 3)[hit] * r_meas[:, None]
    t_rel = np.repeat(t_col, lid.channels)[hit]
    world_pts = o[hit] + d[hit] * r_true[:, None]
    cloud = StampedPointCloud(local, t_rel, t_start + lid.clock_offset, "lidar")
    return SimulatedScan(cloud, world_pts, which[hit])


def imu_times(spec: SensorSpec, t0: float, t1: float) -> np.ndarray:
    n = int(math.floor((t1 - t0) * spec.imu.rate + 1e-9))
    return t0 + np.arange(n + 1) / spec.imu.rate


def ideal_imu(traj: AnalyticTrajectory, times, calib: ImuCalibration = ImuCalibration()):
    """Noise- and bias-free accelerometer and gyro readings at ``times``."""
    times = np.asarray(times, dtype=float)
    R = traj.rotation(times)
    g = np.array([0.0, 0.0, -calib.gravity])
    # specific force in the robot frame
    f = np.einsum("nji,nj->ni", R, traj.acceleration(times) - g)
    w = traj.angular_velocity(times)
    arm = calib.lever_arm
    if np.any(arm != 0):
        w_dot = traj.angular_acceleration(times)
        f = f - np.cross(w_dot, arm) - np.cross(w, np.cross(w, arm))
    Rc = calib.rotation.as_matrix()
    return f @ Rc, w @ Rc  # rows times Rc == Rc^T applied per row


def simulate_imu(traj: AnalyticTrajectory, spec: SensorSpec, t0: float, t1: float, seed=None) -> List[ImuSample]:
    if not t1 > t0:
        raise ContractViolation("simulate_imu needs t1 > t0")
    imu = spec.imu
    times = imu_times(spec, t0, t1)
    acc, gyr = ideal_imu(traj, times, imu.calibration)
    acc = acc + np.asarray(imu.accel_bias)
    gyr = gyr + np.asarray(imu.gyro_bias)
    if imu.accel_noise > 0 or imu.gyro_noise > 0:
        rng = _rng(seed)
        acc = acc + rng.normal(0.0, imu.accel_noise, acc.shape)
        gyr = gyr + rng.normal(0.0, imu.gyro_noise, gyr.shape)
    stamps = times + imu.clock_offset
    return [ImuSample(t, a, w) for t, a, w in zip(stamps, acc, gyr)]


__all__ = [
    "LidarSpec", "ImuSpec", "SensorSpec", "SimulatedScan", "simulate_scan", "simulate_imu", "ideal_imu",
    "imu_times", "STANDARD_GRAVITY",
]
