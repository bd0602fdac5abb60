"""Log ingestion, clock synchronisation, trajectory/map export and ATE evaluation.

Formats
-------
scan log (binary, little-endian), one record per scan::

    uint32 point_count, float64 t_start, then point_count x (float32 x, y, z, t_rel)

IMU log (CSV, header optional)::

    t,ax,ay,az,gx,gy,gz

trajectory (TUM)::

    timestamp tx ty tz qx qy qz qw
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, List, Optional, Sequence

import numpy as np

from .errors import ContractViolation, InsufficientOverlapError, ParseError
from .geometry import RigidTransform, StampedPointCloud, UnitQuaternion, voxel_downsample
from .imu import ImuSample

SCAN_HEADER = struct.Struct("<Id")
POINT_DTYPE = np.dtype("<f4")
IMU_COLUMNS = ("t", "ax", "ay", "az", "gx", "gy", "gz")


@dataclass
class ClockSync:
    """Maps sensor timestamps onto the host clock; epochs are latched once."""

    host_t0: Optional[float] = None
    sensor_t0: Optional[float] = None

    @property
    def initialized(self) -> bool:
        return self.host_t0 is not None and self.sensor_t0 is not None

    def initialize(self, host_t0: float, sensor_t0: float):
        if self.initialized:
            raise ContractViolation("clock sync epochs are set exactly once")
        self.host_t0 = float(host_t0)
        self.sensor_t0 = float(sensor_t0)


def sync_timestamp(sync: ClockSync, sensor_t: float) -> float:
    if not sync.initialized:
        raise ContractViolation("clock sync used before initialization")
    if sync.host_t0 == sync.sensor_t0:
        return float(sensor_t)
    return sync.host_t0 + (sensor_t - sync.sensor_t0)


def _latch(sync: Optional[ClockSync], sensor_t: float) -> ClockSync:
    if sync is None:
        sync = ClockSync()
    if not sync.initialized:
        sync.initialize(sensor_t, sensor_t)
    return sync


# ---------------------------------------------------------------------------
# scan and IMU logs


def write_scan_log(path, scans: Iterable[StampedPointCloud]):
    with open(path, "wb") as fh:
        for scan in scans:
            fh.write(SCAN_HEADER.pack(len(scan), scan.t_start))
            rec = np.empty((len(scan), 4), dtype=POINT_DTYPE)
            rec[:, :3] = scan.points
            rec[:, 3] = scan.t_rel
            fh.write(rec.tobytes())


def read_scan_log(path, sync: Optional[ClockSync] = None, frame: str = "lidar") -> Iterator[StampedPointCloud]:
    """Stream scans; ``t_start`` is mapped through ``sync`` (latched on the first record)."""
    data = Path(path).read_bytes()
    pos = 0
    while pos < len(data):
        if pos + SCAN_HEADER.size > len(data):
            raise ParseError(f"{path}: truncated scan header at byte {pos}", offset=pos)
        n, t0 = SCAN_HEADER.unpack_from(data, pos)
        body = n * 4 * POINT_DTYPE.itemsize
        start = pos + SCAN_HEADER.size
        if start + body > len(data):
            raise ParseError(f"{path}: truncated scan record at byte {pos} ({n} points declared)", offset=pos)
        rec = np.frombuffer(data, dtype=POINT_DTYPE, count=4 * n, offset=start).reshape(n, 4)
        sync = _latch(sync, t0)
        yield StampedPointCloud(rec[:, :3].astype(float), rec[:, 3].astype(float), sync_timestamp(sync, t0), frame)
        pos = start + body


def write_imu_log(path, samples: Iterable[ImuSample]):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(IMU_COLUMNS)
        for s in samples:
            w.writerow([repr(float(v)) for v in (s.t, *s.accel, *s.gyro)])


def read_imu_log(path, sync: Optional[ClockSync] = None) -> Iterator[ImuSample]:
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or (lineno == 1 and row[0].strip() == "t"):
                continue
            if len(row) != 7:
                raise ParseError(f"{path}:{lineno}: expected 7 fields, got {len(row)}", line=lineno)
            try:
                vals = [float(v) for v in row]
            except ValueError as err:
                raise ParseError(f"{path}:{lineno}: {err}", line=lineno) from err
            sync = _latch(sync, vals[0])
            yield ImuSample(sync_timestamp(sync, vals[0]), vals[1:4], vals[4:7])


def merged_stream(scans: Iterable[StampedPointCloud], imu: Iterable[ImuSample]):
    """Interleave by arrival: a scan arrives at its last point's time, IMU at its stamp; IMU first on ties."""
    items = [(s.t, 0, k, s) for k, s in enumerate(imu)]
    items += [(c.t_end, 1, k, c) for k, c in enumerate(scans)]
    items.sort(key=lambda x: x[:3])
    for _, kind, _, obj in items:
        yield ("imu" if kind == 0 else "scan"), obj


# ---------------------------------------------------------------------------
# trajectories


@dataclass
class TrajectoryRecord:
    t: np.ndarray = field(default_factory=lambda: np.zeros(0))
    p: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    q: np.ndarray = field(default_factory=lambda: np.zeros((0, 4)))  # w, x, y, z

    def __len__(self):
        return len(self.t)

    @classmethod
    def from_poses(cls, times: Sequence[float], poses: Sequence[RigidTransform]) -> "TrajectoryRecord":
        return cls(
            np.asarray(times, dtype=float),
            np.array([T.translation for T in poses]).reshape(-1, 3),
            np.array([T.rotation.array for T in poses]).reshape(-1, 4),
        )

    def poses(self) -> List[RigidTransform]:
        return [RigidTransform(UnitQuaternion.from_array(q), p) for p, q in zip(self.p, self.q)]


def format_tum_line(t: float, p, q) -> str:
    w, x, y, z = q
    vals = " ".join(f"{v:.9g}" for v in (*p, x, y, z, w))
    return f"{t:.6f} {vals}"


def export_trajectory(traj: TrajectoryRecord, path=None) -> str:
    if len(traj) == 0:
        raise ContractViolation("cannot export an empty trajectory")
    text = "".join(format_tum_line(t, p, q) + "\n" for t, p, q in zip(traj.t, traj.p, traj.q))
    if path is not None:
        Path(path).write_text(text)
    return text


def parse_tum(text: str, source: str = "<tum>") -> TrajectoryRecord:
    rows = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 8:
            raise ParseError(f"{source}:{lineno}: expected 8 fields, got {len(parts)}", line=lineno)
        try:
            rows.append([float(v) for v in parts])
        except ValueError as err:
            raise ParseError(f"{source}:{lineno}: {err}", line=lineno) from err
    if not rows:
        return TrajectoryRecord()
    a = np.array(rows)
    if np.any(np.diff(a[:, 0]) <= 0):
        bad = int(np.flatnonzero(np.diff(a[:, 0]) <= 0)[0]) + 2
        raise ParseError(f"{source}: timestamps not increasing near pose {bad}", line=bad)
    return TrajectoryRecord(a[:, 0], a[:, 1:4], a[:, [7, 4, 5, 6]])


def read_tum(path) -> TrajectoryRecord:
    return parse_tum(Path(path).read_text(), str(path))


def export_map(clouds: Sequence, path=None, leaf: float = 0.1) -> np.ndarray:
    """Concatenate keyframe clouds, voxelise at ``leaf`` and write ``x y z`` lines."""
    if not clouds:
        raise ContractViolation("cannot export an empty map")
    clouds = [c.cloud if hasattr(c, "cloud") else c for c in clouds]
    merged = StampedPointCloud.concatenate(clouds, frame="world")
    pts = voxel_downsample(merged, leaf).points
    if path is not None:
        with open(path, "w") as fh:
            for x, y, z in pts:
                fh.write(f"{x:.6f} {y:.6f} {z:.6f}\n")
    return pts


# ---------------------------------------------------------------------------
# evaluation


def associate(t_est, t_ref, max_dt: float = 0.02):
    """Greedy nearest-timestamp pairs within ``max_dt``; each stamp used once."""
    t_est = np.asarray(t_est)
    t_ref = np.asarray(t_ref)
    if len(t_est) == 0 or len(t_ref) == 0:
        return np.zeros(0, dtype=int), np.zeros(0, dtype=int)
    j = np.clip(np.searchsorted(t_ref, t_est), 1, len(t_ref) - 1) if len(t_ref) > 1 else np.zeros(len(t_est), int)
    cand = []
    for i, jj in enumerate(j):
        for k in {jj - 1, jj} if len(t_ref) > 1 else {0}:
            dt = abs(t_est[i] - t_ref[k])
            if dt <= max_dt:
                cand.append((dt, i, k))
    cand.sort()
    used_e, used_r, pairs = set(), set(), []
    for dt, i, k in cand:
        if i in used_e or k in used_r:
            continue
        used_e.add(i)
        used_r.add(k)
        pairs.append((i, k))
    pairs.sort()
    if not pairs:
        return np.zeros(0, dtype=int), np.zeros(0, dtype=int)
    a = np.array(pairs)
    return a[:, 0], a[:, 1]


def umeyama(src, dst, with_scale: bool = False):
    """Least-squares ``(R, t, s)`` with ``dst ≈ s R src + t``."""
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    mu_s, mu_d = src.mean(0), dst.mean(0)
    xs, xd = src - mu_s, dst - mu_d
    cov = xd.T @ xs / len(src)
    U, D, Vt = np.linalg.svd(cov)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1
    R = U @ S @ Vt
    s = np.trace(np.diag(D) @ S) / xs.var(0).sum() if with_scale else 1.0
    t = mu_d - s * R @ mu_s
    return R, t, s


def evaluate_ate(estimate: TrajectoryRecord, truth: TrajectoryRecord, max_dt: float = 0.02) -> dict:
    """Translational ATE after rigid (scale-free) Umeyama alignment."""
    ie, it = associate(estimate.t, truth.t, max_dt)
    if len(ie) < 3:
        raise InsufficientOverlapError(f"only {len(ie)} associated poses (need 3)")
    est = estimate.p[ie]
    ref = truth.p[it]
    R, t, _ = umeyama(est, ref)
    err = np.linalg.norm(est @ R.T + t - ref, axis=1)
    # the identity is also a rigid alignment; it wins when the SVD only adds rounding
    raw = np.linalg.norm(est - ref, axis=1)
    if raw @ raw <= err @ err:
        err = raw
    return {
        "rmse": float(np.sqrt(np.mean(err**2))),
        "mean": float(err.mean()),
        "max": float(err.max()),
        "pairs": int(len(ie)),
    }
