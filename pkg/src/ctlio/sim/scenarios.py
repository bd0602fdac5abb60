"""Named scenario presets and the end-to-end driver used by tests and the CLI."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional

import numpy as np

from ..config import PipelineConfig
from ..errors import ContractViolation
from ..geometry import UnitQuaternion
from ..imu import ImuSample, StateVector
from ..io import TrajectoryRecord, evaluate_ate, merged_stream
from . import trajectory as tr
from . import world as wd
from .sensors import ImuSpec, LidarSpec, SensorSpec, SimulatedScan, simulate_imu, simulate_scan

DEFAULT_LIDAR = LidarSpec(channels=32, columns=360, vertical_fov=(-22.5, 22.5), range_noise=0.005)
DEFAULT_IMU = ImuSpec(rate=200.0, accel_noise=0.01, gyro_noise=0.001)


@dataclass(frozen=True)
class Scenario:
    name: str
    world: Callable[[], wd.World]
    trajectory: Callable[[], tr.AnalyticTrajectory]
    description: str = ""
    spec: SensorSpec = field(default_factory=lambda: SensorSpec(DEFAULT_LIDAR, DEFAULT_IMU))
    duration: Optional[float] = None  # defaults to the trajectory's


SCENARIOS: Dict[str, Scenario] = {
    s.name: s
    for s in [
        Scenario("static", wd.room_world, lambda: tr.static((0.5, 0.3, 1.0), 0.3, 3.0), "robot at rest in a room"),
        Scenario("room", wd.room_world, lambda: tr.sinusoidal(1.0, 10.3), "smooth wandering in a furnished room"),
        Scenario("corridor", wd.corridor_world, lambda: tr.line((0, 0, 1.0), (4, 0, 1.0), 1.0, duration=4.0),
                 "straight run down a featureless corridor"),
        Scenario("doorway", wd.doorway_world, lambda: tr.line((-5.0, 0, 1.0), (6.0, 0, 1.0), 1.5),
                 "room to corridor through a door"),
        Scenario("staircase", wd.staircase_world, tr.stair_climb, "climb between two storeys"),
        Scenario("square_loop", wd.loop_course_world, lambda: tr.squircle_loop(7.5, 2.5, laps=1.0, overshoot=0.6),
                 "one lap of a ring corridor, past the start"),
        Scenario("aggressive_spin", wd.room_world, tr.aggressive_spin, "yaw rates up to 3.5 rad/s"),
        Scenario("sinusoidal", wd.room_world, lambda: tr.sinusoidal(1.0, 5.0), "short six-axis excitation"),
        Scenario("mixed_scale", wd.mixed_scale_world,
                 lambda: tr.line((-18.8, -13.3, 1.0), (-10.0, -13.3, 1.0), 1.5),
                 "closet out into a large hall"),
    ]
}


def scenario_names() -> List[str]:
    return sorted(SCENARIOS)


def get_scenario(name: str) -> Scenario:
    if name not in SCENARIOS:
        raise ContractViolation(f"unknown scenario {name!r}; presets: {', '.join(scenario_names())}")
    return SCENARIOS[name]


@dataclass
class ScenarioData:
    name: str
    scans: List[SimulatedScan]
    imu: List[ImuSample]
    truth: TrajectoryRecord  # poses at every scan end
    initial_state: StateVector  # true state at the first scan start
    trajectory: tr.AnalyticTrajectory
    world: wd.World
    spec: SensorSpec


def true_state(traj: tr.AnalyticTrajectory, t: float) -> StateVector:
    return StateVector(traj.position(t), UnitQuaternion.from_array(traj.quaternion(t)), traj.velocity(t), t=t)


def generate(name: str, seed: int = 0, spec: Optional[SensorSpec] = None, duration: Optional[float] = None,
             scan_limit: Optional[int] = None) -> ScenarioData:
    """Simulate every scan and the IMU stream of a preset; bit-reproducible for a seed."""
    sc = get_scenario(name)
    spec = spec or sc.spec
    traj = sc.trajectory()
    world = sc.world()
    T = min(duration or sc.duration or traj.duration, traj.duration)
    period = spec.lidar.period
    n = int(np.floor((T - 1e-9) / period))
    if scan_limit is not None:
        n = min(n, scan_limit)
    if n < 1:
        raise ContractViolation(f"scenario {name} too short for one scan")
    rng = np.random.default_rng(seed)
    scans = [simulate_scan(world, traj, spec, k * period, rng) for k in range(n)]
    t_last = scans[-1].cloud.t_end - spec.lidar.clock_offset
    imu = simulate_imu(traj, spec, 0.0, min(T, t_last + 2.0 / spec.imu.rate), rng)
    ends = [s.cloud.t_end - spec.lidar.clock_offset for s in scans]
    truth = TrajectoryRecord.from_poses(ends, [traj.pose(t) for t in ends])
    return ScenarioData(name, scans, imu, truth, true_state(traj, 0.0), traj, world, spec)


@dataclass
class Trace:
    name: str
    records: list
    estimate: TrajectoryRecord  # map frame, per processed scan
    odometry: TrajectoryRecord  # odometry frame
    truth: TrajectoryRecord
    keyframes: list  # (scan index, keyframe id, reasons)
    imu_states: list
    map_updates: list
    pipeline: object = None

    def ate(self) -> dict:
        return evaluate_ate(self.estimate, self.truth)

    def final_position_error(self) -> float:
        return float(np.linalg.norm(self.estimate.p[-1] - self.truth.p[-1]))


def run_scenario(name: str, config: Optional[PipelineConfig] = None, seed: int = 0, single_thread: bool = True,
                 data: Optional[ScenarioData] = None, initial_from_truth: bool = True, **gen_kw) -> Trace:
    """Generate (or reuse) scenario data and drive the full pipeline through it."""
    from ..pipeline import Pipeline

    data = data or generate(name, seed, **gen_kw)
    cfg = config or PipelineConfig()
    init = data.initial_state if initial_from_truth else None
    with Pipeline(cfg, initial_state=init, single_thread=single_thread) as pipe:
        for kind, obj in merged_stream([s.cloud for s in data.scans], data.imu):
            if kind == "imu":
                pipe.on_imu(obj)
            else:
                pipe.on_scan(obj)
        pipe.finish()
    times, poses = pipe.trajectory("map")
    _, odom = pipe.trajectory("odom")
    kfs = [(r.index, r.keyframe, r.reasons) for r in pipe.records if r.keyframe is not None]
    return Trace(name, pipe.records, TrajectoryRecord.from_poses(times, poses),
                 TrajectoryRecord.from_poses(times, odom), data.truth, kfs, pipe.imu_states, pipe.map_updates, pipe)
