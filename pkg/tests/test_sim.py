import numpy as np
import pytest

from ctlio.errors import ContractViolation
from ctlio.sim import trajectory as tr
from ctlio.sim import world as wd
from ctlio.sim.scenarios import generate, scenario_names
from ctlio.sim.sensors import ImuSpec, LidarSpec, SensorSpec, ideal_imu, simulate_imu, simulate_scan

LIDAR = LidarSpec(channels=16, columns=180)


def test_static_scan_has_no_distortion():
    traj = tr.static((0.5, 0.3, 1.0), 0.4, 2.0)
    scan = simulate_scan(wd.room_world(), traj, SensorSpec(LIDAR), 0.5)
    T = traj.pose(0.5)
    assert np.allclose(T.apply(scan.cloud.points), scan.world_points, atol=1e-9)


def test_constant_velocity_displacement():
    traj = tr.constant_velocity((1.0, 0.0, 0.0), duration=2.0)
    scan = simulate_scan(wd.room_world(), traj, SensorSpec(LIDAR), 0.5)
    # each point seen from the start pose lags by the distance travelled before it fired
    lag = scan.world_points - traj.pose(0.5).apply(scan.cloud.points)
    expected = np.outer(scan.cloud.t_rel, [1.0, 0.0, 0.0])
    assert np.allclose(lag, expected, atol=1e-9)


def test_scan_outside_trajectory_rejected():
    with pytest.raises(ContractViolation):
        simulate_scan(wd.room_world(), tr.static(duration=1.0), SensorSpec(LIDAR), 0.95)


def test_static_imu_reads_gravity():
    acc, gyr = ideal_imu(tr.static(duration=1.0), np.linspace(0, 1, 11))
    assert np.allclose(acc, [0.0, 0.0, 9.80665]) and np.allclose(gyr, 0.0)


def test_imu_bias_and_noise_statistics():
    spec = SensorSpec(LIDAR, ImuSpec(rate=200.0, accel_noise=0.05, gyro_noise=0.01,
                                     accel_bias=(0.1, -0.2, 0.05), gyro_bias=(0.01, 0.0, -0.02)))
    samples = simulate_imu(tr.static(duration=30.0), spec, 0.0, 25.0, seed=3)
    acc = np.array([s.accel for s in samples]) - [0.0, 0.0, 9.80665]
    gyr = np.array([s.gyro for s in samples])
    n = len(samples)
    assert np.allclose(acc.mean(0), [0.1, -0.2, 0.05], atol=4 * 0.05 / np.sqrt(n))
    assert np.allclose(gyr.mean(0), [0.01, 0.0, -0.02], atol=4 * 0.01 / np.sqrt(n))
    assert np.allclose(acc.std(0), 0.05, rtol=0.05) and np.allclose(gyr.std(0), 0.01, rtol=0.05)


def test_imu_rate_and_span():
    samples = simulate_imu(tr.static(duration=2.0), SensorSpec(LIDAR, ImuSpec(rate=100.0)), 0.0, 1.0)
    t = np.array([s.t for s in samples])
    assert len(t) == 101 and np.allclose(np.diff(t), 0.01)


def test_generate_is_deterministic():
    a = generate("static", seed=7, scan_limit=3)
    b = generate("static", seed=7, scan_limit=3)
    c = generate("static", seed=8, scan_limit=3)
    for x, y in zip(a.scans, b.scans):
        assert np.array_equal(x.cloud.points, y.cloud.points)
    assert all(np.array_equal(x.accel, y.accel) for x, y in zip(a.imu, b.imu))
    assert not np.array_equal(a.scans[0].cloud.points, c.scans[0].cloud.points)


def test_generate_covers_scans_with_imu():
    d = generate("room", scan_limit=4)
    assert d.imu[0].t <= d.scans[0].cloud.t_start
    assert d.imu[-1].t >= d.scans[-1].cloud.t_end
    assert len(d.truth) == 4


def test_staircase_has_two_floor_levels():
    traj = tr.stair_climb()
    assert traj.position(0.0)[2] == pytest.approx(1.0)
    assert traj.position(traj.duration)[2] == pytest.approx(4.6)
    world = wd.staircase_world()
    r, _ = world.cast([[-4.0, -4.0, 1.0], [4.0, -4.0, 4.6]], [[0, 0, -1.0], [0, 0, -1.0]])
    # starts on the bottom step below the slab, ends one metre above the upper floor
    assert r[0] == pytest.approx(1.0 - 3.6 / 8)
    assert r[1] == pytest.approx(1.0)


def test_all_presets_listed():
    assert set(scenario_names()) == {"static", "room", "corridor", "doorway", "staircase", "square_loop",
                                     "aggressive_spin", "sinusoidal", "mixed_scale"}


def test_unknown_preset():
    with pytest.raises(ContractViolation):
        generate("nowhere")


def test_trajectory_derivatives_consistent():
    traj = tr.sinusoidal(1.0, 5.0)
    t, h = 2.3, 1e-5
    fd_v = (traj.position(t + h) - traj.position(t - h)) / (2 * h)
    fd_a = (traj.velocity(t + h) - traj.velocity(t - h)) / (2 * h)
    assert np.allclose(fd_v, traj.velocity(t), atol=1e-7)
    assert np.allclose(fd_a, traj.acceleration(t), atol=1e-6)
