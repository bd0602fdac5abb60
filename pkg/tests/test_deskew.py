import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ctlio.deskew import build_coarse_trajectory, deskew, query_pose, query_poses
from ctlio.errors import InsufficientImuError, OutOfRangeError
from ctlio.geometry import RigidTransform, StampedPointCloud, UnitQuaternion
from ctlio.imu import ImuSample, StateVector, integrate_discrete

from conftest import seeds

G = 9.80665


def still(n, dt=0.01, t0=0.0):
    return [ImuSample(t0 + k * dt, [0.0, 0.0, G], [0.0, 0.0, 0.0]) for k in range(n)]


def const_accel(n, a, dt=0.01, t0=0.0):
    return [ImuSample(t0 + k * dt, [a[0], a[1], a[2] + G], [0.0, 0.0, 0.0]) for k in range(n)]


def test_zero_motion_knots_equal_initial_state():
    st0 = StateVector(p=[1.0, 0.0, 0.0])
    ct = build_coarse_trajectory(st0, still(12), 0.1)
    assert np.all(ct.p == st0.p) and np.all(ct.v == 0.0)


def test_knot_count_and_order():
    ct = build_coarse_trajectory(StateVector(), still(20), 0.1)
    assert len(ct) >= 11 and np.all(np.diff(ct.times) > 0)


def test_knots_equal_discrete_integration(rng):
    imu = [ImuSample(k * 0.01, rng.normal(size=3) + [0, 0, G], rng.normal(size=3)) for k in range(15)]
    st0 = StateVector(v=[0.3, 0.0, 0.0])
    ct = build_coarse_trajectory(st0, imu, 0.1)
    ref = integrate_discrete(st0, imu[: len(ct)])
    for s, r in zip(ct.states, ref):
        assert np.array_equal(s.p, r.p) and np.array_equal(s.q.array, r.q.array)


def test_coverage_gap_names_gap():
    with pytest.raises(InsufficientImuError) as err:
        build_coarse_trajectory(StateVector(), still(5), 0.1)
    assert err.value.gap == (0.04, 0.1)


def test_query_at_knot_is_knot_pose(rng):
    imu = [ImuSample(k * 0.01, rng.normal(size=3) + [0, 0, G], rng.normal(size=3)) for k in range(12)]
    ct = build_coarse_trajectory(StateVector(), imu, 0.1)
    for k, t in enumerate(ct.times):
        T = query_pose(ct, t)
        assert np.allclose(T.translation, ct.p[k], atol=1e-12)
        assert np.allclose(T.rotation.array, ct.q[k], atol=1e-12)


def test_stationary_query_is_identity_displacement():
    ct = build_coarse_trajectory(StateVector(), still(12), 0.1)
    assert query_pose(ct, 0.0537).almost_equal(RigidTransform(), 1e-15)


def test_mid_interval_constant_acceleration_closed_form():
    a = np.array([0.7, -0.2, 0.1])
    v0 = np.array([1.0, 0.5, 0.0])
    ct = build_coarse_trajectory(StateVector(v=v0), const_accel(12, a), 0.1)
    for t in (0.0037, 0.0512, 0.0999):
        assert np.allclose(query_pose(ct, t).translation, v0 * t + 0.5 * a * t * t, atol=1e-9)


def test_continuity_at_knots(rng):
    imu = [ImuSample(k * 0.01, rng.normal(size=3) + [0, 0, G], rng.normal(size=3)) for k in range(12)]
    ct = build_coarse_trajectory(StateVector(v=[1, 0, 0]), imu, 0.1)
    for t in ct.times[1:-1]:
        p_left, q_left = query_poses(ct, [t - 1e-12])
        p_right, q_right = query_poses(ct, [t])
        assert np.max(np.abs(p_left - p_right)) <= 1e-9
        assert np.max(np.abs(q_left - q_right)) <= 1e-9


def test_out_of_range_query():
    ct = build_coarse_trajectory(StateVector(), still(12), 0.1)
    with pytest.raises(OutOfRangeError):
        query_pose(ct, 0.5)


def test_deskew_stationary_places_at_initial_pose(rng):
    st0 = StateVector(p=[1.0, 2.0, 3.0], q=UnitQuaternion.from_rotvec([0, 0, 0.5]))
    ct = build_coarse_trajectory(st0, [ImuSample(k * 0.01, st0.q.conjugate().rotate([0, 0, G]), [0, 0, 0])
                                       for k in range(12)], 0.1)
    pts = rng.normal(size=(100, 3))
    out = deskew(StampedPointCloud(pts, rng.uniform(0, 0.1, 100), 0.0, "robot"), ct)
    assert out.frame == "world"
    assert np.allclose(out.points, st0.pose.apply(pts), atol=1e-12)


def test_identity_trajectory_is_bit_exact_no_op(rng):
    ct = build_coarse_trajectory(StateVector(), still(12), 0.1)
    pts = rng.normal(size=(64, 3))
    out = deskew(StampedPointCloud(pts, rng.uniform(0, 0.1, 64), 0.0, "robot"), ct)
    assert np.array_equal(out.points, pts)


def test_equal_times_equal_transforms(rng):
    imu = [ImuSample(k * 0.01, rng.normal(size=3) + [0, 0, G], rng.normal(size=3)) for k in range(12)]
    ct = build_coarse_trajectory(StateVector(), imu, 0.1)
    pts = np.array([[1.0, 0.0, 0.0], [1.0, 0.0, 0.0]])
    out = deskew(StampedPointCloud(pts, [0.042, 0.042], 0.0, "robot"), ct)
    assert np.array_equal(out.points[0], out.points[1])


def test_point_outside_span_names_index():
    ct = build_coarse_trajectory(StateVector(), still(12), 0.1)
    with pytest.raises(OutOfRangeError) as err:
        deskew(StampedPointCloud(np.ones((3, 3)), [0.01, 0.2, 0.02], 0.0, "robot"), ct)
    assert err.value.point_index == 1


@given(seeds, st.integers(1, 5))
def test_deskew_order_and_partition_invariant(seed, parts):
    r = np.random.default_rng(seed)
    imu = [ImuSample(k * 0.01, r.normal(size=3) + [0, 0, G], r.normal(size=3)) for k in range(12)]
    ct = build_coarse_trajectory(StateVector(v=r.normal(size=3)), imu, 0.1)
    pts, t = r.normal(size=(60, 3)), r.uniform(0, 0.1, 60)
    whole = deskew(StampedPointCloud(pts, t, 0.0, "robot"), ct).points
    perm = r.permutation(60)
    shuffled = deskew(StampedPointCloud(pts[perm], t[perm], 0.0, "robot"), ct).points
    assert np.array_equal(shuffled, whole[perm])
    chunks = np.array_split(np.arange(60), parts)
    pieces = np.concatenate([deskew(StampedPointCloud(pts[c], t[c], 0.0, "robot"), ct).points for c in chunks])
    assert np.array_equal(pieces, whole)
