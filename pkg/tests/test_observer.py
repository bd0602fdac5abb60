import numpy as np
import pytest
from hypothesis import given

from ctlio.errors import ContractViolation, StreamOrderError
from ctlio.geometry import RigidTransform, UnitQuaternion
from ctlio.imu import ImuCalibration, ImuSample, StateVector, integrate_discrete, step_state
from ctlio.observer import ObserverGains, pose_error, propagate, update
from ctlio.sim.experiments import observer_convergence

from conftest import seeds


def state(rng):
    return StateVector(rng.normal(size=3), UnitQuaternion.from_rotvec(rng.normal(0, 0.5, 3)),
                       rng.normal(size=3), rng.normal(0, 0.1, 3), rng.normal(0, 0.01, 3), 1.0)


def test_zero_error_is_fixed_point(rng):
    s = state(rng)
    out = update(s, s.pose, 0.1)
    for name in ("p", "v", "b_a", "b_w"):
        assert np.array_equal(getattr(out, name), getattr(s, name))
    assert np.array_equal(out.q.array, s.q.array)


def test_position_error_example():
    s = StateVector()
    out = update(s, RigidTransform(translation=[1.0, 0.0, 0.0]), 0.1, ObserverGains(g3=1.0))
    assert np.allclose(out.p, [0.1, 0.0, 0.0], atol=1e-15)
    assert np.array_equal(out.q.array, s.q.array)


def test_pose_error_components(rng):
    a = RigidTransform(UnitQuaternion.from_rotvec([0, 0, 0.2]), [1.0, 2.0, 3.0])
    b = RigidTransform(UnitQuaternion.from_rotvec([0, 0, 0.5]), [1.5, 2.0, 2.0])
    q_e, p_e = pose_error(a, b)
    assert np.allclose(q_e, UnitQuaternion.from_rotvec([0, 0, 0.3]).array, atol=1e-12)
    assert np.allclose(p_e, [0.5, 0.0, -1.0])


@given(seeds)
def test_translation_error_leaves_attitude_untouched(seed):
    rng = np.random.default_rng(seed)
    s = state(rng)
    measured = RigidTransform(s.q, s.p + rng.normal(size=3))
    out = update(s, measured, 0.05)
    assert np.array_equal(out.q.array, s.q.array)
    assert np.array_equal(out.b_w, s.b_w)


@given(seeds)
def test_update_keeps_unit_quaternion(seed):
    rng = np.random.default_rng(seed)
    s = state(rng)
    measured = RigidTransform(UnitQuaternion.from_rotvec(rng.normal(0, 1.0, 3)), rng.normal(size=3))
    out = update(s, measured, float(rng.uniform(0.01, 0.2)))
    assert abs(np.linalg.norm(out.q.array) - 1.0) < 1e-12


def test_attitude_correction_reduces_error(rng):
    s = StateVector()
    target = UnitQuaternion.from_rotvec([0.0, 0.0, 0.3])
    out = update(s, RigidTransform(target), 0.05)
    assert out.q.angle_to(target) < s.q.angle_to(target)


def test_rejects_nonpositive_interval():
    for dt in (0.0, -0.1):
        with pytest.raises(ContractViolation):
            update(StateVector(), RigidTransform(), dt)


def test_rejects_nonpositive_gain():
    with pytest.raises(ContractViolation):
        ObserverGains(g3=0.0)


def test_propagate_is_one_integration_step(rng):
    s = state(rng)
    a = ImuSample(1.0, rng.normal(size=3), rng.normal(size=3))
    b = ImuSample(1.01, rng.normal(size=3), rng.normal(size=3))
    out = propagate(s, b, a)
    ref = step_state(s, a, b, ImuCalibration().gravity_vector)
    assert np.array_equal(out.p, ref.p) and np.array_equal(out.q.array, ref.q.array)
    assert out.t == 1.01


def test_propagation_chain_matches_batch_integration(rng):
    s0 = state(rng)
    ts = 1.0 + 0.01 * np.arange(101)
    samples = [ImuSample(t, rng.normal(size=3), rng.normal(0, 0.3, 3)) for t in ts]
    batch = integrate_discrete(s0, samples)
    s, prev = s0, samples[0]
    for x in samples[1:]:
        s = propagate(s, x, prev)
        prev = x
    assert np.allclose(s.p, batch[-1].p, atol=1e-12)
    assert np.allclose(s.q.array, batch[-1].q.array, atol=1e-12)


def test_propagate_rejects_stale_sample():
    with pytest.raises(StreamOrderError):
        propagate(StateVector(t=1.0), ImuSample(1.0, np.zeros(3), np.zeros(3)))


def test_static_accel_bias_converges():
    run = observer_convergence("static", seconds=30.0, b_a=(0.1, 0.0, 0.0), b_w=(0.0, 0.0, 0.0),
                               p_err=(0.0, 0.0, 0.0), rot_err=(0.0, 0.0, 0.0), v_err=(0.0, 0.0, 0.0))
    assert run.final["accel_bias"] < 1e-3
