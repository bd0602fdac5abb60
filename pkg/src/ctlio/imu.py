"""IMU measurement handling and discrete-time state integration."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .errors import ContractViolation, RejectedSampleError, StreamOrderError
from .geometry import (
    RigidTransform,
    UnitQuaternion,
    _frozen,
    pure,
    quat_mul,
    quat_normalize,
    quat_to_matrix,
)

STANDARD_GRAVITY = 9.80665


@dataclass(frozen=True)
class ImuSample:
    t: float
    accel: np.ndarray
    gyro: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "t", float(self.t))
        object.__setattr__(self, "accel", _frozen(self.accel, (3,)))
        object.__setattr__(self, "gyro", _frozen(self.gyro, (3,)))

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.t) and np.all(np.isfinite(self.accel)) and np.all(np.isfinite(self.gyro)))


@dataclass(frozen=True)
class ImuCalibration:
    rotation: UnitQuaternion = field(default_factory=UnitQuaternion.identity)
    lever_arm: np.ndarray = field(default_factory=lambda: np.zeros(3))
    gravity: float = STANDARD_GRAVITY

    def __post_init__(self):
        arm = _frozen(self.lever_arm, (3,))
        if not np.all(np.isfinite(arm)):
            raise ContractViolation("lever arm must be finite")
        if not self.gravity > 0:
            raise ContractViolation("gravity magnitude must be positive")
        object.__setattr__(self, "lever_arm", arm)

    @property
    def gravity_vector(self) -> np.ndarray:
        """World-frame gravitational acceleration, pointing down."""
        return np.array([0.0, 0.0, -self.gravity])


@dataclass(frozen=True)
class StateVector:
    p: np.ndarray = field(default_factory=lambda: np.zeros(3))
    q: UnitQuaternion = field(default_factory=UnitQuaternion.identity)
    v: np.ndarray = field(default_factory=lambda: np.zeros(3))
    b_a: np.ndarray = field(default_factory=lambda: np.zeros(3))
    b_w: np.ndarray = field(default_factory=lambda: np.zeros(3))
    t: float = 0.0

    def __post_init__(self):
        for name in ("p", "v", "b_a", "b_w"):
            a = _frozen(getattr(self, name), (3,))
            if not np.all(np.isfinite(a)):
                raise ContractViolation(f"non-finite state component {name}")
            object.__setattr__(self, name, a)
        object.__setattr__(self, "t", float(self.t))

    @property
    def pose(self) -> RigidTransform:
        return RigidTransform(self.q, self.p)

    def replace(self, **kw) -> "StateVector":
        return replace(self, **kw)


def transfer_to_body(sample: ImuSample, calib: ImuCalibration, prev: Optional[ImuSample] = None) -> ImuSample:
    """Express an IMU sample at the robot centre of gravity.

    Angular velocity is only re-axed; linear acceleration picks up the
    tangential and centripetal terms of the lever arm. The angular
    acceleration is a backward difference against ``prev`` (zero without one).
    """
    if not sample.is_finite():
        raise RejectedSampleError(f"non-finite IMU sample at t={sample.t}")
    R = calib.rotation.as_matrix()
    w = R @ sample.gyro
    a = R @ sample.accel
    arm = calib.lever_arm
    if prev is not None:
        dt = sample.t - prev.t
        if dt <= 0:
            raise StreamOrderError(f"IMU sample at {sample.t} does not follow {prev.t}")
        w_dot = (w - R @ prev.gyro) / dt
    else:
        w_dot = np.zeros(3)
    a = a + np.cross(w_dot, arm) + np.cross(w, np.cross(w, arm))
    return ImuSample(sample.t, a, w)


def debias(sample: ImuSample, state: StateVector) -> ImuSample:
    """Subtract bias estimates. Gravity stays in; integration removes it world-side."""
    return ImuSample(sample.t, sample.accel - state.b_a, sample.gyro - state.b_w)


def _step(p0, q0, v0, a_prev, w_prev, a_cur, w_cur, dt, g):
    """One constant-jerk / constant-angular-acceleration step.

    Orientation is advanced first because the jerk needs the rotated
    acceleration at the end of the interval.
    """
    alpha = (w_cur - w_prev) / dt
    q1 = q0 + 0.5 * quat_mul(q0, pure(w_prev)) * dt + 0.25 * quat_mul(q0, pure(alpha)) * dt * dt
    q1 = quat_normalize(q1)
    acc0 = quat_to_matrix(q0) @ a_prev + g
    acc1 = quat_to_matrix(q1) @ a_cur + g
    jerk = (acc1 - acc0) / dt
    p1 = p0 + v0 * dt + 0.5 * acc0 * dt**2 + jerk * dt**3 / 6.0
    v1 = v0 + acc0 * dt + 0.5 * jerk * dt**2
    return p1, q1, v1, acc0, jerk, alpha


def step_state(state: StateVector, prev: ImuSample, cur: ImuSample, g) -> StateVector:
    dt = cur.t - state.t
    if dt <= 0:
        raise StreamOrderError(f"non-increasing time {state.t} -> {cur.t}")
    p, q, v, *_ = _step(state.p, state.q.array, state.v, prev.accel, prev.gyro, cur.accel, cur.gyro, dt, g)
    return StateVector(p, UnitQuaternion.from_array(q), v, state.b_a, state.b_w, cur.t)


def integrate_discrete(
    state0: StateVector, samples: Sequence[ImuSample], calib: ImuCalibration = ImuCalibration()
) -> list:
    """Integrate debiased, frame-transferred samples; one state per sample.

    A sample stamped exactly at ``state0.t`` only seeds the first interval.
    If the first sample is later than ``state0.t`` it acts as both ends of
    the first interval (no jerk, no angular acceleration).
    """
    if not samples:
        return [state0]
    g = calib.gravity_vector
    if samples[0].t < state0.t:
        raise StreamOrderError(f"first sample {samples[0].t} precedes state time {state0.t}")
    out = []
    state = state0
    prev = samples[0]
    for k, s in enumerate(samples):
        if k > 0 and s.t <= samples[k - 1].t:
            raise StreamOrderError(f"IMU stream not increasing at index {k}: {samples[k - 1].t} -> {s.t}")
        if s.t == state.t:
            state = state.replace(t=s.t)
        else:
            state = step_state(state, prev, s, g)
        out.append(state)
        prev = s
    return out
