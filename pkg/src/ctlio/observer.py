"""Hierarchical geometric observer: IMU propagation plus pose corrections."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ContractViolation
from .geometry import RigidTransform, UnitQuaternion, quat_conj, quat_mul, quat_normalize
from .imu import ImuCalibration, ImuSample, StateVector, step_state


@dataclass(frozen=True)
class ObserverGains:
    g1: float = 4.0
    g2: float = 4.0
    g3: float = 10.0
    g4: float = 10.0
    g5: float = 4.0

    def __post_init__(self):
        if min(self.as_tuple()) <= 0:
            raise ContractViolation("observer gains must be positive")

    def as_tuple(self):
        return (self.g1, self.g2, self.g3, self.g4, self.g5)


def propagate(state: StateVector, sample: ImuSample, prev: Optional[ImuSample] = None,
              calib: ImuCalibration = ImuCalibration()) -> StateVector:
    """Advance ``state`` to ``sample.t``; ``prev`` is the measurement at ``state.t``.

    Without ``prev`` the interval is integrated with ``sample`` at both ends.
    """
    return step_state(state, prev if prev is not None else sample, sample, calib.gravity_vector)


def pose_error(predicted: RigidTransform, measured: RigidTransform):
    """``(q_e, p_e)`` with ``q_e = q_pred* ⊗ q_meas`` and ``p_e = p_meas - p_pred``."""
    qp, qm = predicted.rotation.array, measured.rotation.array
    # identical attitudes give an exact identity so translation-only errors never touch attitude
    q_e = np.array([1.0, 0.0, 0.0, 0.0]) if np.array_equal(qp, qm) else quat_mul(quat_conj(qp), qm)
    return q_e, measured.translation - predicted.translation


def update(state: StateVector, measured: RigidTransform, dt_plus: float,
           gains: ObserverGains = ObserverGains(), reference: Optional[RigidTransform] = None) -> StateVector:
    """Correct ``state`` with a scan-matched pose.

    The error is taken against ``reference`` (the propagated pose at the
    measurement time) when given, else against the state's own pose.
    Attitude and gyro bias are corrected before, and independently of, the
    translational states.
    """
    if not dt_plus > 0:
        raise ContractViolation("time since the previous correction must be positive")
    ref = reference if reference is not None else state.pose
    q_e, p_e = pose_error(ref, measured)
    w_e, v_e = q_e[0], q_e[1:]
    sgn = 1.0 if w_e >= 0 else -1.0

    q = state.q.array
    # 1 - |w| for a unit quaternion, written so that it is exactly zero when v_e is
    vv = float(v_e @ v_e)
    corr = np.concatenate([[vv / (1.0 + abs(w_e))], sgn * v_e])
    if vv == 0.0:
        q_new = q
    else:
        q_new = quat_normalize(q + dt_plus * gains.g1 * quat_mul(q, corr))
    b_w = state.b_w - dt_plus * gains.g2 * w_e * v_e

    q_unit = state.q if q_new is q else UnitQuaternion.from_array(q_new)
    R = q_unit.as_matrix()
    p = state.p + dt_plus * gains.g3 * p_e
    v = state.v + dt_plus * gains.g4 * p_e
    b_a = state.b_a - dt_plus * gains.g5 * (R.T @ p_e)
    return StateVector(p, q_unit, v, b_a, b_w, state.t)
