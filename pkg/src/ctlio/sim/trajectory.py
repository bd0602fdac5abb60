"""Closed-form trajectories with exact derivatives.

Each trajectory is six sympy expressions in ``t`` (x, y, z, yaw, pitch, roll;
orientation composed Z-Y-X) that are differentiated symbolically once and
lambdified. Body angular velocity follows from the Euler-angle rates.
"""

from __future__ import annotations

from typing import Callable, Dict

import numpy as np
import sympy as sp

from ..geometry import RigidTransform, UnitQuaternion, quat_from_rotvec, quat_mul, quat_to_matrix

T_SYM = sp.Symbol("t", real=True)


def _lamb(expr):
    f = sp.lambdify(T_SYM, expr, "numpy")

    def call(t):
        t = np.asarray(t, dtype=float)
        return np.broadcast_to(np.asarray(f(t), dtype=float), t.shape).copy()

    return call


def _axis_quats(angle, axis):
    v = np.zeros(np.shape(angle) + (3,))
    v[..., axis] = angle
    return quat_from_rotvec(v)


class AnalyticTrajectory:
    """Robot pose in the world as a smooth function of time."""

    def __init__(self, name, x, y, z, yaw=0, pitch=0, roll=0, duration=10.0):
        self.name = name
        self.duration = float(duration)
        self._pos = []
        for e in (x, y, z):
            e = sp.sympify(e)
            self._pos.append([_lamb(sp.diff(e, T_SYM, k)) for k in range(4)])
        self._ang = []
        for e in (yaw, pitch, roll):
            e = sp.sympify(e)
            self._ang.append([_lamb(sp.diff(e, T_SYM, k)) for k in range(3)])

    # position and derivatives -------------------------------------------------
    def _p(self, t, order):
        return np.stack([c[order](t) for c in self._pos], axis=-1)

    def position(self, t):
        return self._p(t, 0)

    def velocity(self, t):
        return self._p(t, 1)

    def acceleration(self, t):
        return self._p(t, 2)

    # orientation ----------------------------------------------------------------
    def _angles(self, t, order):
        return [a[order](t) for a in self._ang]

    def quaternion(self, t):
        yaw, pitch, roll = self._angles(t, 0)
        qz = _axis_quats(yaw, 2)
        qy = _axis_quats(pitch, 1)
        qx = _axis_quats(roll, 0)
        return quat_mul(quat_mul(qz, qy), qx)

    def rotation(self, t):
        return quat_to_matrix(self.quaternion(t))

    def _body_rate_terms(self, t):
        yaw, pitch, roll = self._angles(t, 0)
        dyaw, dpitch, droll = self._angles(t, 1)
        Ryx = quat_to_matrix(quat_mul(_axis_quats(pitch, 1), _axis_quats(roll, 0)))
        Rx = quat_to_matrix(_axis_quats(roll, 0))
        return Ryx, Rx, dyaw, dpitch, droll

    def angular_velocity(self, t):
        """Body-frame angular velocity."""
        t = np.asarray(t, dtype=float)
        Ryx, Rx, dyaw, dpitch, droll = self._body_rate_terms(t)
        ez = np.zeros(t.shape + (3,))
        ez[..., 2] = dyaw
        ey = np.zeros(t.shape + (3,))
        ey[..., 1] = dpitch
        w = np.einsum("...ji,...j->...i", Ryx, ez) + np.einsum("...ji,...j->...i", Rx, ey)
        w[..., 0] += droll
        return w

    def angular_acceleration(self, t, h=1e-5):
        """Body-frame angular acceleration (central difference of the exact rate)."""
        return (self.angular_velocity(np.asarray(t) + h) - self.angular_velocity(np.asarray(t) - h)) / (2 * h)

    def pose(self, t) -> RigidTransform:
        return RigidTransform(UnitQuaternion.from_array(self.quaternion(float(t))), self.position(float(t)))


def _smoothstep(t, t0, t1):
    """C2 quintic ramp from 0 to 1 over [t0, t1]."""
    s = (t - t0) / (t1 - t0)
    return sp.Piecewise((0, t < t0), (1, t > t1), (10 * s**3 - 15 * s**4 + 6 * s**5, True))


def static(p=(0.0, 0.0, 1.0), yaw=0.0, duration=5.0):
    return AnalyticTrajectory("static", p[0], p[1], p[2], yaw, 0, 0, duration)


def constant_velocity(v=(1.0, 0.0, 0.0), p0=(0.0, 0.0, 1.0), duration=5.0):
    t = T_SYM
    return AnalyticTrajectory("constant_velocity", p0[0] + v[0] * t, p0[1] + v[1] * t, p0[2] + v[2] * t,
                              0, 0, 0, duration)


def sinusoidal(scale=1.0, duration=10.0, center=(0.0, 0.0, 1.0)):
    """Smooth wandering motion with all six degrees of freedom excited."""
    t = T_SYM
    return AnalyticTrajectory(
        "sinusoidal",
        center[0] + scale * 0.8 * sp.sin(0.7 * t),
        center[1] + scale * 0.6 * sp.sin(0.9 * t + 0.4),
        center[2] + scale * 0.1 * sp.sin(1.3 * t),
        0.4 * sp.sin(0.5 * t) + 0.2 * sp.sin(1.7 * t),
        0.05 * sp.sin(1.1 * t + 0.3),
        0.05 * sp.sin(1.5 * t + 1.0),
        duration,
    )


def aggressive_spin(peak_rate=3.5, duration=3.0, center=(0.0, 0.0, 1.0)):
    """Yaw rate rising smoothly to ``peak_rate`` rad/s, with a little translation and tilt."""
    t = T_SYM
    period = 2.0
    # yaw rate = peak * (1 - cos(2 pi t / period)) / 2, integrated in closed form
    w = 2 * sp.pi / period
    yaw = peak_rate / 2 * (t - sp.sin(w * t) / w)
    return AnalyticTrajectory(
        "aggressive_spin",
        center[0] + 0.3 * sp.sin(1.2 * t),
        center[1] + 0.2 * sp.sin(0.8 * t),
        center[2] + 0.05 * sp.sin(2.0 * t),
        yaw,
        0.05 * sp.sin(2.5 * t),
        0.04 * sp.sin(3.0 * t + 0.5),
        duration,
    )


def line(start, end, speed, t_begin=0.0, duration=None):
    """Straight segment; speed ramps up smoothly over the first second."""
    t = T_SYM
    start = np.asarray(start, dtype=float)
    end = np.asarray(end, dtype=float)
    d = end - start
    length = float(np.linalg.norm(d))
    u = d / length
    ramp = 1.0
    tau = (t - t_begin) / ramp
    s = sp.Piecewise(
        (0, t < t_begin),
        (speed * ramp * (tau**3 - tau**4 / 2), t < t_begin + ramp),
        (speed * (t - t_begin - ramp / 2), True),
    )
    total = duration if duration is not None else t_begin + length / speed + ramp / 2
    yaw = float(np.arctan2(u[1], u[0]))
    return AnalyticTrajectory(
        "line", start[0] + u[0] * s, start[1] + u[1] * s, start[2] + u[2] * s, yaw, 0, 0, total
    )


def squircle_loop(radius=7.5, speed=2.0, center=(0.0, 0.0, 1.0), laps=1.0, overshoot=0.0):
    """Closed rounded-square path (|x|^4 + |y|^4 = r^4) with heading along the tangent."""
    t = T_SYM
    perimeter = 7.0 * radius  # close to the true squircle perimeter (~7.01 r)
    omega = 2 * np.pi * speed / perimeter
    th = omega * t - sp.pi / 2
    denom = (sp.cos(th) ** 4 + sp.sin(th) ** 4) ** sp.Rational(1, 4)
    x = center[0] + radius * sp.cos(th) / denom
    y = center[1] + radius * sp.sin(th) / denom
    yaw = sp.atan2(sp.diff(y, t), sp.diff(x, t))
    duration = (laps * 2 * np.pi + overshoot) / omega
    return AnalyticTrajectory("square_loop", x, y, center[2], yaw, 0, 0, duration)


def stair_climb(start=(-4.0, -4.0, 1.0), rise=3.6, run=8.0, speed=0.8):
    """Walk along +x while climbing ``rise`` metres over ``run`` metres, smoothly."""
    t = T_SYM
    duration = run / speed + 2.0
    s = _smoothstep(t, 1.0, duration - 1.0)
    return AnalyticTrajectory(
        "staircase", start[0] + run * s, start[1], start[2] + rise * s, 0, 0, 0, duration
    )


PRESETS: Dict[str, Callable[[], AnalyticTrajectory]] = {
    "static": static,
    "constant_velocity": constant_velocity,
    "sinusoidal": sinusoidal,
    "aggressive_spin": aggressive_spin,
}
