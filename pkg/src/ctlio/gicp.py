"""Plane-to-plane GICP registration with sparsity-adaptive correspondence radius."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .errors import ContractViolation, DegenerateCloudError, InsufficientCorrespondenceError
from .geometry import RigidTransform, SpatialIndex, StampedPointCloud, skew

log = logging.getLogger(__name__)

COVARIANCE_EPSILON = 1e-3
MIN_CORRESPONDENCES = 20


def _as_points(cloud):
    return cloud.points if isinstance(cloud, StampedPointCloud) else np.asarray(cloud, dtype=float)


def estimate_covariances(cloud, k_neighbors: int = 20, epsilon: float = COVARIANCE_EPSILON, index=None):
    """Per-point covariances from k-NN scatter, regularised to eigenvalues (1, 1, eps).

    Returns an ``(N, 3, 3)`` array. The smallest-eigenvalue direction of the
    neighbourhood scatter (the surface normal) keeps eigenvalue ``epsilon``.
    """
    pts = _as_points(cloud)
    if len(pts) < k_neighbors:
        raise DegenerateCloudError(f"{len(pts)} points, need at least {k_neighbors} for covariances")
    if index is None:
        index = SpatialIndex(pts)
    _, nbr = index.query_nearest(pts, k=k_neighbors)
    nb = pts[nbr]
    centered = nb - nb.mean(axis=1, keepdims=True)
    scatter = np.swapaxes(centered, 1, 2) @ centered / k_neighbors
    _, vecs = np.linalg.eigh(scatter)
    # eigh sorts ascending: the first column is the normal; V diag(eps, 1, 1) V^T = I - (1 - eps) n n^T
    n = vecs[:, :, 0]
    return np.eye(3) - (1.0 - epsilon) * n[:, :, None] * n[:, None, :]


def rotate_covariances(cov, R):
    return R @ cov @ R.T


@dataclass(frozen=True)
class SparsityTracker:
    z: Optional[float] = None
    alpha: float = 0.95
    beta: float = 0.05
    K: int = 5
    warning: bool = False

    def __post_init__(self):
        if abs(self.alpha + self.beta - 1.0) > 1e-12:
            raise ContractViolation("smoothing constants must sum to one")


def cloud_sparsity(points, K: int = 5, index=None) -> float:
    """Mean over points of the mean distance to their K nearest neighbours."""
    pts = _as_points(points)
    if index is None:
        index = SpatialIndex(pts)
    d, _ = index.query_nearest(pts, k=K + 1)
    return float(d[:, 1:].mean())


def update_sparsity(tracker: SparsityTracker, cloud, index=None) -> SparsityTracker:
    pts = _as_points(cloud)
    if len(pts) < tracker.K + 1:
        log.warning("sparsity update skipped: %d points for K=%d", len(pts), tracker.K)
        return replace(tracker, warning=True)
    D = cloud_sparsity(pts, tracker.K, index)
    z = D if tracker.z is None else tracker.alpha * tracker.z + tracker.beta * D
    return replace(tracker, z=z, warning=False)


@dataclass(frozen=True)
class RegistrationResult:
    correction: RigidTransform
    pose: RigidTransform
    residual: float
    correspondences: int
    hessian: np.ndarray
    converged: bool
    iterations: int
    fitness: float
    history: tuple = ()

    @property
    def H_tt(self) -> np.ndarray:
        return self.hessian[:3, :3]


@dataclass(frozen=True)
class GicpSettings:
    max_iterations: int = 64
    step_tolerance: float = 1e-8
    relative_tolerance: float = 1e-9
    min_correspondences: int = MIN_CORRESPONDENCES
    initial_damping: float = 1e-6


def inv_sym3(S):
    """Batched inverse of symmetric 3x3 matrices via the adjugate."""
    a, b, c = S[:, 0, 0], S[:, 0, 1], S[:, 0, 2]
    d, e, f = S[:, 1, 1], S[:, 1, 2], S[:, 2, 2]
    A = d * f - e * e
    B = c * e - b * f
    C = b * e - c * d
    det = a * A + b * B + c * C
    out = np.empty_like(S)
    out[:, 0, 0] = A
    out[:, 0, 1] = out[:, 1, 0] = B
    out[:, 0, 2] = out[:, 2, 0] = C
    out[:, 1, 1] = a * f - c * c
    out[:, 1, 2] = out[:, 2, 1] = b * c - a * e
    out[:, 2, 2] = a * d - b * b
    return out / det[:, None, None]


def _quad(d, M) -> float:
    return float(np.sum(d * (M @ d[:, :, None])[:, :, 0]))


class _Problem:
    """Fixed-correspondence GICP cost around a correction ``(R, t)``."""

    def __init__(self, src, src_cov, tgt, tgt_cov):
        self.src = src
        self.src_cov = src_cov
        self.tgt = tgt
        self.tgt_cov = tgt_cov

    def terms(self, T: RigidTransform):
        R = T.R
        x = self.src @ R.T + T.t
        d = self.tgt - x
        sigma = self.tgt_cov + R @ self.src_cov @ R.T
        M = inv_sym3(sigma)
        return x, d, M

    def cost(self, T: RigidTransform) -> float:
        _, d, M = self.terms(T)
        return _quad(d, M)

    def jacobian_d(self, T: RigidTransform):
        """d(residual)/d(xi) for the right perturbation ``T exp(xi)``, xi = (dt, dtheta)."""
        R = T.R
        n = len(self.src)
        J = np.empty((n, 3, 6))
        J[:, :, :3] = -R
        J[:, :, 3:] = R @ skew(self.src)
        return J

    def normal_equations(self, T: RigidTransform):
        _, d, M = self.terms(T)
        J = self.jacobian_d(T)
        MJ = M @ J
        H = J.reshape(-1, 6).T @ MJ.reshape(-1, 6)
        g = MJ.reshape(-1, 6).T @ d.reshape(-1)
        return H, g, _quad(d, M)

    def gradient(self, T: RigidTransform) -> np.ndarray:
        """Exact gradient of the cost, including the rotation of source covariances."""
        _, d, M = self.terms(T)
        J = self.jacobian_d(T)
        u = np.einsum("nij,nj->ni", M, d)
        grad = 2.0 * np.einsum("ni,nij->j", u, J)
        w = u @ T.R
        cw = np.einsum("nij,nj->ni", self.src_cov, w)
        grad[3:] += 2.0 * np.cross(w, cw).sum(axis=0)
        return grad

    def whitened(self, T: RigidTransform, M=None):
        """Residuals ``L d`` with ``L^T L = M`` (M frozen if given) and their Jacobian."""
        _, d, M_now = self.terms(T)
        M = M_now if M is None else M
        L = np.swapaxes(np.linalg.cholesky(M), 1, 2)
        r = np.einsum("nij,nj->ni", L, d)
        Jr = L @ self.jacobian_d(T)
        return r, Jr, M


def _correspond(src_world, index: SpatialIndex, max_corr: float):
    dist, idx = index.query_nearest(src_world, max_distance=max_corr)
    ok = np.isfinite(dist)
    return np.flatnonzero(ok), idx[ok], dist[ok]


def register(
    source,
    source_cov,
    target,
    prior: RigidTransform = RigidTransform(),
    max_corr: float = 1.0,
    settings: GicpSettings = GicpSettings(),
) -> RegistrationResult:
    """Align ``source`` (already expressed through ``prior``) to ``target``.

    ``target`` needs ``points``, ``covariances`` and ``index`` attributes.
    The returned ``pose`` is ``correction @ prior``.
    """
    if max_corr <= 0:
        raise ContractViolation("max correspondence distance must be positive")
    src = _as_points(source)
    tgt_pts = np.asarray(target.points)
    tgt_cov = np.asarray(target.covariances)
    index = target.index
    T = RigidTransform()
    mu = settings.initial_damping
    history = []
    converged = False
    it = 0
    for it in range(1, settings.max_iterations + 1):
        si, ti, _ = _correspond(T.apply(src), index, max_corr)
        if len(si) < settings.min_correspondences:
            raise InsufficientCorrespondenceError(
                f"{len(si)} correspondences within {max_corr:.3f} m (floor {settings.min_correspondences})",
                len(si),
            )
        prob = _Problem(src[si], source_cov[si], tgt_pts[ti], tgt_cov[ti])
        H, g, E = prob.normal_equations(T)
        scale = max(np.trace(H) / 6.0, 1e-12)
        accepted = False
        for _ in range(12):
            delta = np.linalg.solve(H + mu * scale * np.eye(6), -g)
            T_new = T @ RigidTransform.exp(delta)
            E_new = prob.cost(T_new)
            if E_new <= E:
                accepted = True
                mu = max(mu / 10.0, 1e-12)
                break
            mu *= 10.0
        if not accepted:
            converged = True
            break
        history.append((E, E_new))
        T = T_new
        if np.linalg.norm(delta) < settings.step_tolerance or (E - E_new) <= settings.relative_tolerance * max(E, 1e-300):
            converged = True
            break

    si, ti, dist = _correspond(T.apply(src), index, max_corr)
    if len(si) < settings.min_correspondences:
        raise InsufficientCorrespondenceError(
            f"{len(si)} correspondences at solution (floor {settings.min_correspondences})", len(si)
        )
    prob = _Problem(src[si], source_cov[si], tgt_pts[ti], tgt_cov[ti])
    H, _, E = prob.normal_equations(T)
    H = 0.5 * (H + H.T)
    return RegistrationResult(
        correction=T,
        pose=T @ prior,
        residual=E,
        correspondences=len(si),
        hessian=H,
        converged=converged,
        iterations=it,
        fitness=float(dist.mean()),
        history=tuple(history),
    )


def condition_number(H_tt) -> float:
    """``|lambda_max| / |lambda_min|`` of a symmetric matrix; ``inf`` if singular."""
    H = np.asarray(H_tt, dtype=float)
    if H.shape != (3, 3) or not np.allclose(H, H.T, rtol=1e-12, atol=1e-12 * max(1.0, np.abs(H).max())):
        raise ContractViolation("condition number needs a symmetric 3x3 matrix")
    lam = np.abs(np.linalg.eigvalsh(H))
    if lam.min() == 0.0:
        return math.inf
    return float(lam.max() / lam.min())
