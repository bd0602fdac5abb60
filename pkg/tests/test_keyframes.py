import math

import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st

from ctlio.errors import ContractViolation
from ctlio.geometry import RigidTransform, SpatialIndex, StampedPointCloud, UnitQuaternion
from ctlio.keyframes import (
    ConnectivityMatrix,
    Keyframe,
    KeyframeThresholds,
    SpaciousnessTracker,
    axis_degeneracy,
    build_submap,
    extract_submap,
    global_degeneracy,
    greedy_match_count,
    jaccard,
    jaccard_upper_bound,
    select_submap_keyframes,
    should_insert_keyframe,
    update_connectivity,
    update_spaciousness,
)

from conftest import random_transform, seeds
from oracles import greedy_pairs_brute, jaccard_brute


def kf(id, points, pose=None, degeneracy=math.inf):
    pose = pose or RigidTransform()
    return Keyframe.create(id, pose, StampedPointCloud(np.asarray(points, float), frame="world"), degeneracy,
                           k_neighbors=min(20, len(points)))


# --- spaciousness ---------------------------------------------------------------


def test_spaciousness_constant_radius(rng):
    d = rng.normal(size=(100, 3))
    d = 5 * d / np.linalg.norm(d, axis=1, keepdims=True)
    assert update_spaciousness(SpaciousnessTracker(), d).m == pytest.approx(5.0, abs=1e-12)


def test_spaciousness_converges(rng):
    pts = rng.normal(size=(51, 3))
    M = float(np.sort(np.linalg.norm(pts, axis=1))[25])  # sort oracle, odd count
    tr = SpaciousnessTracker(m=100.0)
    for _ in range(400):
        tr = update_spaciousness(tr, pts)
    assert tr.m == pytest.approx(M, rel=1e-6)


def test_spaciousness_median_matches_sort(rng):
    pts = rng.normal(size=(200, 3))
    r = np.sort(np.linalg.norm(pts, axis=1))
    assert update_spaciousness(SpaciousnessTracker(), pts).m == pytest.approx(0.5 * (r[99] + r[100]), abs=1e-12)


def test_spaciousness_empty_rejected():
    with pytest.raises(ContractViolation):
        update_spaciousness(SpaciousnessTracker(), np.zeros((0, 3)))


# --- degeneracy ---------------------------------------------------------------------


def test_degeneracy_unit_case():
    assert global_degeneracy(np.eye(3), 1.0, 1.0) == 1.0


def test_degeneracy_arithmetic():
    assert global_degeneracy(np.diag([100.0, 100.0, 0.01]), 10.0, 4.0) == pytest.approx(5000.0, rel=1e-12)


def test_degeneracy_quadruples_with_spaciousness(rng):
    A = rng.normal(size=(3, 3))
    H = A @ A.T + np.eye(3)
    assert global_degeneracy(H, 2.0, 0.3) == pytest.approx(4 * global_degeneracy(H, 1.0, 0.3), rel=1e-12)


@given(seeds, st.floats(0.01, 100.0))
def test_degeneracy_eigen_scaling(seed, c):
    A = np.random.default_rng(seed).normal(size=(3, 3))
    H = A @ A.T + 0.1 * np.eye(3)
    assert global_degeneracy(c * H, 1.3, 0.2) == pytest.approx(global_degeneracy(H, 1.3, 0.2) / c, rel=1e-9)


def test_degeneracy_singular_is_inf():
    assert math.isinf(global_degeneracy(np.diag([1.0, 1.0, 0.0]), 1.0, 1.0))


def test_degeneracy_rejects_nonpositive_sparsity():
    with pytest.raises(ContractViolation):
        global_degeneracy(np.eye(3), 1.0, 0.0)


def test_axis_degeneracy_along_eigenvector():
    H = np.diag([0.01, 100.0, 100.0])
    assert axis_degeneracy(H, 10.0, 4.0, (1, 0, 0)) == pytest.approx(global_degeneracy(H, 10.0, 4.0))


# --- keyframe insertion -----------------------------------------------------------------


def test_same_pose_and_degeneracy_no_insert(rng):
    k = kf(0, rng.normal(size=(30, 3)), degeneracy=2.0)
    assert should_insert_keyframe(RigidTransform(), 2.0, [k]) == (False, ())


def test_two_metres_is_motion(rng):
    k = kf(0, rng.normal(size=(30, 3)), degeneracy=2.0)
    T = RigidTransform(translation=[2.0, 0.0, 0.0])
    assert should_insert_keyframe(T, 2.0, [k], KeyframeThresholds(translation=1.0)) == (True, ("motion",))


def test_degeneracy_jump_fires(rng):
    k = kf(0, rng.normal(size=(30, 3)), degeneracy=2.0)
    assert should_insert_keyframe(RigidTransform(), 3.5, [k], KeyframeThresholds(degeneracy=1.0)) == \
        (True, ("degeneracy",))


def test_rotation_is_motion(rng):
    k = kf(0, rng.normal(size=(30, 3)), degeneracy=2.0)
    T = RigidTransform(UnitQuaternion.from_axis_angle((0, 0, 1), math.radians(40)))
    assert should_insert_keyframe(T, 2.0, [k]) == (True, ("motion",))


def test_motion_measured_to_nearest_but_degeneracy_to_latest(rng):
    pts = rng.normal(size=(30, 3))
    a = kf(0, pts, RigidTransform(translation=[0.0, 0.0, 0.0]), degeneracy=5.0)
    b = kf(1, pts, RigidTransform(translation=[10.0, 0.0, 0.0]), degeneracy=2.0)
    # near keyframe 0, degeneracy equal to keyframe 0's but far from the latest
    assert should_insert_keyframe(RigidTransform(translation=[0.2, 0, 0]), 5.0, [a, b]) == (True, ("degeneracy",))


def test_bootstrap_inserts():
    assert should_insert_keyframe(RigidTransform(), 1.0, []) == (True, ("bootstrap",))


# --- jaccard -----------------------------------------------------------------------------


def test_identical_clouds_one(rng):
    a = rng.normal(size=(100, 3))
    assert jaccard(a, a.copy(), 0.1) == 1.0


def test_disjoint_clouds_zero(rng):
    a = rng.normal(size=(100, 3))
    assert jaccard(a, a + 100.0, 0.5) == 0.0


def test_half_coincident_is_one_third():
    g = np.arange(150.0)
    a = np.column_stack([g[:100], np.zeros(100), np.zeros(100)])
    b = np.column_stack([g[50:], np.zeros(100), np.zeros(100)])
    assert jaccard(a, b, 0.1) == pytest.approx(1 / 3, abs=1e-15)
    assert jaccard_brute(a, b, 0.1) == pytest.approx(1 / 3, abs=1e-15)


def test_jaccard_matches_brute_oracle(rng):
    for t in range(20):
        n, m = rng.integers(1, 400, 2)
        a = rng.uniform(0, 3, (n, 3))
        b = rng.uniform(0, 3, (m, 3))
        r = float(rng.choice([0.1, 0.25, 0.5]))
        assert jaccard(a, b, r) == jaccard_brute(a, b, r)


def test_greedy_count_matches_brute_on_grids(rng):
    g = np.stack(np.meshgrid(*[np.arange(6) * 0.25] * 3), -1).reshape(-1, 3)
    for _ in range(20):
        a = g[rng.permutation(len(g))[:150]]
        b = g[rng.permutation(len(g))[:150]] + rng.choice([0.0, 0.25], 3)
        assert greedy_match_count(a, b, 0.25) == greedy_pairs_brute(a, b, 0.25)


def test_greedy_count_exercises_widening(rng):
    # dense clumps exhaust the short candidate lists
    a = rng.normal(0, 0.05, (600, 3))
    b = rng.normal(0, 0.05, (600, 3))
    assert greedy_match_count(a, b, 0.3, k=2, k_wide=4, block=16) == greedy_pairs_brute(a, b, 0.3)


@given(seeds)
def test_jaccard_symmetric(seed):
    r = np.random.default_rng(seed)
    a = r.uniform(0, 2, (r.integers(1, 150), 3))
    b = r.uniform(0, 2, (r.integers(1, 150), 3))
    assert abs(jaccard(a, b, 0.3) - jaccard(b, a, 0.3)) <= 1e-12


@given(seeds)
def test_jaccard_symmetric_for_keyframes(seed):
    r = np.random.default_rng(seed)
    a = kf(3, r.uniform(0, 2, (60, 3)))
    b = kf(7, r.uniform(0, 2, (60, 3)))
    assert jaccard(a, b, 0.3) == jaccard(b, a, 0.3)


@given(seeds)
def test_jaccard_rigid_invariant(seed):
    r = np.random.default_rng(seed)
    a = r.uniform(0, 2, (80, 3))
    b = a[r.permutation(80)[:50]] + r.normal(0, 0.1, (50, 3))
    D = np.linalg.norm(a[:, None] - b[None], axis=-1)
    # continuous clouds have no distance ties; skip the rare draw that straddles the radius
    assume(np.abs(D - 0.15).min() > 1e-9)
    T = random_transform(r, 2.0)
    assert jaccard(a, b, 0.15) == jaccard(T.apply(a), T.apply(b), 0.15)


def test_jaccard_rejects_bad_radius(rng):
    a = rng.normal(size=(5, 3))
    with pytest.raises(ContractViolation):
        jaccard(a, a, 0.0)


@given(seeds)
def test_upper_bound_dominates(seed):
    r = np.random.default_rng(seed)
    a = r.uniform(0, 3, (r.integers(1, 200), 3))
    b = r.uniform(0, 3, (r.integers(1, 200), 3))
    assert jaccard_upper_bound(a, b, 0.3) >= jaccard(a, b, 0.3) - 1e-15


# --- submaps -------------------------------------------------------------------------------


def test_single_keyframe_fallback(rng):
    k = kf(0, rng.normal(size=(40, 3)))
    sm = extract_submap(rng.normal(size=(40, 3)) + 50, [k], 0.9)
    assert sm.keyframe_ids == (0,)


def test_submap_picks_overlapping(rng):
    pts = rng.uniform(0, 3, (200, 3))
    A = kf(0, pts)
    B = kf(1, pts + 100)
    sm = extract_submap(StampedPointCloud(pts.copy(), frame="world"), [A, B], 0.2)
    assert sm.keyframe_ids == (0,)


def test_selection_equals_exhaustive_scoring(rng):
    base = rng.uniform(0, 6, (600, 3))
    kfs = [kf(i, base[rng.permutation(600)[:200]] + rng.normal(0, 0.05, (200, 3)) + off)
           for i, off in enumerate([0.0, 0.5, 2.0, 4.0, 8.0])]
    scan = base[rng.permutation(600)[:300]]
    chosen, _ = select_submap_keyframes(scan, kfs, 0.2, 0.5)
    exact = [k.id for k in kfs if jaccard(scan, k, 0.5) >= 0.2]
    assert [k.id for k in chosen] == exact


def test_submap_point_count_is_sum(rng):
    kfs = [kf(i, rng.normal(size=(30 + 10 * i, 3))) for i in range(4)]
    sm = build_submap(kfs)
    assert len(sm) == sum(len(k.points) for k in kfs)
    assert np.array_equal(sm.covariances[:30], kfs[0].covariances)


def test_submap_needs_keyframes(rng):
    with pytest.raises(ContractViolation):
        extract_submap(rng.normal(size=(5, 3)), [], 0.2)


# --- connectivity ---------------------------------------------------------------------------


def test_first_keyframe_unit_matrix(rng):
    C = update_connectivity(ConnectivityMatrix(), kf(0, rng.normal(size=(30, 3))), [])
    assert C.ids == (0,) and np.array_equal(C.values, [[1.0]])


def test_duplicate_clouds_full_overlap(rng):
    pts = rng.normal(size=(30, 3))
    a, b = kf(0, pts), kf(1, pts.copy())
    C = update_connectivity(update_connectivity(ConnectivityMatrix(), a, []), b, [a])
    assert C.get(0, 1) == C.get(1, 0) == 1.0


def test_incremental_matches_full_recompute(rng):
    base = rng.uniform(0, 5, (400, 3))
    kfs = [kf(i, base[rng.permutation(400)[:150]] + 0.3 * i) for i in range(6)]
    C = ConnectivityMatrix()
    for i, k in enumerate(kfs):
        C = update_connectivity(C, k, kfs[:i])
    full = np.array([[jaccard(a, b, 0.5) for b in kfs] for a in kfs])
    assert np.array_equal(C.values, full)
    assert np.array_equal(C.values, C.values.T)
    assert np.all(np.diag(C.values) == 1.0) and C.values.min() >= 0.0 and C.values.max() <= 1.0


def test_connectivity_rejects_duplicate_id(rng):
    k = kf(0, rng.normal(size=(30, 3)))
    C = update_connectivity(ConnectivityMatrix(), k, [])
    with pytest.raises(ContractViolation):
        update_connectivity(C, k, [k])


def test_keyframe_transform_moves_everything(rng):
    k = kf(0, rng.normal(size=(40, 3)))
    T = random_transform(rng)
    m = k.transformed(T)
    assert np.allclose(m.points, T.apply(k.points))
    assert m.pose.almost_equal(T @ k.pose)
    assert np.allclose(m.covariances, T.R @ k.covariances @ T.R.T)
    assert isinstance(m.index, SpatialIndex) and len(m.index) == 40
