import numpy as np
import pytest

from ctlio.errors import ContractViolation
from ctlio.geometry import RigidTransform, UnitQuaternion
from ctlio.gicp import estimate_covariances
from ctlio.keyframes import ConnectivityMatrix
from ctlio.mapping import (
    Factor,
    FrameOffset,
    LoopFrame,
    LoopSettings,
    PoseGraph,
    add_connective_factors,
    add_keyframe_node,
    apply_map_update,
    detect_loop,
    loop_candidates,
    optimize,
    total_residual,
)
from ctlio.sim.experiments import loop_closure_run, square_loop_keyframes

from conftest import random_transform


def chain(poses, measurements=None):
    g = PoseGraph()
    for k, p in enumerate(poses):
        z = None if measurements is None or k == 0 else measurements[k - 1]
        g = add_keyframe_node(g, k, p, k - 1 if k else None, z)
    return g


def line(n, step=1.0):
    return [RigidTransform(translation=[step * k, 0.0, 0.0]) for k in range(n)]


def connectivity(values):
    return ConnectivityMatrix(tuple(range(len(values))), np.asarray(values, float))


def test_first_node_gets_prior():
    g = add_keyframe_node(PoseGraph(), 0, RigidTransform())
    assert len(g.nodes) == 1 and g.count("prior") == 1 and g.prior_id == 0


def test_chain_counts_and_connected():
    g = chain(line(5))
    assert g.count("prior") == 1 and g.count("sequential") == 4 and g.is_connected()


def test_duplicate_node_rejected():
    g = chain(line(2))
    with pytest.raises(ContractViolation):
        add_keyframe_node(g, 1, RigidTransform(), 0)


def test_add_node_does_not_mutate():
    g = chain(line(2))
    add_keyframe_node(g, 2, RigidTransform(), 1)
    assert len(g.nodes) == 2


def test_connective_factors_threshold_and_noise():
    g = chain(line(4))
    C = connectivity([[1, .9, .5, .1], [.9, 1, .6, .2], [.5, .6, 1, .95], [.1, .2, .95, 1]])
    g2 = add_connective_factors(g, 3, C, thresh=0.3, zeta=0.1)
    # keyframe 2 is the sequential neighbour, keyframes 0 and 1 fall below the threshold
    assert g2.count("connective") == 0
    g3 = add_connective_factors(g, 2, C, thresh=0.3, zeta=0.1)
    f = {x.i: x for x in g3.factors if x.kind == "connective"}
    assert sorted(f) == [0, 3]
    assert f[0].noise == pytest.approx(0.1 * 0.5)
    assert f[3].noise == pytest.approx(0.1 * 0.05)


def test_connective_noise_floor():
    g = chain(line(3))
    C = connectivity(np.ones((3, 3)))
    f = [x for x in add_connective_factors(g, 2, C).factors if x.kind == "connective"]
    assert len(f) == 1 and f[0].noise == 1e-6


def test_optimize_consistent_graph_is_fixed_point(rng):
    poses = [RigidTransform()]
    for _ in range(6):
        poses.append(poses[-1] @ random_transform(rng, 1.0, 0.3))
    g = optimize(chain(poses))
    for k, p in enumerate(poses):
        assert g.nodes[k].almost_equal(p, 1e-9)


def test_optimize_single_node():
    g = add_keyframe_node(PoseGraph(), 0, RigidTransform(translation=[1, 2, 3]))
    assert optimize(g).nodes[0].almost_equal(g.nodes[0], 0.0)


def test_optimize_does_not_increase_residual(rng):
    truth = line(8)
    noisy = [truth[0]] + [t @ random_transform(rng, 0.2, 0.05) for t in truth[1:]]
    meas = [truth[k].inverse() @ truth[k + 1] for k in range(7)]
    C = connectivity(np.eye(8) + 0.5 * (np.abs(np.subtract.outer(range(8), range(8))) == 2))
    # built incrementally as the mapper does, so each node only links to older ones
    g = PoseGraph()
    for k in range(8):
        g = add_keyframe_node(g, k, noisy[k], k - 1 if k else None, meas[k - 1] if k else None)
        if k >= 2:
            g = add_connective_factors(g, k, C, measurements={k - 2: truth[k - 2].inverse() @ truth[k]})
    assert g.count("connective") == 6
    out = optimize(g)
    assert total_residual(out) <= total_residual(g)
    assert total_residual(out) < 1e-10


def test_optimize_keeps_prior_fixed(rng):
    truth = line(5)
    g = chain([truth[0]] + [t @ random_transform(rng, 0.3, 0.1) for t in truth[1:]],
              [truth[k].inverse() @ truth[k + 1] for k in range(4)])
    assert optimize(g).nodes[0].almost_equal(truth[0], 0.0)


def test_scale_error_with_exact_closure_open_endpoint():
    # three legs of a square with 5 % longer odometry, plus an exact factor back to the start
    corners = [UnitQuaternion.from_axis_angle((0, 0, 1), np.pi / 2 * k) for k in range(4)]
    truth = [RigidTransform(translation=[0, 0, 0])]
    for leg in range(3):
        for _ in range(5):
            step = corners[leg].as_matrix() @ [1.0, 0.0, 0.0]
            truth.append(RigidTransform(corners[leg], truth[-1].translation + step))
    odo_meas = []
    for a, b in zip(truth[:-1], truth[1:]):
        rel = a.inverse() @ b
        odo_meas.append(RigidTransform(rel.rotation, 1.05 * rel.translation))
    odo = [truth[0]]
    for m in odo_meas:
        odo.append(odo[-1] @ m)
    g = chain(odo, odo_meas)
    n = len(truth) - 1
    closure = Factor("loop", 0, n, truth[0].inverse() @ truth[n], 1e-3)
    g.factors.append(closure)
    before = np.linalg.norm(odo[n].translation - truth[n].translation)
    out = optimize(g)
    after = np.linalg.norm(out.nodes[n].translation - truth[n].translation)
    assert before == pytest.approx(0.25, rel=1e-9)  # 5 % of the 5 m start-to-end displacement
    assert after < 0.1 * before


def test_map_update_identity_is_noop():
    old = {k: p for k, p in enumerate(line(4))}
    off, upd = apply_map_update(FrameOffset(), old, dict(old))
    assert upd == {} and off.transform.almost_equal(RigidTransform(), 0.0)


def test_map_update_reanchors_latest(rng):
    old = {k: p for k, p in enumerate(line(5))}
    new = {k: random_transform(rng, 0.1, 0.02) @ p for k, p in old.items()}
    off, upd = apply_map_update(FrameOffset(), old, new)
    assert 4 not in upd
    assert off.to_map(old[4]).almost_equal(new[4], 1e-12)
    for k, p in upd.items():
        assert off.to_map(p).almost_equal(new[k], 1e-12)


def test_map_update_ignores_unknown_keyframes():
    old = {0: RigidTransform()}
    off, upd = apply_map_update(FrameOffset(), old, {5: RigidTransform(translation=[1, 0, 0])})
    assert upd == {}


def test_no_candidates_before_enough_keyframes():
    g = chain(line(5))
    assert loop_candidates(g, 4, radius=100.0, exclude_recent=10) is None


def test_candidates_within_radius():
    g = chain(line(15) + [RigidTransform(translation=[0.5, 0, 0])])
    c = loop_candidates(g, 15, radius=2.0, exclude_recent=10)
    assert c.ids == (0, 1, 2) and c.closest == 0


def _loop_scene(rng, n=14, offset=(0.2, 0.1, 0.0)):
    world = np.concatenate([rng.uniform([-5, -5, 0], [5, 5, 0.02], (1500, 3)),
                            rng.uniform([-5, 4.98, 0], [5, 5, 3], (1000, 3)),
                            rng.uniform([4.98, -5, 0], [5, 5, 3], (1000, 3)),
                            rng.uniform([-1, -1, 0], [1, 1, 2], (800, 3))])
    angles = np.linspace(0, 2 * np.pi, n)
    truth = [RigidTransform(UnitQuaternion.from_axis_angle((0, 0, 1), a), [np.cos(a) * 0.3, np.sin(a) * 0.3, 1.0])
             for a in angles]
    est = list(truth)
    est[-1] = RigidTransform(truth[-1].rotation, truth[-1].translation + np.asarray(offset))
    frames = {}
    for k, t in enumerate(truth):
        body = t.inverse().apply(world[rng.permutation(len(world))[:2000]])
        frames[k] = LoopFrame(k, body, estimate_covariances(body, 20))
    return chain(est), frames, truth


def test_detect_loop_recovers_relative_pose(rng):
    g, frames, truth = _loop_scene(rng)
    res = detect_loop(g, 13, frames, LoopSettings(radius=2.0, exclude_recent=10, max_corr=1.0))
    assert res.factor is not None and res.factor.kind == "loop"
    expected = truth[res.factor.i].inverse() @ truth[13]
    d = expected.inverse() @ res.factor.measurement
    assert np.linalg.norm(d.translation) < 0.03 and d.rotation_angle() < np.radians(0.5)


def test_detect_loop_rejects_unrelated_cloud(rng):
    g, frames, _ = _loop_scene(rng)
    junk = rng.uniform(20, 30, (500, 3))
    frames[13] = LoopFrame(13, junk, estimate_covariances(junk, 20))
    assert detect_loop(g, 13, frames, LoopSettings(radius=2.0, exclude_recent=10, max_corr=1.0)).factor is None


@pytest.fixture(scope="module")
def loop_keyframes():
    return square_loop_keyframes()


def test_closures_remove_heading_drift(loop_keyframes):
    off = loop_closure_run(loop_keyframes, closures=False, scale=1.0, yaw_bias=0.005)
    on = loop_closure_run(loop_keyframes, closures=True, scale=1.0, yaw_bias=0.005)
    assert on.loops > 0 and off.loops == 0
    assert on.final_error < 0.5 * off.final_error
