import itertools

import numpy as np
import pytest

from mvp3d import autodiff as ad
from mvp3d.camgeom import project_with_depth
from mvp3d.setmatch import (
    Assignment,
    CostMatrixError,
    PoseSet,
    cost_matrix,
    focal_loss,
    grouped_match,
    hungarian,
    hungarian_loss,
    match_cost,
    pose_loss,
    total_loss,
)
from conftest import fd_check

WS = ((-2.0, 2.0), (-2.0, 2.0), (0.0, 2.0))
EXT = np.array([4.0, 4.0, 2.0])


def brute_min(cost):
    n = cost.shape[0]
    return min(sum(cost[i, p[i]] for i in range(n)) for p in itertools.permutations(range(n)))


# ---------------------------------------------------------------- PoseSet / Assignment


def test_poseset_validation():
    with pytest.raises(ValueError):
        PoseSet(np.zeros((2, 3, 3)), np.array([0.5, 1.5]))
    with pytest.raises(ValueError):
        PoseSet(np.zeros((2, 3, 2)), np.array([0.5, 0.5]))
    ps = PoseSet(np.zeros((3, 2, 3)), np.array([0.1, 0.5, 0.9]))
    assert len(ps.filter(0.5)) == 2


def test_assignment_requires_permutation():
    with pytest.raises(ValueError):
        Assignment(np.array([0, 0]), 2, 0.0)


# ---------------------------------------------------------------- match cost


def test_match_cost_identical():
    y = np.random.default_rng(0).normal(size=(5, 3))
    assert match_cost(y, y, 0.8, WS) == -0.8


def test_match_cost_constant_offset():
    y = np.zeros((4, 3))
    assert abs(match_cost(y, y + 0.1 * EXT, 0.0, WS) - 0.1) < 1e-15


def test_match_cost_reference(rng):
    for _ in range(20):
        gt, pred = rng.normal(size=(2, 5, 3))
        p = rng.uniform()
        ref = -p + sum(abs(gt[j, k] - pred[j, k]) / EXT[k] for j in range(5) for k in range(3)) / 15
        assert abs(match_cost(gt, pred, p, WS) - ref) < 1e-14


def test_cost_matrix_padding(rng):
    gt = rng.normal(size=(2, 3, 3))
    pred = rng.normal(size=(4, 3, 3))
    conf = rng.uniform(size=4)
    C = cost_matrix(gt, pred, conf, WS)
    assert C.shape == (4, 4)
    np.testing.assert_array_equal(C[2:], 0)
    for g in range(2):
        for n in range(4):
            assert abs(C[g, n] - match_cost(gt[g], pred[n], conf[n], WS)) < 1e-14
    with pytest.raises(CostMatrixError):
        cost_matrix(rng.normal(size=(5, 3, 3)), pred, conf, WS)


# ---------------------------------------------------------------- Hungarian


def test_hungarian_simple():
    a = hungarian([[1, 2], [2, 1]])
    assert a.perm.tolist() == [0, 1] and a.total_cost == 2


def test_hungarian_ties_lowest_index():
    a = hungarian([[0, 1], [0, 1]])
    assert a.total_cost == 1 and a.perm.tolist() == [0, 1]
    assert hungarian(np.zeros((3, 3))).perm.tolist() == [0, 1, 2]
    assert hungarian([[1, 0, 0], [0, 1, 1], [1, 1, 0]]).perm.tolist() == [1, 0, 2]


def test_hungarian_brute_force(rng):
    for i in range(200):
        n = 1 + i % 6
        cost = rng.normal(size=(n, n)) if i % 3 else rng.integers(0, 3, size=(n, n)).astype(float)
        a = hungarian(cost)
        assert abs(a.total_cost - brute_min(cost)) < 1e-9
        # lexicographically smallest among optimal permutations
        if i % 3 == 0:
            best = min(p for p in itertools.permutations(range(n))
                       if abs(sum(cost[r, p[r]] for r in range(n)) - a.total_cost) < 1e-9)
            assert tuple(a.perm.tolist()) == best


def test_hungarian_beats_random_permutations(rng):
    cost = rng.normal(size=(6, 6))
    a = hungarian(cost)
    assert a.total_cost <= np.trace(cost) + 1e-12
    for _ in range(50):
        p = rng.permutation(6)
        assert a.total_cost <= cost[np.arange(6), p].sum() + 1e-12


def test_hungarian_errors():
    with pytest.raises(CostMatrixError):
        hungarian([[0, np.nan], [1, 1]])
    with pytest.raises(CostMatrixError):
        hungarian(np.zeros((2, 3)))
    assert hungarian(np.zeros((0, 0))).perm.size == 0


def test_confidence_shift_invariance(rng):
    for _ in range(100):
        N, G = 4, int(rng.integers(1, 5))
        gt = rng.normal(size=(G, 3, 3))
        pred = rng.normal(size=(N, 3, 3))
        conf = rng.uniform(0, 0.5, size=N)
        c = rng.uniform(0, 0.5)
        a = hungarian(cost_matrix(gt, pred, conf, WS))
        b = hungarian(cost_matrix(gt, pred, conf + c, WS))
        assert a.perm.tolist() == b.perm.tolist()
        assert abs((a.total_cost - b.total_cost) - c * G) < 1e-12


def test_grouped_match_groups_consecutive_joints(rng):
    J = 3
    gt = rng.normal(size=(2, J, 3))
    pred = np.concatenate([gt[1], rng.normal(size=(J, 3)) + 5, gt[0]])
    a = grouped_match(gt, pred, np.full(3 * J, 0.5), J, WS)
    assert a.perm[:2].tolist() == [2, 0] and a.matched_count == 2


# ---------------------------------------------------------------- losses


def test_focal_value():
    v = focal_loss(ad.Node(np.array([0.5])), np.array([1.0])).value[0]
    assert abs(v - (-0.25 * 0.25 * np.log(0.5))) < 1e-15
    assert abs(v - 0.043322) < 1e-6
    v0 = focal_loss(ad.Node(np.array([0.5])), np.array([0.0])).value[0]
    assert abs(v0 - (-0.75 * 0.25 * np.log(0.5))) < 1e-15


def scene_case(scene, N, rng, noise=0.05):
    J = scene.gt_poses.shape[1]
    G = scene.n_persons
    pred = np.concatenate([scene.gt_poses + rng.normal(0, noise, scene.gt_poses.shape),
                           rng.uniform([-1, -1, 0.5], [1, 1, 1.5], size=(N - G, J, 3))])
    order = rng.permutation(N)
    return pred[order].reshape(N * J, 3), rng.normal(0, 1, N * J), J


def test_perfect_match_zero_loss(small_scenes):
    s = small_scenes[0]
    J, G, N = s.gt_poses.shape[1], s.n_persons, 3
    pos = np.concatenate([s.gt_poses, np.ones((N - G, J, 3))]).reshape(-1, 3)
    logits = np.concatenate([np.full(G * J, 60.0), np.full((N - G) * J, -60.0)])
    parts = hungarian_loss(s.gt_poses, ad.Node(pos), ad.Node(logits), J, s.feature_cameras(), s.workspace)
    assert abs(parts.total.value) < 1e-9 and abs(parts.pose) < 1e-9


def test_lambda_linearity(small_scenes, rng):
    s = small_scenes[1]
    pos, lg, J = scene_case(s, 3, rng)
    args = (s.gt_poses, ad.Node(pos), ad.Node(lg), J, s.feature_cameras(), s.workspace)
    a = hungarian_loss(*args, lam=2.5)
    b = hungarian_loss(*args, lam=5.0, assignment=a.assignment)
    assert b.conf == a.conf
    assert abs(b.pose - 2 * a.pose) <= 1e-15 * abs(a.pose)


def test_pose_loss_reference(small_scenes, rng):
    """Independent per-view, per-joint loop for the 3D and 2D normalized L1 terms."""
    s = small_scenes[2]
    gt = s.gt_poses[0]
    pred = gt + rng.normal(0, 0.1, gt.shape)
    cams = s.feature_cameras()
    total, l3, l2 = pose_loss(gt, ad.Node(pred), cams, s.workspace, weight_2d=0.7)
    ref3 = np.mean(np.abs(pred - gt) / EXT)
    num, cnt = 0.0, 0
    for cam in cams:
        for j in range(gt.shape[0]):
            uv, d = project_with_depth(gt[j], cam)
            puv, pd = project_with_depth(pred[j], cam)
            if d > 1e-6 and pd > 1e-6 and 0 <= uv[0] < cam.width and 0 <= uv[1] < cam.height:
                num += abs(puv[0] - uv[0]) / cam.width + abs(puv[1] - uv[1]) / cam.height
                cnt += 2
    assert cnt > 0
    assert abs(l3.value - ref3) < 1e-14
    assert abs(total.value - (ref3 + 0.7 * num / cnt)) < 1e-13


def test_empty_gt_confidence_only(small_scenes, rng):
    s = small_scenes[0]
    J = s.gt_poses.shape[1]
    lg = rng.normal(size=2 * J)
    parts = hungarian_loss(np.zeros((0, J, 3)), ad.Node(rng.normal(size=(2 * J, 3))), ad.Node(lg), J,
                           s.feature_cameras(), s.workspace)
    p = (1 / (1 + np.exp(-lg))).reshape(2, J).mean(axis=1)
    ref = np.sum(-0.75 * p**2 * np.log(1 - p))
    assert abs(parts.total.value - ref) < 1e-14 and parts.pose == 0


def test_gt_shuffle_invariance(small_scenes, rng):
    for s in small_scenes:
        if s.n_persons < 2:
            continue
        pos, lg, J = scene_case(s, 3, rng)
        cams = s.feature_cameras()
        a = hungarian_loss(s.gt_poses, ad.Node(pos), ad.Node(lg), J, cams, s.workspace).total.value
        b = hungarian_loss(s.gt_poses[::-1], ad.Node(pos), ad.Node(lg), J, cams, s.workspace).total.value
        assert abs(a - b) < 1e-12


def test_total_loss_layers(small_scenes, rng):
    s = small_scenes[1]
    cams, ws = s.feature_cameras(), s.workspace
    pos, lg, J = scene_case(s, 3, rng)
    single = hungarian_loss(s.gt_poses, ad.Node(pos), ad.Node(lg), J, cams, ws).total.value
    one, _ = total_loss(s.gt_poses, [ad.Node(pos)], [ad.Node(lg)], J, cams, ws)
    assert one.value == single
    two, _ = total_loss(s.gt_poses, [ad.Node(pos)] * 2, [ad.Node(lg)] * 2, J, cams, ws)
    assert two.value == 2 * single
    pos2, lg2, _ = scene_case(s, 3, rng, noise=0.2)
    mixed, parts = total_loss(s.gt_poses, [ad.Node(pos), ad.Node(pos2)], [ad.Node(lg), ad.Node(lg2)], J, cams, ws)
    second = hungarian_loss(s.gt_poses, ad.Node(pos2), ad.Node(lg2), J, cams, ws).total.value
    assert abs(mixed.value - (single + second)) < 1e-12
    assert len(parts) == 2
    with pytest.raises(ValueError):
        total_loss(s.gt_poses, [], [], J, cams, ws)


def test_loss_gradient_fixed_assignment(small_scenes, rng):
    s = small_scenes[3]
    cams, ws = s.feature_cameras(), s.workspace
    pos, lg, J = scene_case(s, 3, rng)
    fixed = hungarian_loss(s.gt_poses, ad.Node(pos), ad.Node(lg), J, cams, ws).assignment

    def build(p, l):
        return hungarian_loss(s.gt_poses, p, l, J, cams, ws, assignment=fixed).total

    fd_check(build, pos, lg)
