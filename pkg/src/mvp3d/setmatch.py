"""Grouped bipartite matching and the Hungarian set loss.

Predictions come as ``M = N*J`` joints; every consecutive ``J`` of them form one
person whose confidence is the mean of its joints' sigmoid scores. Ground truth
is padded with empty slots to ``N`` and matched one-to-one against persons.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .camgeom import BEHIND_EPS, CameraParams, project_node, project_with_depth


class CostMatrixError(ValueError):
    pass


@dataclass
class PoseSet:
    poses: np.ndarray  # [N,J,3]
    confidences: np.ndarray  # [N]

    def __post_init__(self):
        self.poses = np.asarray(self.poses, dtype=np.float64)
        self.confidences = np.asarray(self.confidences, dtype=np.float64)
        if self.poses.ndim != 3 or self.poses.shape[-1] != 3:
            raise ValueError("poses must be [N,J,3]")
        if self.confidences.shape != self.poses.shape[:1]:
            raise ValueError("need one confidence per pose")
        if np.any((self.confidences < 0) | (self.confidences > 1)):
            raise ValueError("confidences must lie in [0, 1]")

    def __len__(self):
        return self.poses.shape[0]

    def filter(self, threshold: float) -> "PoseSet":
        keep = self.confidences >= threshold
        return PoseSet(self.poses[keep], self.confidences[keep])


@dataclass
class Assignment:
    perm: np.ndarray  # GT slot n -> prediction perm[n]
    matched_count: int
    total_cost: float

    def __post_init__(self):
        self.perm = np.asarray(self.perm, dtype=np.int64)
        if sorted(self.perm.tolist()) != list(range(len(self.perm))):
            raise ValueError("perm must be a permutation")


# ---------------------------------------------------------------- Hungarian


def _solve(cost: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Shortest augmenting path assignment for a square matrix, O(n^3).

    Returns ``(row_to_col, u, v)`` with dual potentials so that
    ``cost[i, j] - u[i] - v[j] >= 0`` and equality on the chosen edges.
    """
    n = cost.shape[0]
    INF = np.inf
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    col_owner = np.zeros(n + 1, dtype=np.int64)  # 1-based row matched to column j; 0 = free
    way = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, n + 1):
        col_owner[0] = i
        j0 = 0
        minv = np.full(n + 1, INF)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = col_owner[j0]
            delta = INF
            j1 = -1
            for j in range(1, n + 1):
                if used[j]:
                    continue
                cur = cost[i0 - 1, j - 1] - u[i0] - v[j]
                if cur < minv[j]:
                    minv[j] = cur
                    way[j] = j0
                if minv[j] < delta:
                    delta = minv[j]
                    j1 = j
            for j in range(n + 1):
                if used[j]:
                    u[col_owner[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if col_owner[j0] == 0:
                break
        while True:
            j1 = way[j0]
            col_owner[j0] = col_owner[j1]
            j0 = j1
            if j0 == 0:
                break
    row_to_col = np.empty(n, dtype=np.int64)
    for j in range(1, n + 1):
        row_to_col[col_owner[j] - 1] = j - 1
    return row_to_col, u[1:], v[1:]


def _has_perfect_matching(adj: np.ndarray, rows: list[int], cols_free: np.ndarray) -> bool:
    """Kuhn's augmenting-path check on the tight-edge graph."""
    match_col = {}

    def try_row(r, seen):
        for c in np.flatnonzero(adj[r] & cols_free):
            if c in seen:
                continue
            seen.add(c)
            if c not in match_col or try_row(match_col[c], seen):
                match_col[c] = r
                return True
        return False

    return all(try_row(r, set()) for r in rows)


def hungarian(cost, matched_count: int | None = None) -> Assignment:
    """Minimum-cost permutation of a square cost matrix.

    Among equal-cost optima the lexicographically smallest permutation wins
    (row 0 takes the lowest column it can, then row 1, ...).
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.shape[0] != cost.shape[1]:
        raise CostMatrixError("cost matrix must be square")
    if np.isnan(cost).any():
        raise CostMatrixError("cost matrix contains NaN")
    if not np.isfinite(cost).all():
        raise CostMatrixError("cost matrix contains infinite entries")
    n = cost.shape[0]
    if n == 0:
        return Assignment(np.zeros(0, dtype=np.int64), 0, 0.0)
    _, u, v = _solve(cost)
    reduced = cost - u[:, None] - v[None, :]
    tol = 1e-9 * max(1.0, float(np.abs(cost).max()))
    tight = reduced <= tol
    perm = np.empty(n, dtype=np.int64)
    free = np.ones(n, dtype=bool)
    for i in range(n):
        for c in np.flatnonzero(tight[i] & free):
            free[c] = False
            if _has_perfect_matching(tight, list(range(i + 1, n)), free):
                perm[i] = c
                break
            free[c] = True
        else:  # pragma: no cover - dual feasibility guarantees a tight perfect matching
            raise CostMatrixError("no tight perfect matching found")
    total = float(sum(cost[i, perm[i]] for i in range(n)))
    return Assignment(perm, n if matched_count is None else matched_count, total)


# ---------------------------------------------------------------- costs


def _extent(workspace) -> np.ndarray:
    ws = np.asarray(workspace, dtype=np.float64)
    return ws[:, 1] - ws[:, 0]


def match_cost(gt_pose, pred_pose, confidence, workspace) -> float:
    """``-confidence + mean |gt - pred|`` with coordinates divided by workspace extents."""
    ext = _extent(workspace)
    diff = (np.asarray(gt_pose) - np.asarray(pred_pose)) / ext
    return float(-confidence + np.mean(np.abs(diff)))


def cost_matrix(gt_poses, pred_poses, confidences, workspace) -> np.ndarray:
    """Square ``[N,N]`` cost; rows past the real GT are empty slots with zero cost."""
    gt = np.asarray(gt_poses, dtype=np.float64)
    pred = np.asarray(pred_poses, dtype=np.float64)
    N = pred.shape[0]
    if gt.shape[0] > N:
        raise CostMatrixError(f"{gt.shape[0]} ground-truth persons but only {N} prediction slots")
    ext = _extent(workspace)
    cost = np.zeros((N, N))
    if gt.shape[0]:
        l1 = np.abs((gt[:, None] - pred[None]) / ext).mean(axis=(2, 3))
        cost[: gt.shape[0]] = -np.asarray(confidences)[None, :] + l1
    return cost


def grouped_match(gt_poses, positions: np.ndarray, joint_probs: np.ndarray, J: int, workspace) -> Assignment:
    """Group ``M`` joints into persons and match them against GT."""
    poses = np.asarray(positions).reshape(-1, J, 3)
    conf = np.asarray(joint_probs).reshape(-1, J).mean(axis=1)
    return hungarian(cost_matrix(gt_poses, poses, conf, workspace), matched_count=len(gt_poses))


# ---------------------------------------------------------------- losses


def focal_loss(p, target, alpha=0.25, gamma=2.0, eps=1e-12) -> ad.Node:
    """Binary focal loss per element; ``p`` is a probability node."""
    p = ad.clip(ad.as_node(p), eps, 1.0 - eps)
    t = np.asarray(target, dtype=p.dtype)
    pt = ad.add(ad.mul(p, 2 * t - 1), 1 - t)  # p if t=1 else 1-p
    alpha_t = alpha * t + (1 - alpha) * (1 - t)
    return ad.mul(ad.mul(ad.pow_(ad.sub(1.0, pt), gamma), ad.log(pt)), -alpha_t)


def _in_frustum(uv, depth, cam: CameraParams):
    return (depth > BEHIND_EPS) & (uv[..., 0] >= 0) & (uv[..., 0] < cam.width) & (uv[..., 1] >= 0) & (uv[..., 1] < cam.height)


def pose_loss_batch(gt_poses: np.ndarray, pred_poses: ad.Node, cams, workspace, weight_2d=1.0):
    """Summed per-person pose loss for ``G`` matched pairs ``[G,J,3]``.

    Each person contributes its normalized 3D L1 mean plus ``weight_2d`` times
    its normalized 2D L1 mean over (view, joint) pairs where the GT joint falls
    inside the image and the prediction is in front of the camera.
    Returns ``(total, l1_3d_sum, l1_2d_sum)``.
    """
    G, J, _ = pred_poses.shape
    dt = pred_poses.dtype
    ext = _extent(workspace).astype(dt)
    gt = np.asarray(gt_poses, dtype=dt).reshape(G, J, 3)
    l3 = ad.sum_(ad.mean(ad.reshape(ad.abs_(ad.div(ad.sub(pred_poses, gt), ext)), (G, J * 3)), axis=1))
    if not cams or weight_2d == 0:
        return l3, l3, None
    flat_pred = ad.reshape(pred_poses, (G * J, 3))
    flat_gt = gt.reshape(G * J, 3)
    per_person = None
    counts = np.zeros(G)
    for cam in cams:
        gt_uv, gt_depth = project_with_depth(flat_gt, cam)
        pred_uv, front = project_node(flat_pred, cam)
        mask = _in_frustum(gt_uv, gt_depth, cam) & front
        if not mask.any():
            continue
        scale = np.array([cam.width, cam.height], dtype=dt)
        err = ad.mul(ad.abs_(ad.div(ad.sub(pred_uv, gt_uv.astype(dt)), scale)), mask[:, None].astype(dt))
        err = ad.sum_(ad.reshape(err, (G, J * 2)), axis=1)
        per_person = err if per_person is None else ad.add(per_person, err)
        counts += 2 * mask.reshape(G, J).sum(axis=1)
    if per_person is None:
        return l3, l3, None
    inv = np.where(counts > 0, 1.0 / np.maximum(counts, 1), 0.0).astype(dt)
    l2 = ad.sum_(ad.mul(per_person, inv))
    return ad.add(l3, ad.mul(l2, weight_2d)), l3, l2


def pose_loss(gt_pose: np.ndarray, pred_pose: ad.Node, cams, workspace, weight_2d=1.0):
    """Pose loss of one person (see :func:`pose_loss_batch`)."""
    J = pred_pose.shape[0]
    return pose_loss_batch(np.asarray(gt_pose)[None], ad.reshape(pred_pose, (1, J, 3)), cams, workspace, weight_2d)


@dataclass
class LossParts:
    total: ad.Node
    conf: float
    pose: float
    assignment: Assignment


def hungarian_loss(gt_poses, positions: ad.Node, conf_logits: ad.Node, J: int, cams, workspace,
                   lam: float = 2.5, weight_2d: float = 1.0, alpha: float = 0.25, gamma: float = 2.0,
                   assignment: Assignment | None = None) -> LossParts:
    """Set loss for one decoder layer.

    ``positions`` is ``[M,3]``, ``conf_logits`` ``[M]``. The assignment is
    computed on values only (no gradient through matching) unless given.
    """
    gt = np.asarray(gt_poses, dtype=np.float64).reshape(-1, J, 3)
    M = positions.shape[0]
    N = M // J
    poses = ad.reshape(positions, (N, J, 3))
    person_p = ad.mean(ad.reshape(ad.sigmoid(conf_logits), (N, J)), axis=1)
    if assignment is None:
        assignment = hungarian(cost_matrix(gt, poses.value, person_p.value, workspace), matched_count=len(gt))
    perm = assignment.perm
    target = np.zeros(N)
    target[perm[: len(gt)]] = 1.0
    conf = ad.sum_(focal_loss(person_p, target, alpha, gamma))
    if not len(gt):
        return LossParts(conf, float(conf.value), 0.0, assignment)
    matched = ad.getitem(poses, perm[: len(gt)])
    pl, _, _ = pose_loss_batch(gt, matched, cams, workspace, weight_2d)
    pose_term = ad.mul(pl, lam)
    return LossParts(ad.add(conf, pose_term), float(conf.value), float(pose_term.value), assignment)


def total_loss(gt_poses, positions: list, conf_logits: list, J: int, cams, workspace, lam=2.5, weight_2d=1.0,
               assignments: list | None = None):
    """Unweighted sum of per-layer Hungarian losses, each with its own matching.

    Returns ``(loss_node, [LossParts per layer])``.
    """
    if not positions:
        raise ValueError("need at least one decoder layer")
    parts = []
    for l, (pos, lg) in enumerate(zip(positions, conf_logits)):
        a = None if assignments is None else assignments[l]
        parts.append(hungarian_loss(gt_poses, pos, lg, J, cams, workspace, lam, weight_2d, assignment=a))
    total = parts[0].total
    for p in parts[1:]:
        total = ad.add(total, p.total)
    return total, parts
