"""Synthetic multi-person, multi-view scenes with oracle heatmap features.

Each scene holds ground-truth 3D skeletons, a ring of cameras looking at the
workspace, and per-view feature maps with one Gaussian heatmap channel per
joint type. The maps stand in for a 2D pose backbone.
"""

from __future__ import annotations

import logging
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .camgeom import CameraParams, look_at, project_with_depth, triangulate_dlt

log = logging.getLogger(__name__)

DEFAULT_WORKSPACE = ((-2.0, 2.0), (-2.0, 2.0), (0.0, 2.0))

MAGIC = b"MVPD"
VERSION = 1


class GenerationError(RuntimeError):
    pass


class DatasetFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Bone:
    child: int
    parent: int
    # nominal direction in the body frame: (lateral-left, forward, up)
    direction: tuple
    max_angle_deg: float
    length_range: tuple


@dataclass(frozen=True)
class SkeletonTemplate:
    joint_names: tuple
    parent: tuple
    bones: tuple
    root_height_range: tuple = (0.85, 1.05)

    @property
    def J(self) -> int:
        return len(self.joint_names)

    @property
    def bone_length_range(self) -> dict:
        return {(b.child, b.parent): b.length_range for b in self.bones}

    @property
    def limbs(self) -> list[tuple[int, int]]:
        """(parent, child) pairs, one per bone."""
        return [(b.parent, b.child) for b in self.bones]

    def __post_init__(self):
        if len(self.parent) != len(self.joint_names):
            raise ValueError("parent array length must equal joint count")
        if self.parent[0] != 0:
            raise ValueError("joint 0 must be the root (its own parent)")
        for j, p in enumerate(self.parent[1:], start=1):
            if not 0 <= p < j:
                raise ValueError("parents must precede children (tree order)")
        for b in self.bones:
            lo, hi = b.length_range
            if not 0 < lo <= hi:
                raise ValueError("bone length ranges must be positive")
            if self.parent[b.child] != b.parent:
                raise ValueError(f"bone {b} disagrees with parent array")
        if len(self.bones) != self.J - 1:
            raise ValueError("need exactly one bone per non-root joint")


def _template(names, bones, **kw) -> SkeletonTemplate:
    parent = [0] * len(names)
    for b in bones:
        parent[b.child] = b.parent
    return SkeletonTemplate(tuple(names), tuple(parent), tuple(bones), **kw)


UP, DOWN = (0.0, 0.0, 1.0), (0.0, 0.0, -1.0)

TEMPLATE_J4 = _template(
    ["pelvis", "neck", "left_hand", "right_hand"],
    [Bone(1, 0, UP, 20, (0.45, 0.6)),
     Bone(2, 1, (0.6, 0.0, -0.8), 45, (0.5, 0.7)),
     Bone(3, 1, (-0.6, 0.0, -0.8), 45, (0.5, 0.7))],
)

TEMPLATE_J5 = _template(
    ["pelvis", "neck", "head", "left_hand", "right_hand"],
    [Bone(1, 0, UP, 20, (0.45, 0.6)),
     Bone(2, 1, UP, 25, (0.15, 0.25)),
     Bone(3, 1, (0.6, 0.0, -0.8), 45, (0.5, 0.7)),
     Bone(4, 1, (-0.6, 0.0, -0.8), 45, (0.5, 0.7))],
)

TEMPLATE_J15 = _template(
    ["pelvis", "neck", "head", "l_shoulder", "l_elbow", "l_wrist", "r_shoulder", "r_elbow",
     "r_wrist", "l_hip", "l_knee", "l_ankle", "r_hip", "r_knee", "r_ankle"],
    [Bone(1, 0, UP, 15, (0.45, 0.6)),
     Bone(2, 1, UP, 25, (0.15, 0.25)),
     Bone(3, 1, (1.0, 0.0, 0.0), 15, (0.15, 0.22)),
     Bone(4, 3, (0.3, 0.0, -1.0), 50, (0.25, 0.32)),
     Bone(5, 4, (0.0, 0.5, -1.0), 70, (0.22, 0.3)),
     Bone(6, 1, (-1.0, 0.0, 0.0), 15, (0.15, 0.22)),
     Bone(7, 6, (-0.3, 0.0, -1.0), 50, (0.25, 0.32)),
     Bone(8, 7, (0.0, 0.5, -1.0), 70, (0.22, 0.3)),
     Bone(9, 0, (1.0, 0.0, -0.3), 15, (0.08, 0.14)),
     Bone(10, 9, DOWN, 20, (0.38, 0.48)),
     Bone(11, 10, DOWN, 20, (0.36, 0.45)),
     Bone(12, 0, (-1.0, 0.0, -0.3), 15, (0.08, 0.14)),
     Bone(13, 12, DOWN, 20, (0.38, 0.48)),
     Bone(14, 13, DOWN, 20, (0.36, 0.45))],
)

TEMPLATES = {4: TEMPLATE_J4, 5: TEMPLATE_J5, 15: TEMPLATE_J15}


def template_for(J: int) -> SkeletonTemplate:
    try:
        return TEMPLATES[J]
    except KeyError:
        raise ValueError(f"no skeleton template with {J} joints (have {sorted(TEMPLATES)})") from None


@dataclass
class SceneConfig:
    V: int = 5
    N_max: int = 3
    J: int = 5
    workspace: tuple = DEFAULT_WORKSPACE
    H: int = 64
    W: int = 64
    heatmap_sigma_px: float = 2.0
    noise_std: float = 0.0
    distractor_rate: float = 0.0
    stride: int = 1
    ring_radius: float = 6.0
    camera_height: float = 2.5
    radius_jitter: float = 0.3
    height_jitter: float = 0.3
    angle_jitter_deg: float = 5.0
    min_person_distance: float = 0.6
    image_margin_px: float = 2.0

    def __post_init__(self):
        if self.V < 1:
            raise ValueError("V must be >= 1")
        if self.N_max < 1:
            raise ValueError("N_max must be >= 1")
        ws = np.asarray(self.workspace, dtype=np.float64)
        if ws.shape != (3, 2) or np.any(ws[:, 1] <= ws[:, 0]):
            raise ValueError("workspace must be three (min, max) pairs with max > min")
        self.workspace = tuple(tuple(map(float, r)) for r in ws)


@dataclass
class Scene:
    gt_poses: np.ndarray  # [N_gt, J, 3] meters
    cameras: list  # V CameraParams in image pixels
    features: np.ndarray  # [V, C_in, H, W] float32
    workspace: np.ndarray  # [3, 2]
    stride: float = 1.0

    @property
    def V(self) -> int:
        return len(self.cameras)

    @property
    def n_persons(self) -> int:
        return self.gt_poses.shape[0]

    def feature_cameras(self) -> list[CameraParams]:
        return [c.scaled(self.stride) for c in self.cameras]


def scene_seed(base_seed: int, index: int) -> np.random.SeedSequence:
    """Independent per-scene seed for parallel generation."""
    return np.random.SeedSequence([int(base_seed), int(index)])


def _sample_in_cone(rng, axis, max_angle_rad):
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    cos_a = 1.0 - rng.uniform() * (1.0 - np.cos(max_angle_rad))
    sin_a = np.sqrt(max(0.0, 1.0 - cos_a * cos_a))
    phi = rng.uniform(0.0, 2 * np.pi)
    helper = np.array([1.0, 0, 0]) if abs(axis[0]) < 0.9 else np.array([0, 1.0, 0])
    e1 = np.cross(axis, helper)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(axis, e1)
    return cos_a * axis + sin_a * (np.cos(phi) * e1 + np.sin(phi) * e2)


def sample_person(rng, template: SkeletonTemplate, workspace) -> np.ndarray:
    """One skeleton: root uniform over the floor area, bones inside their cones."""
    ws = np.asarray(workspace)
    root = np.array([rng.uniform(*ws[0]), rng.uniform(*ws[1]), rng.uniform(*template.root_height_range)])
    yaw = rng.uniform(0, 2 * np.pi)
    # body frame (lateral-left, forward, up) -> world
    rot = np.array([[np.cos(yaw), -np.sin(yaw), 0], [np.sin(yaw), np.cos(yaw), 0], [0, 0, 1.0]])
    pose = np.zeros((template.J, 3))
    pose[0] = root
    for b in template.bones:
        d = _sample_in_cone(rng, b.direction, np.deg2rad(b.max_angle_deg))
        length = rng.uniform(*b.length_range)
        pose[b.child] = pose[b.parent] + length * (rot @ d)
    return pose


def make_camera_ring(rng, cfg: SceneConfig) -> list[CameraParams]:
    ws = np.asarray(cfg.workspace)
    center = ws.mean(axis=1)
    corners = np.array(np.meshgrid(*ws)).reshape(3, -1).T
    width, height = cfg.W * cfg.stride, cfg.H * cfg.stride
    cams = []
    for v in range(cfg.V):
        ang = 2 * np.pi * v / cfg.V + np.deg2rad(rng.uniform(-1, 1) * cfg.angle_jitter_deg)
        r = cfg.ring_radius + rng.uniform(-1, 1) * cfg.radius_jitter
        hgt = cfg.camera_height + rng.uniform(-1, 1) * cfg.height_jitter
        eye = np.array([center[0] + r * np.cos(ang), center[1] + r * np.sin(ang), hgt])
        probe = look_at(eye, center, 1.0, 1.0, 0.0, 0.0, width, height)
        pc = probe.to_camera(corners)
        if np.any(pc[:, 2] <= 0.1):
            raise GenerationError("camera ring intersects the workspace; increase ring_radius")
        # focal length chosen so the whole workspace lands inside the image
        half = min(width, height) / 2.0 - cfg.image_margin_px * cfg.stride
        f = half / np.max(np.abs(pc[:, :2] / pc[:, 2:3]))
        cams.append(look_at(eye, center, f, f, width / 2.0, height / 2.0, width, height))
    return cams


def render_heatmaps(points_uv: np.ndarray, H: int, W: int, sigma: float) -> np.ndarray:
    """Max-composited Gaussian blobs; ``points_uv[K,2]`` -> ``[H,W]``."""
    u = np.arange(W) + 0.5
    v = np.arange(H) + 0.5
    out = np.zeros((H, W))
    for pu, pv in points_uv:
        gx = np.exp(-((u - pu) ** 2) / (2 * sigma**2))
        gy = np.exp(-((v - pv) ** 2) / (2 * sigma**2))
        np.maximum(out, gy[:, None] * gx[None, :], out=out)
    return out


def _visible(uv, depth, W, H):
    return (depth > 1e-6) & (uv[..., 0] >= 0) & (uv[..., 0] < W) & (uv[..., 1] >= 0) & (uv[..., 1] < H)


def _separable(pose, others, fcams, cfg: SceneConfig) -> bool:
    """Every joint visible in >= 2 views with its blob apart from other people's.

    Same-type joints of two people closer than 3 sigma in an image merge into
    one peak; such a view does not count for either person.
    """
    need = min(2, cfg.V)
    min_sep = 3.0 * cfg.heatmap_sigma_px
    ok = np.zeros((len(others) + 1, pose.shape[0]), dtype=int)
    everyone = list(others) + [pose]
    for cam in fcams:
        uv, depth = project_with_depth(np.stack(everyone), cam)
        vis = _visible(uv, depth, cam.width, cam.height)
        if not vis[-1].all():
            continue
        d = np.linalg.norm(uv[:, None] - uv[None, :], axis=-1)  # [P,P,J]
        d[np.arange(len(everyone)), np.arange(len(everyone))] = np.inf
        ok += vis & (d.min(axis=1) >= min_sep)
    return bool((ok >= need).all())


def generate_scene(rng_seed, config: SceneConfig | None = None, template: SkeletonTemplate | None = None,
                   n_persons: int | None = None) -> Scene:
    """One scene; the person count is uniform in ``1..N_max`` unless ``n_persons`` is given."""
    cfg = config or SceneConfig()
    tpl = template or template_for(cfg.J)
    if tpl.J != cfg.J:
        raise ValueError("template joint count does not match config J")
    rng = np.random.default_rng(rng_seed)
    ws = np.asarray(cfg.workspace)
    cams = make_camera_ring(rng, cfg)
    fcams = [c.scaled(cfg.stride) for c in cams]

    n_gt = int(rng.integers(1, cfg.N_max + 1))
    if n_persons is not None:
        if not 1 <= n_persons <= cfg.N_max:
            raise ValueError("n_persons must lie in 1..N_max")
        n_gt = int(n_persons)
    persons: list[np.ndarray] = []
    attempts = 0
    while len(persons) < n_gt:
        attempts += 1
        if attempts > 10 * cfg.N_max:
            raise GenerationError("rejection sampling exhausted; workspace too small?")
        pose = sample_person(rng, tpl, ws)
        if np.any(pose < ws[:, 0]) or np.any(pose > ws[:, 1]):
            continue
        if any(np.linalg.norm(pose[0, :2] - p[0, :2]) < cfg.min_person_distance for p in persons):
            continue
        if not _separable(pose, persons, fcams, cfg):
            continue
        persons.append(pose)
    gt = np.stack(persons)

    feats = np.zeros((cfg.V, cfg.J, cfg.H, cfg.W))
    for v, cam in enumerate(fcams):
        uv, _ = project_with_depth(gt.reshape(-1, 3), cam)
        uv = uv.reshape(n_gt, cfg.J, 2)
        for j in range(cfg.J):
            pts = list(uv[:, j])
            n_dis = rng.poisson(cfg.distractor_rate) if cfg.distractor_rate > 0 else 0
            hm = render_heatmaps(np.asarray(pts), cfg.H, cfg.W, cfg.heatmap_sigma_px)
            if n_dis:
                centers = rng.uniform([0, 0], [cfg.W, cfg.H], size=(n_dis, 2))
                amps = rng.uniform(0.5, 1.0, size=n_dis)
                for c, a in zip(centers, amps):
                    np.maximum(hm, a * render_heatmaps(c[None], cfg.H, cfg.W, cfg.heatmap_sigma_px), out=hm)
            feats[v, j] = hm
    if cfg.noise_std > 0:
        feats += rng.normal(0.0, cfg.noise_std, size=feats.shape)
    return Scene(gt, cams, feats.astype(np.float32), ws.copy(), float(cfg.stride))


def generate_scenes(n: int, base_seed: int, config: SceneConfig | None = None) -> list[Scene]:
    return [generate_scene(scene_seed(base_seed, i), config) for i in range(n)]


# ---------------------------------------------------------------- oracle


def heatmap_peak(hm: np.ndarray, near=None):
    """Sub-pixel peak of a Gaussian heatmap.

    Takes the global argmax, or hill-climbs from the pixel containing ``near``,
    then refines each axis with a parabola through the log values (exact for an
    isolated Gaussian). Returns ``(uv, amplitude)`` in pixel coordinates.
    """
    H, W = hm.shape
    if near is None:
        r, c = np.unravel_index(np.argmax(hm), hm.shape)
    else:
        c, r = int(np.floor(near[0])), int(np.floor(near[1]))
        if not (0 <= r < H and 0 <= c < W):
            return None, 0.0
        while True:
            rs, cs = max(r - 1, 0), max(c - 1, 0)
            win = hm[rs : r + 2, cs : c + 2]
            dr, dc = np.unravel_index(np.argmax(win), win.shape)
            if win[dr, dc] <= hm[r, c]:
                break
            r, c = rs + dr, cs + dc
    peak = float(hm[r, c])
    if peak <= 0 or r in (0, H - 1) or c in (0, W - 1):
        return np.array([c + 0.5, r + 0.5]), peak
    with np.errstate(divide="ignore", invalid="ignore"):
        lx = np.log(np.asarray(hm[r, c - 1 : c + 2], dtype=np.float64))
        ly = np.log(np.asarray(hm[r - 1 : r + 2, c], dtype=np.float64))
    if not (np.isfinite(lx).all() and np.isfinite(ly).all()):
        return np.array([c + 0.5, r + 0.5]), peak
    dx = 0.5 * (lx[0] - lx[2]) / (lx[0] - 2 * lx[1] + lx[2])
    dy = 0.5 * (ly[0] - ly[2]) / (ly[0] - 2 * ly[1] + ly[2])
    amp = np.exp(lx[1] - 0.25 * (lx[0] - lx[2]) * dx - 0.25 * (ly[0] - ly[2]) * dy)
    return np.array([c + 0.5 + dx, r + 0.5 + dy]), float(amp)


def oracle_triangulate(scene: Scene, amp_tol: float = 1e-6) -> np.ndarray:
    """Recover GT joints from the heatmaps alone (test oracle).

    The GT projection only picks which local peak to read; the position comes
    from the heatmap. A view is skipped when its peak is not a clean unit
    Gaussian or lands more than half a pixel away (blob merged with another
    person's).
    """
    fcams = scene.feature_cameras()
    out = np.full_like(scene.gt_poses, np.nan)
    for n, pose in enumerate(scene.gt_poses):
        for j, X in enumerate(pose):
            obs = []
            for v, cam in enumerate(fcams):
                uv, depth = project_with_depth(X, cam)
                if depth <= 0 or not (0 <= uv[0] < cam.width and 0 <= uv[1] < cam.height):
                    continue
                peak, amp = heatmap_peak(scene.features[v, j], near=uv)
                if peak is not None and abs(amp - 1.0) < amp_tol and np.all(np.abs(peak - uv) < 0.5):
                    obs.append((peak, cam))
            if len(obs) >= 2:
                out[n, j] = triangulate_dlt(obs)
    return out


# ---------------------------------------------------------------- file format


def _encode_scene(s: Scene) -> bytes:
    V, (N, J, _), (_, C, H, W) = s.V, s.gt_poses.shape, s.features.shape
    parts = [struct.pack("<6I", V, N, J, C, H, W), struct.pack("<d", s.stride),
             np.asarray(s.workspace, dtype="<f8").reshape(-1).tobytes()]
    parts += [c.as_vector().astype("<f8").tobytes() for c in s.cameras]
    parts.append(np.ascontiguousarray(s.gt_poses, dtype="<f8").tobytes())
    parts.append(np.ascontiguousarray(s.features, dtype="<f4").tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = memoryview(buf)
        self.pos = 0

    def take(self, n: int) -> memoryview:
        if self.pos + n > len(self.buf):
            raise DatasetFormatError("truncated file")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out


def write_dataset(scenes: Sequence[Scene], path) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<II", VERSION, len(scenes)))
        for s in scenes:
            payload = _encode_scene(s)
            fh.write(payload)
            fh.write(struct.pack("<I", zlib.crc32(payload)))


def read_dataset(path) -> list[Scene]:
    r = _Reader(Path(path).read_bytes())
    if bytes(r.take(4)) != MAGIC:
        raise DatasetFormatError("bad magic (not an MVPD file)")
    version, count = struct.unpack("<II", r.take(8))
    if version != VERSION:
        raise DatasetFormatError(f"unsupported dataset version {version}")
    scenes = []
    for _ in range(count):
        start = r.pos
        V, N, J, C, H, W = struct.unpack("<6I", r.take(24))
        r.take(8 + 48 + V * 18 * 8 + N * J * 3 * 8 + V * C * H * W * 4)
        payload = r.buf[start : r.pos]
        (crc,) = struct.unpack("<I", r.take(4))
        # verify before parsing so corrupt camera blocks report as checksum failures
        if zlib.crc32(payload) != crc:
            raise DatasetFormatError("checksum failure")
        p = _Reader(payload)
        p.take(24)
        (stride,) = struct.unpack("<d", p.take(8))
        ws = np.frombuffer(p.take(48), dtype="<f8").reshape(3, 2).astype(np.float64)
        cams = [CameraParams.from_vector(np.frombuffer(p.take(18 * 8), dtype="<f8")) for _ in range(V)]
        gt = np.frombuffer(p.take(N * J * 3 * 8), dtype="<f8").reshape(N, J, 3).astype(np.float64)
        feats = np.frombuffer(p.take(V * C * H * W * 4), dtype="<f4").reshape(V, C, H, W).astype(np.float32)
        scenes.append(Scene(gt, cams, feats, ws, stride))
    if r.pos != len(r.buf):
        raise DatasetFormatError("trailing bytes after the last scene")
    return scenes
