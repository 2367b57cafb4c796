"""Pinhole cameras, ray fields, bilinear feature sampling and DLT triangulation.

Conventions:

* world -> camera is ``x_cam = R @ x_world + t`` (meters);
* pixel ``(col, row)`` covers ``[col, col+1) x [row, row+1)`` so its center
  sits at ``(col + 0.5, row + 0.5)``;
* feature-map coordinates are image coordinates divided by the feature stride.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad

BEHIND_EPS = 1e-6


class BehindCameraError(ValueError):
    pass


class DegenerateGeometryError(ValueError):
    pass


@dataclass
class CameraParams:
    fx: float
    fy: float
    cx: float
    cy: float
    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))
    width: int = 64
    height: int = 64

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)
        self.fx, self.fy, self.cx, self.cy = map(float, (self.fx, self.fy, self.cx, self.cy))
        self.width, self.height = int(self.width), int(self.height)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not np.allclose(self.R.T @ self.R, np.eye(3), atol=1e-9, rtol=0):
            raise ValueError("R is not orthonormal")
        if abs(np.linalg.det(self.R) - 1.0) > 1e-9:
            raise ValueError("R must be a proper rotation (det +1)")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.R.T @ self.t

    @property
    def P(self) -> np.ndarray:
        return self.K @ np.hstack([self.R, self.t[:, None]])

    def to_camera(self, pts) -> np.ndarray:
        return np.asarray(pts, dtype=np.float64) @ self.R.T + self.t

    def as_vector(self) -> np.ndarray:
        """fx, fy, cx, cy, R (row-major), t, width, height as 18 doubles."""
        return np.concatenate([[self.fx, self.fy, self.cx, self.cy], self.R.reshape(-1), self.t,
                               [self.width, self.height]]).astype(np.float64)

    @classmethod
    def from_vector(cls, vec) -> "CameraParams":
        vec = np.asarray(vec, dtype=np.float64)
        return cls(vec[0], vec[1], vec[2], vec[3], vec[4:13].reshape(3, 3), vec[13:16],
                   int(vec[16]), int(vec[17]))

    def scaled(self, stride: float) -> "CameraParams":
        """Same camera expressed in feature-map pixels for the given stride."""
        return CameraParams(self.fx / stride, self.fy / stride, self.cx / stride, self.cy / stride,
                            self.R, self.t, int(round(self.width / stride)), int(round(self.height / stride)))


def look_at(eye, target, fx, fy, cx, cy, width, height, up=(0.0, 0.0, 1.0)) -> CameraParams:
    """Camera at ``eye`` looking at ``target``; image y axis points roughly down."""
    eye = np.asarray(eye, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64) - eye
    z /= np.linalg.norm(z)
    x = np.cross(z, np.asarray(up, dtype=np.float64))
    if np.linalg.norm(x) < 1e-9:
        raise DegenerateGeometryError("viewing direction parallel to up vector")
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    R = np.stack([x, y, z])
    return CameraParams(fx, fy, cx, cy, R, -R @ eye, width, height)


def project(y, cam: CameraParams) -> np.ndarray:
    """Project world point(s) ``[..., 3]`` to pixels ``[..., 2]``.

    Raises :class:`BehindCameraError` if any point has camera depth <= 1e-6 m.
    """
    uv, depth = project_with_depth(y, cam)
    if np.any(depth <= BEHIND_EPS):
        raise BehindCameraError("point behind camera")
    return uv


def project_with_depth(y, cam: CameraParams):
    """Projection without the depth check; also returns camera-frame depth."""
    pc = cam.to_camera(y)
    z = pc[..., 2]
    zs = np.where(np.abs(z) > BEHIND_EPS, z, BEHIND_EPS)
    u = cam.fx * pc[..., 0] / zs + cam.cx
    v = cam.fy * pc[..., 1] / zs + cam.cy
    return np.stack([u, v], axis=-1), z


def project_node(y: ad.Node, cam: CameraParams) -> tuple[ad.Node, np.ndarray]:
    """Differentiable projection of ``y[M,3]``; depth is clamped to 1e-6 m.

    Returns the pixel node ``[M,2]`` and the boolean in-front mask ``[M]``.
    """
    R = np.asarray(cam.R, dtype=y.dtype)
    pc = ad.add(ad.matmul(y, R.T), cam.t.astype(y.dtype))
    depth = pc.value[:, 2]
    front = depth > BEHIND_EPS
    z = ad.clip(pc[:, 2:3], BEHIND_EPS, np.inf)
    xy = ad.div(pc[:, 0:2], z)
    uv = ad.add(ad.mul(xy, np.array([cam.fx, cam.fy], dtype=y.dtype)), np.array([cam.cx, cam.cy], dtype=y.dtype))
    return uv, front


def ray_field(cam: CameraParams) -> np.ndarray:
    """Unit world-frame ray through every pixel center, shape ``[3, H, W]``."""
    u = np.arange(cam.width, dtype=np.float64) + 0.5
    v = np.arange(cam.height, dtype=np.float64) + 0.5
    uu, vv = np.meshgrid(u, v)
    d = np.stack([(uu - cam.cx) / cam.fx, (vv - cam.cy) / cam.fy, np.ones_like(uu)])
    d /= np.linalg.norm(d, axis=0, keepdims=True)
    return np.einsum("ji,jhw->ihw", cam.R, d)


def coord_field(width: int, height: int) -> np.ndarray:
    """Pixel-center coordinates normalized to [0, 1], shape ``[2, H, W]``."""
    u = (np.arange(width) + 0.5) / width
    v = (np.arange(height) + 0.5) / height
    uu, vv = np.meshgrid(u, v)
    return np.stack([uu, vv])


def _bilinear_corners(pts: np.ndarray, h: int, w: int):
    x = pts[..., 0] - 0.5
    y = pts[..., 1] - 0.5
    x0 = np.floor(x)
    y0 = np.floor(y)
    fx = x - x0
    fy = y - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    xs = np.stack([x0, x0 + 1, x0, x0 + 1], axis=-1)
    ys = np.stack([y0, y0, y0 + 1, y0 + 1], axis=-1)
    wts = np.stack([(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy], axis=-1)
    # d(weight)/dx and d(weight)/dy
    dwx = np.stack([-(1 - fy), (1 - fy), -fy, fy], axis=-1)
    dwy = np.stack([-(1 - fx), -fx, (1 - fx), fx], axis=-1)
    valid = (xs >= 0) & (xs < w) & (ys >= 0) & (ys < h)
    xs = np.clip(xs, 0, w - 1)
    ys = np.clip(ys, 0, h - 1)
    return xs, ys, wts * valid, dwx * valid, dwy * valid


def bilinear_sample_batch(Z, pts) -> ad.Node:
    """Sample ``Z[B,C,H,W]`` at ``pts[B,P,2]`` (pixel coords) -> ``[B,P,C]``.

    Neighbors outside the map count as zeros. Differentiable w.r.t. ``Z`` and
    ``pts``; ``pts`` may be a plain array.
    """
    Z = ad.as_node(Z)
    pts = pts if isinstance(pts, ad.Node) else ad.Node(pts, dtype=Z.dtype)
    B, C, H, W = Z.shape
    P = pts.shape[1]
    xs, ys, wts, dwx, dwy = _bilinear_corners(pts.value, H, W)
    flat_idx = (np.arange(B)[:, None, None] * (H * W) + ys * W + xs)  # [B,P,4]
    Zt = Z.value.transpose(0, 2, 3, 1).reshape(B * H * W, C)
    corner_vals = Zt[flat_idx]  # [B,P,4,C]
    out = np.einsum("bpk,bpkc->bpc", wts, corner_vals)

    def bw(g):
        gZ = None
        gp = None
        if Z.requires_grad:
            contrib = wts[..., None] * g[:, :, None, :]  # [B,P,4,C]
            gZt = np.zeros((B * H * W, C), dtype=Z.dtype)
            np.add.at(gZt, flat_idx.reshape(-1), contrib.reshape(-1, C))
            gZ = gZt.reshape(B, H, W, C).transpose(0, 3, 1, 2)
        if pts.requires_grad:
            gx = np.einsum("bpk,bpkc,bpc->bp", dwx, corner_vals, g)
            gy = np.einsum("bpk,bpkc,bpc->bp", dwy, corner_vals, g)
            gp = np.stack([gx, gy], axis=-1)
        return gZ, gp

    node = ad._make(out, (Z, pts), bw, "bilinear_sample")
    assert node.shape == (B, P, C)
    return node


def bilinear_sample(Z, p) -> ad.Node:
    """Sample ``Z[C,H,W]`` at pixel position(s) ``p`` of shape ``[2]`` or ``[P,2]``."""
    Z = ad.as_node(Z)
    single = np.ndim(p.value if isinstance(p, ad.Node) else p) == 1
    p = p if isinstance(p, ad.Node) else ad.Node(p, dtype=Z.dtype)
    pts = ad.reshape(p, (1, -1, 2))
    out = bilinear_sample_batch(ad.reshape(Z, (1,) + Z.shape), pts)
    return ad.reshape(out, (Z.shape[0],)) if single else ad.reshape(out, (-1, Z.shape[0]))


def triangulate_dlt(observations) -> np.ndarray:
    """Linear least-squares triangulation from ``[(uv, cam), ...]`` (>= 2 views)."""
    obs = list(observations)
    if len(obs) < 2:
        raise DegenerateGeometryError("need at least two views")
    rows = []
    for uv, cam in obs:
        # normalized image coordinates keep the system well conditioned
        xn = (uv[0] - cam.cx) / cam.fx
        yn = (uv[1] - cam.cy) / cam.fy
        P = np.hstack([cam.R, cam.t[:, None]])
        rows.append(xn * P[2] - P[0])
        rows.append(yn * P[2] - P[1])
    A = np.asarray(rows)
    A /= np.linalg.norm(A, axis=1, keepdims=True)
    _, s, vt = np.linalg.svd(A)
    if s[2] <= 1e-10 * s[0]:
        raise DegenerateGeometryError("rank-deficient triangulation system")
    X = vt[-1]
    if abs(X[3]) < 1e-12:
        raise DegenerateGeometryError("point at infinity")
    return X[:3] / X[3]
