"""Building blocks of the decoder: queries, RayConv, attention, decoder layer.

Parameters live in a flat ``dict[str, Node]``; every function here reads the
entries it needs under a name prefix.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import autodiff as ad
from ..camgeom import BEHIND_EPS, CameraParams, bilinear_sample_batch, project_node, project_with_depth


class ShapeMismatchError(ValueError):
    pass


# ---------------------------------------------------------------- queries


def build_queries(params: dict, mode: str, N: int, J: int, pooled=None) -> ad.Node:
    """Joint queries ``[N*J, C]`` in person-major order.

    ``per_joint`` reads one embedding per joint query; ``hierarchical`` adds
    person and joint embeddings; ``hierarchical_adaptive`` also adds a scene
    vector computed from ``pooled`` (per-view global average features ``[V,C]``).
    """
    if mode == "per_joint":
        q = params["query.joint_query"]
        if q.shape[0] != N * J:
            raise ShapeMismatchError("per-joint query table has the wrong number of rows")
        return q
    h = params["query.person_embed"]
    l = params["query.joint_embed"]
    if h.shape[0] != N or l.shape[0] != J:
        raise ShapeMismatchError("person/joint embedding tables do not match N, J")
    C = h.shape[1]
    q = ad.add(ad.reshape(h, (N, 1, C)), ad.reshape(l, (1, J, C)))
    q = ad.reshape(q, (N * J, C))
    if mode == "hierarchical":
        return q
    if mode != "hierarchical_adaptive":
        raise ShapeMismatchError(f"unknown query mode {mode!r}")
    if pooled is None:
        raise ShapeMismatchError("adaptive queries need pooled view features")
    Wg = params["query.adapt_weight"]
    flat = ad.reshape(pooled, (1, -1))
    if flat.shape[1] != Wg.shape[0]:
        raise ShapeMismatchError("pooled feature width does not match adapt weight (V*C)")
    g = ad.matmul(flat, Wg)
    return ad.add(q, g)


def global_pool(Z) -> ad.Node:
    """Average over the spatial axes: ``[V,C,H,W] -> [V,C]``."""
    return ad.mean(Z, axis=(2, 3))


# ---------------------------------------------------------------- RayConv


def position_channels(mode: str, cams: list[CameraParams], H: int, W: int) -> np.ndarray | None:
    """Per-view positional planes ``[V,P,H,W]`` for the given encoding."""
    from ..camgeom import coord_field, ray_field

    if mode == "none":
        return None
    if mode == "rays":
        return np.stack([ray_field(c) for c in cams])
    if mode == "coords2d":
        return np.stack([coord_field(W, H) for _ in cams])
    raise ShapeMismatchError(f"unknown positional encoding {mode!r}")


def rayconv_input(Z, pos) -> ad.Node:
    """Channel-wise concatenation of features and positional planes."""
    Z = ad.as_node(Z)
    if pos is None:
        return Z
    pos = np.asarray(pos, dtype=Z.dtype)
    if pos.shape[-2:] != Z.shape[-2:] or pos.ndim != Z.ndim:
        raise ShapeMismatchError(f"positional planes {pos.shape} do not match features {Z.shape}")
    return ad.concat([Z, pos], axis=-3)


def rayconv(Z, pos, weight, bias) -> ad.Node:
    """``Conv1x1(Concat(Z, pos))`` for ``Z[C,H,W]`` or a view stack ``Z[V,C,H,W]``.

    ``weight`` is ``[C_out, C+P]``; with ``pos=None`` it must be ``[C_out, C]``.
    """
    X = rayconv_input(Z, pos)
    if weight.shape[1] != X.shape[-3]:
        raise ShapeMismatchError(f"rayconv weight expects {weight.shape[1]} channels, got {X.shape[-3]}")
    H, W = X.shape[-2:]
    lead = X.shape[:-3]
    Xf = ad.reshape(X, lead + (X.shape[-3], H * W))
    out = ad.add(ad.matmul(weight, Xf), ad.reshape(bias, (-1, 1)))
    return ad.reshape(out, lead + (weight.shape[0], H, W))


class DenseFeatures:
    """Sampling source over materialized feature maps ``[V,C,H,W]``."""

    def __init__(self, Z):
        self.Z = ad.as_node(Z)

    @property
    def shape(self):
        return self.Z.shape

    def sample(self, pts) -> ad.Node:
        return bilinear_sample_batch(self.Z, pts)


class FusedRayConvFeatures:
    """Samples ``Conv1x1(X)`` without materializing it.

    Bilinear weights (zero for off-map corners) are applied to the conv output
    at each corner pixel, so values and gradients equal sampling the dense map.
    """

    def __init__(self, X, weight, bias):
        X = ad.as_node(X)
        self.X = X
        V, Cx, H, W = X.shape
        self._rows = ad.reshape(ad.transpose(X, (0, 2, 3, 1)), (V * H * W, Cx))
        self.weight = weight
        self.bias = bias

    @property
    def shape(self):
        V, _, H, W = self.X.shape
        return (V, self.weight.shape[0], H, W)

    def sample(self, pts) -> ad.Node:
        from ..camgeom import _bilinear_corners

        X = self.X
        V, Cx, H, W = X.shape
        pts = pts if isinstance(pts, ad.Node) else ad.Node(pts, dtype=X.dtype)
        P = pts.shape[1]
        xs, ys, wts, _, _ = _bilinear_corners(pts.value, H, W)
        flat = np.arange(V)[:, None, None] * (H * W) + ys * W + xs  # [V,P,4]
        corners = ad.take_rows(self._rows, flat)  # [V*P*4, Cx]
        conv = ad.add(ad.matmul(corners, ad.transpose(self.weight, (1, 0))), self.bias)  # [V*P*4, C]
        conv = ad.reshape(conv, (V, P, 4, -1))
        if pts.requires_grad:
            # gradient w.r.t. positions goes through a dense-equivalent bilinear op
            return _corner_blend(conv, pts, H, W)
        return ad.sum_(ad.mul(conv, wts[..., None].astype(X.dtype)), axis=2)


def _corner_blend(conv, pts, H, W) -> ad.Node:
    from ..camgeom import _bilinear_corners

    _, _, wts, dwx, dwy = _bilinear_corners(pts.value, H, W)
    out = np.einsum("vpk,vpkc->vpc", wts, conv.value)

    def bw(g):
        gconv = wts[..., None] * g[:, :, None, :]
        gx = np.einsum("vpk,vpkc,vpc->vp", dwx, conv.value, g)
        gy = np.einsum("vpk,vpkc,vpc->vp", dwy, conv.value, g)
        return gconv, np.stack([gx, gy], axis=-1)

    return ad._make(out, (conv, pts), bw, "corner_blend")


# ---------------------------------------------------------------- attention


def anchors_for(y, cams: list[CameraParams], differentiable: bool):
    """Project joints ``y[M,3]`` into every view.

    Returns anchors ``[V,M,2]`` (node if differentiable, else array) and the
    in-front mask ``[V,M]``.
    """
    if differentiable:
        uvs, fronts = zip(*(project_node(y, c) for c in cams))
        return ad.stack(list(uvs), axis=0), np.stack(fronts)
    yv = y.value if isinstance(y, ad.Node) else np.asarray(y)
    uvs, fronts = [], []
    for c in cams:
        uv, depth = project_with_depth(yv, c)
        uvs.append(uv)
        fronts.append(depth > BEHIND_EPS)
    return np.stack(uvs).astype(yv.dtype), np.stack(fronts)


def projective_attention(q, y, feats, cams, params: dict, prefix: str, K: int,
                         differentiable_anchors: bool = False, return_points: bool = False):
    """Per joint: sample K deformable points around its anchor in each view.

    ``feats`` is a :class:`DenseFeatures` / :class:`FusedRayConvFeatures` (or a
    raw ``[V,C,H,W]`` array/node) in feature-map pixels; ``cams`` must be in the
    same pixel units. Views where the joint is behind the camera contribute zeros.
    """
    if not hasattr(feats, "sample"):
        feats = DenseFeatures(feats)
    V = feats.shape[0]
    if len(cams) != V:
        raise ShapeMismatchError(f"{len(cams)} cameras for {V} feature maps")
    q = ad.as_node(q)
    M, C = q.shape
    anchors, front = anchors_for(y, cams, differentiable_anchors)
    if not isinstance(anchors, ad.Node):
        anchors = ad.Node(anchors, dtype=q.dtype)

    z_anchor = feats.sample(anchors)  # [V,M,C]
    u = ad.add(ad.reshape(q, (1, M, C)), z_anchor)
    offsets = ad.linear(u, params[f"{prefix}.W_offset"], params[f"{prefix}.b_offset"])
    offsets = ad.reshape(offsets, (V, M, K, 2))
    weights = ad.softmax(ad.linear(u, params[f"{prefix}.W_attn"], params[f"{prefix}.b_attn"]), axis=-1)

    pts = ad.add(ad.reshape(anchors, (V, M, 1, 2)), offsets)
    sampled = feats.sample(ad.reshape(pts, (V, M * K, 2)))
    sampled = ad.reshape(sampled, (V, M, K, C))
    agg = ad.sum_(ad.mul(sampled, ad.reshape(weights, (V, M, K, 1))), axis=2)  # [V,M,C]
    f = ad.linear(agg, params[f"{prefix}.W_value"], params[f"{prefix}.b_value"])
    f = ad.mul(f, front[..., None].astype(q.dtype))
    fused = ad.reshape(ad.transpose(f, (1, 0, 2)), (M, V * C))
    out = ad.linear(fused, params[f"{prefix}.W_out"], params[f"{prefix}.b_out"])
    if return_points:
        return out, {"anchors": anchors.value, "points": pts.value, "front": front, "weights": weights.value}
    return out


def dense_attention(q, feats, params: dict, prefix: str, max_locations: int = 1 << 16) -> ad.Node:
    """Scaled dot-product attention of every query over all ``V*H*W`` features."""
    Z = feats.Z if isinstance(feats, DenseFeatures) else ad.as_node(feats)
    V, C, H, W = Z.shape
    if V * H * W > max_locations:
        raise MemoryError(f"dense attention over {V * H * W} locations exceeds cap {max_locations}")
    q = ad.as_node(q)
    tokens = ad.reshape(ad.transpose(Z, (0, 2, 3, 1)), (V * H * W, C))
    Q = ad.linear(q, params[f"{prefix}.W_q"], params[f"{prefix}.b_q"])
    Kt = ad.linear(tokens, params[f"{prefix}.W_k"], params[f"{prefix}.b_k"])
    Vt = ad.linear(tokens, params[f"{prefix}.W_v"], params[f"{prefix}.b_v"])
    scores = ad.mul(ad.matmul(Q, ad.transpose(Kt, (1, 0))), 1.0 / np.sqrt(Q.shape[1]))
    attn = ad.softmax(scores, axis=-1)
    return ad.linear(ad.matmul(attn, Vt), params[f"{prefix}.W_o"], params[f"{prefix}.b_o"])


def self_attention(x, params: dict, prefix: str, heads: int) -> ad.Node:
    x = ad.as_node(x)
    M, C = x.shape
    d = C // heads

    def split(t):
        return ad.transpose(ad.reshape(t, (M, heads, d)), (1, 0, 2))

    Q = split(ad.linear(x, params[f"{prefix}.W_q"], params[f"{prefix}.b_q"]))
    Kh = split(ad.linear(x, params[f"{prefix}.W_k"], params[f"{prefix}.b_k"]))
    Vh = split(ad.linear(x, params[f"{prefix}.W_v"], params[f"{prefix}.b_v"]))
    scores = ad.mul(ad.matmul(Q, ad.transpose(Kh, (0, 2, 1))), 1.0 / np.sqrt(d))
    attn = ad.softmax(scores, axis=-1)
    ctx = ad.reshape(ad.transpose(ad.matmul(attn, Vh), (1, 0, 2)), (M, C))
    return ad.linear(ctx, params[f"{prefix}.W_o"], params[f"{prefix}.b_o"])


def ffn(x, params: dict, prefix: str) -> ad.Node:
    h = ad.relu(ad.linear(x, params[f"{prefix}.W1"], params[f"{prefix}.b1"]))
    return ad.linear(h, params[f"{prefix}.W2"], params[f"{prefix}.b2"])


def norm(x, params: dict, prefix: str) -> ad.Node:
    return ad.layernorm(x, params[f"{prefix}.gamma"], params[f"{prefix}.beta"])


# ---------------------------------------------------------------- decoder layer


@dataclass
class DecoderState:
    joint_feat: ad.Node  # [M, C]
    joint_pos: ad.Node  # [M, 3] meters
    conf_logits: list  # one [M] node per finished layer
    offsets: list  # one [M,3] node per finished layer


def decoder_layer(state: DecoderState, feats, cams, params: dict, prefix: str, cfg) -> DecoderState:
    x = state.joint_feat
    y = state.joint_pos
    x = norm(ad.add(x, self_attention(x, params, f"{prefix}.self_attn", cfg.heads)), params, f"{prefix}.norm1")
    if cfg.attention_mode == "projective":
        attn = projective_attention(x, y, feats, cams, params, f"{prefix}.proj_attn", cfg.K,
                                    differentiable_anchors=cfg.differentiable_anchors)
    else:
        attn = dense_attention(x, feats, params, f"{prefix}.dense_attn", cfg.dense_max_locations)
    x = norm(ad.add(x, attn), params, f"{prefix}.norm2")
    x = norm(ad.add(x, ffn(x, params, f"{prefix}.ffn")), params, f"{prefix}.norm3")

    h = ad.relu(ad.linear(x, params[f"{prefix}.reg.W1"], params[f"{prefix}.reg.b1"]))
    dy = ad.linear(h, params[f"{prefix}.reg.W2"], params[f"{prefix}.reg.b2"])
    ws = np.asarray(cfg.workspace, dtype=x.dtype)
    y_new = ad.clip(ad.add(y, dy), ws[:, 0], ws[:, 1])
    logit = ad.reshape(ad.linear(x, params[f"{prefix}.conf.W"], params[f"{prefix}.conf.b"]), (-1,))
    return DecoderState(x, y_new, state.conf_logits + [logit], state.offsets + [dy])
