"""The multi-view pose transformer: parameters, initialization and forward pass."""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from .. import autodiff as ad
from ..camgeom import CameraParams
from .config import ModelConfig
from .layers import (
    DecoderState,
    DenseFeatures,
    FusedRayConvFeatures,
    build_queries,
    decoder_layer,
    global_pool,
    position_channels,
    rayconv,
    rayconv_input,
)


class SceneMismatchError(ValueError):
    pass


@dataclass
class ForwardOutput:
    init_positions: ad.Node  # [M,3]
    positions: list  # L nodes [M,3]
    conf_logits: list  # L nodes [M]
    offsets: list  # L nodes [M,3]
    queries: ad.Node

    @property
    def L(self) -> int:
        return len(self.positions)

    def poses(self, N: int, J: int) -> np.ndarray:
        """Per-layer grouped poses ``[L,N,J,3]``."""
        return np.stack([p.value.reshape(N, J, 3) for p in self.positions])

    def person_confidences(self, N: int, J: int) -> np.ndarray:
        """Per-layer person confidences ``[L,N]``: mean joint sigmoid."""
        out = []
        for lg in self.conf_logits:
            out.append(ad.sigmoid(lg).value.reshape(N, J).mean(axis=1))
        return np.stack(out)


def _xavier(rng, fan_in, fan_out, shape=None):
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=shape or (fan_in, fan_out))


def init_params(cfg: ModelConfig, seed: int = 0) -> "OrderedDict[str, ad.Node]":
    """Fresh parameters; regression-head output layers start at zero."""
    rng = np.random.default_rng(seed)
    C, V, K, F = cfg.C, cfg.V, cfg.K, cfg.ffn_width
    p: OrderedDict[str, np.ndarray] = OrderedDict()

    p["stem.weight"] = _xavier(rng, cfg.C_in, C, (C, cfg.C_in))
    p["stem.bias"] = np.zeros(C)
    p["rayconv.weight"] = _xavier(rng, C + cfg.P, C, (C, C + cfg.P))
    p["rayconv.bias"] = np.zeros(C)

    if cfg.query_mode == "per_joint":
        p["query.joint_query"] = _xavier(rng, C, C, (cfg.M, C))
    else:
        p["query.person_embed"] = _xavier(rng, C, C, (cfg.N, C))
        p["query.joint_embed"] = _xavier(rng, C, C, (cfg.J, C))
        if cfg.query_mode == "hierarchical_adaptive":
            p["query.adapt_weight"] = _xavier(rng, V * C, C)
    p["init.W"] = _xavier(rng, C, 3)
    p["init.b"] = np.zeros(3)

    # K sampling points start on a ring around the anchor
    ang = 2 * np.pi * np.arange(K) / K
    ring = cfg.offset_init_px * np.stack([np.cos(ang), np.sin(ang)], axis=1).reshape(-1)
    for l in range(cfg.L):
        pre = f"layer{l}"
        for m in ("q", "k", "v", "o"):
            p[f"{pre}.self_attn.W_{m}"] = _xavier(rng, C, C)
            p[f"{pre}.self_attn.b_{m}"] = np.zeros(C)
        for n in (1, 2, 3):
            p[f"{pre}.norm{n}.gamma"] = np.ones(C)
            p[f"{pre}.norm{n}.beta"] = np.zeros(C)
        if cfg.attention_mode == "projective":
            a = f"{pre}.proj_attn"
            p[f"{a}.W_offset"] = np.zeros((C, 2 * K))
            p[f"{a}.b_offset"] = ring.copy()
            p[f"{a}.W_attn"] = np.zeros((C, K))
            p[f"{a}.b_attn"] = np.zeros(K)
            p[f"{a}.W_value"] = _xavier(rng, C, C)
            p[f"{a}.b_value"] = np.zeros(C)
            p[f"{a}.W_out"] = _xavier(rng, V * C, C)
            p[f"{a}.b_out"] = np.zeros(C)
        else:
            a = f"{pre}.dense_attn"
            for m in ("q", "k", "v", "o"):
                p[f"{a}.W_{m}"] = _xavier(rng, C, C)
                p[f"{a}.b_{m}"] = np.zeros(C)
        p[f"{pre}.ffn.W1"] = _xavier(rng, C, F)
        p[f"{pre}.ffn.b1"] = np.zeros(F)
        p[f"{pre}.ffn.W2"] = _xavier(rng, F, C)
        p[f"{pre}.ffn.b2"] = np.zeros(C)
        p[f"{pre}.reg.W1"] = _xavier(rng, C, C)
        p[f"{pre}.reg.b1"] = np.zeros(C)
        p[f"{pre}.reg.W2"] = np.zeros((C, 3))
        p[f"{pre}.reg.b2"] = np.zeros(3)
        p[f"{pre}.conf.W"] = _xavier(rng, C, 1)
        p[f"{pre}.conf.b"] = np.full(1, -np.log((1 - cfg.conf_prior) / cfg.conf_prior))

    dt = cfg.np_dtype
    return OrderedDict((k, ad.parameter(v.astype(dt), name=k)) for k, v in p.items())


def query_param_count(params: dict) -> int:
    """Number of scalars in the query embedding tables (excluding the adapt weight)."""
    names = ("query.joint_query", "query.person_embed", "query.joint_embed")
    return int(sum(params[n].value.size for n in names if n in params))


class MvPNetwork:
    """Parameters plus the forward pass. Stateless apart from ``params``."""

    def __init__(self, config: ModelConfig, params=None, seed: int = 0):
        self.config = config
        self.params = params if params is not None else init_params(config, seed)

    def parameters(self) -> list[ad.Node]:
        return list(self.params.values())

    def n_parameters(self) -> int:
        return int(sum(p.value.size for p in self.params.values()))

    def check_inputs(self, features: np.ndarray, cams: list[CameraParams]):
        cfg = self.config
        expected = (cfg.V, cfg.C_in, cfg.H, cfg.W)
        if tuple(features.shape) != expected:
            raise SceneMismatchError(f"features have shape {features.shape}, model expects {expected}")
        if len(cams) != cfg.V:
            raise SceneMismatchError(f"{len(cams)} cameras, model expects {cfg.V}")

    def encode(self, features: np.ndarray, cams: list[CameraParams]):
        """Stem + RayConv. Returns the sampling source and the pooled stem features."""
        cfg = self.config
        P = self.params
        Zin = ad.Node(np.asarray(features, dtype=cfg.np_dtype))
        V, Cin, H, W = Zin.shape
        Z = ad.matmul(P["stem.weight"], ad.reshape(Zin, (V, Cin, H * W)))
        Z = ad.relu(ad.add(Z, ad.reshape(P["stem.bias"], (-1, 1))))
        Z = ad.reshape(Z, (V, cfg.C, H, W))
        pooled = global_pool(Z)
        pos = position_channels(cfg.pos_encoding, cams, H, W)
        if cfg.fused_sampling and cfg.attention_mode == "projective":
            src = FusedRayConvFeatures(rayconv_input(Z, pos), P["rayconv.weight"], P["rayconv.bias"])
        else:
            src = DenseFeatures(rayconv(Z, pos, P["rayconv.weight"], P["rayconv.bias"]))
        return src, pooled

    def initial_positions(self, q) -> ad.Node:
        ws = self.config.workspace_array.astype(q.dtype)
        s = ad.sigmoid(ad.linear(q, self.params["init.W"], self.params["init.b"]))
        return ad.add(ad.mul(s, ws[:, 1] - ws[:, 0]), ws[:, 0])

    def forward(self, features: np.ndarray, cams: list[CameraParams]) -> ForwardOutput:
        """``cams`` must be expressed in feature-map pixels."""
        cfg = self.config
        self.check_inputs(features, cams)
        src, pooled = self.encode(features, cams)
        q = build_queries(self.params, cfg.query_mode, cfg.N, cfg.J, pooled)
        y0 = self.initial_positions(q)
        state = DecoderState(q, y0, [], [])
        positions = []
        for l in range(cfg.L):
            state = decoder_layer(state, src, cams, self.params, f"layer{l}", cfg)
            positions.append(state.joint_pos)
        return ForwardOutput(y0, positions, state.conf_logits, state.offsets, q)

    def forward_scene(self, scene) -> ForwardOutput:
        return self.forward(scene.features, scene.feature_cameras())

    def predict(self, features: np.ndarray, cams: list[CameraParams]) -> tuple[np.ndarray, np.ndarray]:
        """Final-layer poses ``[N,J,3]`` and person confidences ``[N]`` (no graph recorded)."""
        cfg = self.config
        with ad.no_grad():
            out = self.forward(features, cams)
        return out.poses(cfg.N, cfg.J)[-1], out.person_confidences(cfg.N, cfg.J)[-1]

    def predict_scene(self, scene) -> tuple[np.ndarray, np.ndarray]:
        return self.predict(scene.features, scene.feature_cameras())

    def state_tensors(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, p.value) for k, p in self.params.items())

    def load_state_tensors(self, tensors: dict) -> None:
        missing = set(self.params) - set(tensors)
        extra = set(tensors) - set(self.params)
        if missing or extra:
            raise SceneMismatchError(f"parameter mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, p in self.params.items():
            if tensors[k].shape != p.value.shape:
                raise SceneMismatchError(f"{k}: shape {tensors[k].shape} != {p.value.shape}")
            p.value = np.array(tensors[k], dtype=p.value.dtype)
