"""Finite-difference sweep of the full training loss on a tiny model."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import autodiff as ad
from ..model.config import ModelConfig
from ..model.network import MvPNetwork
from ..scenegen import SceneConfig, Scene, make_camera_ring, sample_person, template_for
from ..setmatch import total_loss

# anchors are made differentiable so backprop sees the same function as finite differences
TINY = dict(V=2, N=2, J=4, C=8, L=2, K=2, heads=2, H=8, W=8, differentiable_anchors=True)
TOLERANCE = 1e-4


@dataclass
class BlockResult:
    name: str
    size: int
    max_rel_error: float

    @property
    def ok(self) -> bool:
        return self.max_rel_error < TOLERANCE


def tiny_problem(seed: int = 0, **overrides):
    """Tiny network with random nonzero parameters and a random 2-person scene."""
    cfg = ModelConfig(**{**TINY, **overrides})
    rng = np.random.default_rng([seed, 1])
    net = MvPNetwork(cfg, seed=seed)
    for p in net.parameters():
        # every block gets a nonzero value so no gradient path is trivially closed
        p.value = p.value + rng.normal(0.0, 0.1, size=p.value.shape)
    scfg = SceneConfig(V=cfg.V, N_max=cfg.N, J=cfg.J, H=cfg.H, W=cfg.W, image_margin_px=1.0)
    cams = make_camera_ring(rng, scfg)
    tpl = template_for(cfg.J)
    ws = np.asarray(scfg.workspace)
    gt = np.stack([sample_person(rng, tpl, ws) for _ in range(cfg.N)])
    feats = rng.uniform(0.0, 1.0, size=(cfg.V, cfg.C_in, cfg.H, cfg.W)).astype(np.float32)
    return net, Scene(gt, cams, feats, ws, 1.0)


def make_loss_fn(net: MvPNetwork, scene: Scene):
    """Loss closure with the matching frozen at the current parameters."""
    cfg = net.config
    cams = scene.feature_cameras()
    out = net.forward_scene(scene)
    _, parts = total_loss(scene.gt_poses, out.positions, out.conf_logits, cfg.J, cams, cfg.workspace)
    assignments = [p.assignment for p in parts]

    def loss():
        out = net.forward_scene(scene)
        node, _ = total_loss(scene.gt_poses, out.positions, out.conf_logits, cfg.J, cams, cfg.workspace,
                             assignments=assignments)
        return node

    return loss


def grad_check(seed: int = 0, h: float = 1e-5, floor: float = 1e-6, **overrides) -> list[BlockResult]:
    """Per-parameter-block max relative error between backprop and central differences.

    Relative error is ``|a - n| / max(|a|, |n|, floor)``; the floor keeps
    near-zero entries from being judged on round-off alone.
    """
    net, scene = tiny_problem(seed, **overrides)
    loss = make_loss_fn(net, scene)
    for p in net.parameters():
        p.zero_grad()
    ad.backward(loss())
    analytic = {k: p.grad.copy() for k, p in net.params.items()}

    def f():
        with ad.no_grad():
            return float(loss().value)

    results = []
    for name, p in net.params.items():
        numeric = ad.numerical_grad(f, p.value, h=h)
        err = ad.relative_error(analytic[name], numeric, floor=floor)
        results.append(BlockResult(name, p.value.size, float(err.max())))
    return results


def format_report(results: list[BlockResult]) -> str:
    lines = [f"{'block':<36} {'size':>6} {'max_rel_err':>12}  status"]
    for r in results:
        lines.append(f"{r.name:<36} {r.size:>6} {r.max_rel_error:>12.3e}  {'ok' if r.ok else 'FAIL'}")
    bad = [r.name for r in results if not r.ok]
    lines.append("all blocks within tolerance" if not bad else "offending blocks: " + ", ".join(bad))
    return "\n".join(lines)
