"""Inference timing: forward cost should not depend on how many people are in the scene."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from ..model.config import ModelConfig
from ..model.network import MvPNetwork
from ..scenegen import SceneConfig, generate_scene, scene_seed


@dataclass
class BenchResult:
    seconds_one: float
    seconds_many: float
    n_many: int

    @property
    def ratio(self) -> float:
        return self.seconds_many / self.seconds_one


def _time_forward(net: MvPNetwork, scene) -> float:
    t0 = time.perf_counter()
    net.predict_scene(scene)
    return time.perf_counter() - t0


def bench(config: ModelConfig | None = None, scene_config: SceneConfig | None = None, repeats: int = 5,
          seed: int = 0) -> BenchResult:
    """Best-of-``repeats`` forward time on a 1-person scene and an ``N_max``-person scene.

    Runs are interleaved so slow drifts in machine load hit both scenes alike.
    """
    cfg = config or ModelConfig()
    scfg = scene_config or SceneConfig(V=cfg.V, J=cfg.J, H=cfg.H, W=cfg.W, N_max=min(3, cfg.N))
    if scfg.N_max > cfg.N:
        raise ValueError("scene N_max exceeds the model's person slots")
    net = MvPNetwork(cfg, seed=seed)
    one = generate_scene(scene_seed(seed, 0), scfg, n_persons=1)
    many = generate_scene(scene_seed(seed, 1), scfg, n_persons=scfg.N_max)
    _time_forward(net, one)  # warm-up
    t1, tn = [], []
    for _ in range(repeats):
        t1.append(_time_forward(net, one))
        tn.append(_time_forward(net, many))
    return BenchResult(float(np.min(t1)), float(np.min(tn)), scfg.N_max)
