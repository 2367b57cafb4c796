"""Input checks shared by the estimator and the harness."""

from __future__ import annotations

from os import PathLike

import numpy as np

from .scenegen import Scene, read_dataset


def check_scenes(X, require_gt: bool = False) -> list[Scene]:
    """Return ``X`` as a non-empty list of shape-compatible scenes.

    ``X`` may be a dataset path, a single :class:`Scene` or an iterable of them.
    """
    if isinstance(X, (str, PathLike)):
        X = read_dataset(X)
    elif isinstance(X, Scene):
        X = [X]
    try:
        scenes = list(X)
    except TypeError:
        raise TypeError(f"expected scenes or a dataset path, got {type(X).__name__}") from None
    if not scenes:
        raise ValueError("need at least one scene")
    for i, s in enumerate(scenes):
        if not isinstance(s, Scene):
            raise TypeError(f"item {i} is {type(s).__name__}, not Scene")
        if s.features.ndim != 4 or s.features.shape[0] != len(s.cameras):
            raise ValueError(f"scene {i}: features must be [V,C,H,W] with one camera per view")
        if not np.all(np.isfinite(s.features)):
            raise ValueError(f"scene {i}: features contain NaN or Inf")
        if require_gt and (s.gt_poses.ndim != 3 or s.gt_poses.shape[0] == 0):
            raise ValueError(f"scene {i}: training needs at least one GT pose")
    ref = scenes[0]
    for i, s in enumerate(scenes[1:], 1):
        if s.features.shape != ref.features.shape:
            raise ValueError(f"scene {i}: features {s.features.shape} differ from {ref.features.shape}")
        if s.gt_poses.shape[1:] != ref.gt_poses.shape[1:]:
            raise ValueError(f"scene {i}: joint count differs from scene 0")
    return scenes


def check_threshold(value, name: str = "threshold", upper: float | None = None) -> float:
    value = float(value)
    if not np.isfinite(value) or value < 0 or (upper is not None and value > upper):
        bound = f"[0, {upper}]" if upper is not None else ">= 0"
        raise ValueError(f"{name} must be {bound}, got {value}")
    return value
