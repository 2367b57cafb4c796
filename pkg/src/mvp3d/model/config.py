from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

QUERY_MODES = ("per_joint", "hierarchical", "hierarchical_adaptive")
ATTENTION_MODES = ("projective", "dense")
POS_ENCODINGS = ("rays", "coords2d", "none")


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    """Hyperparameters of the pose network.

    ``N`` person slots times ``J`` joints gives the ``M`` joint queries.
    ``C_in`` defaults to ``J`` (one heatmap channel per joint type).
    """

    N: int = 4
    J: int = 5
    C: int = 64
    V: int = 5
    L: int = 6
    K: int = 4
    heads: int = 4
    ffn_width: int | None = None
    attention_mode: str = "projective"
    pos_encoding: str = "rays"
    query_mode: str = "hierarchical_adaptive"
    workspace: tuple = ((-2.0, 2.0), (-2.0, 2.0), (0.0, 2.0))
    C_in: int | None = None
    H: int = 64
    W: int = 64
    stride: int = 1
    differentiable_anchors: bool = False
    fused_sampling: bool = True
    offset_init_px: float = 2.0
    conf_prior: float = 0.1
    dense_max_locations: int = 1 << 16
    dtype: str = "float64"

    def __post_init__(self):
        if self.ffn_width is None:
            self.ffn_width = 4 * self.C
        if self.C_in is None:
            self.C_in = self.J
        ws = np.asarray(self.workspace, dtype=np.float64)
        if ws.shape != (3, 2) or np.any(ws[:, 1] <= ws[:, 0]):
            raise ConfigError("workspace must be three (min, max) pairs with max > min")
        self.workspace = tuple(tuple(map(float, r)) for r in ws)
        for name in ("N", "J", "C", "V", "L", "K", "heads", "H", "W", "stride", "C_in", "ffn_width"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be a positive integer")
        if self.C % self.heads:
            raise ConfigError("C must be divisible by heads")
        if self.query_mode not in QUERY_MODES:
            raise ConfigError(f"query_mode must be one of {QUERY_MODES}")
        if self.attention_mode not in ATTENTION_MODES:
            raise ConfigError(f"attention_mode must be one of {ATTENTION_MODES}")
        if self.pos_encoding not in POS_ENCODINGS:
            raise ConfigError(f"pos_encoding must be one of {POS_ENCODINGS}")
        if self.dtype not in ("float64", "float32"):
            raise ConfigError("dtype must be float64 or float32")

    @property
    def M(self) -> int:
        return self.N * self.J

    @property
    def P(self) -> int:
        return {"rays": 3, "coords2d": 2, "none": 0}[self.pos_encoding]

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    @property
    def workspace_array(self) -> np.ndarray:
        return np.asarray(self.workspace, dtype=np.float64)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["workspace"] = [list(r) for r in self.workspace]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        d = dict(d)
        if "workspace" in d:
            d["workspace"] = tuple(tuple(r) for r in d["workspace"])
        return cls(**d)
