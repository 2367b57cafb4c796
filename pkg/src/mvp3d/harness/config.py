"""Run configuration: model hyperparameters plus optimizer and I/O settings."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from ..model.config import ConfigError, ModelConfig


@dataclass
class RunConfig:
    """Everything a training or evaluation run needs.

    The learning rate drops by ``lr_decay_factor`` once the epoch index reaches
    ``lr_decay_epoch`` (``None`` disables the decay). One scene per step;
    ``grad_accum`` scenes are accumulated into one optimizer step. When
    ``max_steps`` is set it fixes the run length and ``epochs`` is ignored.
    """

    model: ModelConfig = field(default_factory=ModelConfig)
    lr: float = 1e-4
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    lr_decay_epoch: int | None = 20
    lr_decay_factor: float = 0.1
    epochs: int = 40
    max_steps: int | None = None
    batch_size: int = 1
    grad_accum: int = 1
    seed: int = 0
    train_data: str | None = None
    eval_data: str | None = None
    confidence_threshold: float = 0.1
    lam: float = 2.5
    weight_2d: float = 1.0
    output_dir: str = "runs/default"
    checkpoint_every: int = 1000

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = ModelConfig.from_dict(self.model)
        self.betas = tuple(float(b) for b in self.betas)
        if len(self.betas) != 2 or not all(0 <= b < 1 for b in self.betas):
            raise ConfigError("betas must be two numbers in [0, 1)")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.batch_size != 1:
            raise ConfigError("batch_size must be 1; use grad_accum for larger effective batches")
        if self.grad_accum < 1 or self.epochs < 1 or self.checkpoint_every < 1:
            raise ConfigError("grad_accum, epochs and checkpoint_every must be >= 1")
        if self.max_steps is not None and self.max_steps < 0:
            raise ConfigError("max_steps must be >= 0")
        if not 0 <= self.confidence_threshold <= 1:
            raise ConfigError("confidence_threshold must lie in [0, 1]")

    def lr_at(self, epoch: int) -> float:
        if self.lr_decay_epoch is not None and epoch >= self.lr_decay_epoch:
            return self.lr * self.lr_decay_factor
        return self.lr

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}
        d["model"] = self.model.to_dict()
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        d = dict(d)
        if "model" in d:
            d["model"] = ModelConfig.from_dict(d["model"])
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"invalid JSON config: {e}") from None
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(d)

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_json(Path(path).read_text())

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    def with_overrides(self, overrides: dict) -> "RunConfig":
        """Copy with dotted keys replaced, e.g. ``{"model.L": 2, "lr": 1e-3}``."""
        d = self.to_dict()
        for key, value in overrides.items():
            target = d
            *path, last = key.split(".")
            for p in path:
                if not isinstance(target.get(p), dict):
                    raise ConfigError(f"unknown config key {key!r}")
                target = target[p]
            if last not in target:
                raise ConfigError(f"unknown config key {key!r}")
            target[last] = value
        return RunConfig.from_dict(d)
