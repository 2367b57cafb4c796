"""Training loop with checkpointing, CSV logging and bit-identical resume."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import autodiff as ad
from ..model.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from ..model.network import MvPNetwork
from ..setmatch import total_loss
from .config import RunConfig

log = logging.getLogger(__name__)

LOG_FIELDS = ("step", "epoch", "loss", "lr", "wall_ms")


class TrainingDivergedError(RuntimeError):
    """Raised when the loss (or any forward value) becomes NaN/Inf."""

    def __init__(self, message, dump_path=None):
        super().__init__(message)
        self.dump_path = dump_path


@dataclass
class TrainState:
    step: int = 0
    losses: list = field(default_factory=list)


def checkpoint_tensors(net: MvPNetwork, opt: ad.Adam) -> dict:
    tensors = {}
    for name, value in net.state_tensors().items():
        tensors[f"param/{name}"] = value
    for name, m, v in zip(net.params, opt.m, opt.v):
        tensors[f"adam.m/{name}"] = m
        tensors[f"adam.v/{name}"] = v
    tensors["adam.t"] = np.asarray(opt.t, dtype=np.int64)
    return tensors


def save_training_checkpoint(path, run: RunConfig, net: MvPNetwork, opt: ad.Adam, step: int) -> None:
    save_checkpoint(path, {"run": run.to_dict(), "step": int(step)}, checkpoint_tensors(net, opt))


def load_network(path) -> tuple[RunConfig, MvPNetwork, dict, dict]:
    """Rebuild the network stored in a checkpoint. Returns ``(run, net, meta, tensors)``."""
    meta, tensors = load_checkpoint(path)
    if "run" not in meta:
        raise CheckpointError("checkpoint has no run configuration")
    run = RunConfig.from_dict(meta["run"])
    net = MvPNetwork(run.model, seed=run.seed)
    net.load_state_tensors({k[len("param/"):]: v for k, v in tensors.items() if k.startswith("param/")})
    return run, net, meta, tensors


class Trainer:
    """Single-unit trainer. One optimizer step consumes ``grad_accum`` scenes.

    Scene order: global scene counter ``i`` maps to epoch ``i // n`` and to
    position ``i % n`` of ``default_rng([seed, epoch]).permutation(n)``, so
    the data stream depends only on the step number (which makes resume exact).
    """

    def __init__(self, run: RunConfig, scenes, net: MvPNetwork | None = None, output_dir=None,
                 persist: bool = True):
        if not scenes:
            raise ValueError("training set is empty")
        self.run = run
        self.scenes = list(scenes)
        self.net = net or MvPNetwork(run.model, seed=run.seed)
        for s in self.scenes[:1]:
            self.net.check_inputs(s.features, s.feature_cameras())
        self.opt = ad.Adam(self.net.parameters(), lr=run.lr, betas=run.betas, eps=run.eps)
        self.out = Path(output_dir if output_dir is not None else run.output_dir)
        # persist=False keeps everything in memory: no log, no checkpoints
        self.persist = persist
        self.state = TrainState()
        self._orders: dict[int, np.ndarray] = {}

    # -------------------------------------------------------------- data order
    def _order(self, epoch: int) -> np.ndarray:
        if epoch not in self._orders:
            self._orders = {epoch: np.random.default_rng([self.run.seed, epoch]).permutation(len(self.scenes))}
        return self._orders[epoch]

    def scene_at(self, i: int) -> tuple[int, int]:
        """``(epoch, scene index)`` of the i-th scene consumed."""
        n = len(self.scenes)
        epoch = i // n
        return epoch, int(self._order(epoch)[i % n])

    @property
    def total_steps(self) -> int:
        if self.run.max_steps is not None:
            return self.run.max_steps
        return (self.run.epochs * len(self.scenes)) // self.run.grad_accum

    # -------------------------------------------------------------- resume
    def resume(self, path) -> None:
        meta, tensors = load_checkpoint(path)
        saved = RunConfig.from_dict(meta["run"])
        if saved.model != self.run.model:
            raise CheckpointError("checkpoint model config differs from the run config")
        self.net.load_state_tensors({k[6:]: v for k, v in tensors.items() if k.startswith("param/")})
        names = list(self.net.params)
        self.opt.load_state_dict({
            "t": int(tensors["adam.t"]),
            "m": [tensors[f"adam.m/{n}"] for n in names],
            "v": [tensors[f"adam.v/{n}"] for n in names],
        })
        self.state.step = int(meta["step"])

    # -------------------------------------------------------------- one step
    def _loss(self, scene):
        cfg = self.run.model
        out = self.net.forward_scene(scene)
        loss, _ = total_loss(scene.gt_poses, out.positions, out.conf_logits, cfg.J, scene.feature_cameras(),
                             cfg.workspace, lam=self.run.lam, weight_2d=self.run.weight_2d)
        return loss

    def _dump(self, step: int, scene_idx: int, reason: str) -> Path:
        self.out.mkdir(parents=True, exist_ok=True)
        path = self.out / f"nan_dump_step{step}.npz"
        scene = self.scenes[scene_idx]
        np.savez(path, reason=np.array(reason), step=step, scene_index=scene_idx,
                 features=scene.features, gt_poses=scene.gt_poses,
                 cameras=np.stack([c.as_vector() for c in scene.cameras]),
                 **{f"param/{k}": v for k, v in self.net.state_tensors().items()})
        return path

    def train_step(self) -> float:
        """Run one optimizer step and return the mean scene loss."""
        step = self.state.step
        a = self.run.grad_accum
        epoch, _ = self.scene_at(step * a)
        self.opt.lr = self.run.lr_at(epoch)
        self.opt.zero_grad()
        total = 0.0
        for k in range(a):
            _, idx = self.scene_at(step * a + k)
            try:
                loss = self._loss(self.scenes[idx])
            except ad.NonFiniteError as e:
                path = self._dump(step, idx, str(e))
                raise TrainingDivergedError(f"non-finite value at step {step} (scene {idx}): {e}; dump at {path}",
                                            path) from None
            value = float(loss.value)
            if not np.isfinite(value):
                path = self._dump(step, idx, "non-finite loss")
                raise TrainingDivergedError(f"loss is {value} at step {step} (scene {idx}); dump at {path}", path)
            ad.backward(ad.mul(loss, 1.0 / a) if a > 1 else loss)
            total += value
        self.opt.step()
        self.state.step += 1
        return total / a

    # -------------------------------------------------------------- loop
    def train(self, callback=None) -> TrainState:
        """Train up to :attr:`total_steps`, checkpointing every ``checkpoint_every`` steps."""
        fh = None
        if self.persist:
            self.out.mkdir(parents=True, exist_ok=True)
            log_path = self.out / "train_log.csv"
            new = not log_path.exists() or self.state.step == 0
            fh = open(log_path, "w" if new else "a", newline="")
            writer = csv.writer(fh)
            if new:
                writer.writerow(LOG_FIELDS)
        try:
            while self.state.step < self.total_steps:
                t0 = time.perf_counter()
                epoch, _ = self.scene_at(self.state.step * self.run.grad_accum)
                loss = self.train_step()
                self.state.losses.append(loss)
                step = self.state.step
                if fh is not None:
                    writer.writerow([step, epoch, repr(loss), repr(self.opt.lr),
                                     f"{(time.perf_counter() - t0) * 1000:.3f}"])
                if fh is not None and step % self.run.checkpoint_every == 0:
                    self.save(self.out / f"step{step:07d}.mvpc")
                    fh.flush()
                if callback is not None:
                    callback(self, step, loss)
        finally:
            if fh is not None:
                fh.close()
        if self.persist:
            self.save(self.out / "final.mvpc")
        return self.state

    def save(self, path) -> None:
        save_training_checkpoint(path, self.run, self.net, self.opt, self.state.step)
