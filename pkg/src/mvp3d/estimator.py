"""scikit-learn style wrapper around training and inference."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import check_scenes, check_threshold
from .harness.config import RunConfig
from .harness.evaluate import build_records, infer_scenes
from .harness.train import Trainer
from .metrics import ap_recall
from .model.config import ModelConfig
from .setmatch import PoseSet


class MvPEstimator(BaseEstimator):
    """Multi-view multi-person 3D pose estimator.

    ``fit`` takes scenes carrying GT poses (``y`` is ignored); ``predict``
    returns one confidence-filtered :class:`PoseSet` per scene. Scene geometry
    (views, joints, feature size, workspace) is read from the training data.

    Parameters
    ----------
    n_slots : int
        Person slots N; must be at least the most persons any scene holds.
    channels, layers, points, heads : int
        Feature width C, decoder depth L, sampling points K, self-attention heads.
    query_mode, pos_encoding, attention_mode : str
        Architecture switches (see :class:`ModelConfig`).
    max_steps : int
        Optimizer steps (one scene per step).
    score_threshold : float
        MPJPE threshold in mm used by :meth:`score` (returns AP at it).
    """

    def __init__(self, *, n_slots=4, channels=64, layers=6, points=4, heads=4,
                 query_mode="hierarchical_adaptive", pos_encoding="rays", attention_mode="projective",
                 lr=1e-4, max_steps=1000, lam=2.5, confidence_threshold=0.1, score_threshold=250.0,
                 seed=0):
        self.n_slots = n_slots
        self.channels = channels
        self.layers = layers
        self.points = points
        self.heads = heads
        self.query_mode = query_mode
        self.pos_encoding = pos_encoding
        self.attention_mode = attention_mode
        self.lr = lr
        self.max_steps = max_steps
        self.lam = lam
        self.confidence_threshold = confidence_threshold
        self.score_threshold = score_threshold
        self.seed = seed

    def _run_config(self, scene) -> RunConfig:
        V, C_in, H, W = scene.features.shape
        model = ModelConfig(N=self.n_slots, J=scene.gt_poses.shape[1], C=self.channels, V=V, L=self.layers,
                            K=self.points, heads=self.heads, attention_mode=self.attention_mode,
                            pos_encoding=self.pos_encoding, query_mode=self.query_mode,
                            workspace=tuple(map(tuple, scene.workspace)), C_in=C_in, H=H, W=W,
                            stride=int(round(scene.stride)))
        return RunConfig(model=model, lr=self.lr, max_steps=self.max_steps, lr_decay_epoch=None, lam=self.lam,
                         confidence_threshold=self.confidence_threshold, seed=self.seed)

    def fit(self, X, y=None):
        scenes = check_scenes(X, require_gt=True)
        check_threshold(self.confidence_threshold, "confidence_threshold", upper=1.0)
        most = max(s.n_persons for s in scenes)
        if most > self.n_slots:
            raise ValueError(f"a scene holds {most} persons but n_slots={self.n_slots}")
        run = self._run_config(scenes[0])
        trainer = Trainer(run, scenes, persist=False)
        trainer.train()
        self.run_config_ = run
        self.network_ = trainer.net
        self.loss_curve_ = np.asarray(trainer.state.losses)
        self.n_iter_ = trainer.state.step
        return self

    def predict_raw(self, X) -> list[tuple[np.ndarray, np.ndarray]]:
        """Unfiltered final-layer ``(poses [N,J,3], confidences [N])`` per scene."""
        check_is_fitted(self, "network_")
        return infer_scenes(self.network_, check_scenes(X))

    def predict(self, X) -> list[PoseSet]:
        return [PoseSet(p, c).filter(self.confidence_threshold) for p, c in self.predict_raw(X)]

    def score(self, X, y=None) -> float:
        """AP at ``score_threshold`` mm on scenes with GT."""
        scenes = check_scenes(X, require_gt=True)
        records = build_records(self.predict_raw(scenes), scenes, self.confidence_threshold)
        return ap_recall(records, check_threshold(self.score_threshold, "score_threshold"))[0]
