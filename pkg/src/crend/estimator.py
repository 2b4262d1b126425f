"""scikit-learn style wrapper around training and whole-volume inference."""
from __future__ import annotations

from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .inference import predict_volume
from .metrics import dice
from .training import PROFILES, fit, load_checkpoint, save_checkpoint, with_overrides
from .validation import check_label_masks, check_patch_size, check_volume, check_volumes


class CRendSegmenter(BaseEstimator):
    """Follicle and ovary segmenter.

    ``fit`` takes a list of 3D volumes (arrays or :class:`Volume`) and a
    matching list of label maps (0 background, 1 ovary, 2 follicle) or
    :class:`LabelMask` objects. ``predict`` returns one :class:`LabelMask`
    per volume and ``predict_proba`` the ``(2, D1, D2, D3)`` probability
    maps, channel 0 follicle and channel 1 ovary.

    Hyperparameters not exposed here can be passed through
    ``train_overrides``, a dict of training config fields.
    """

    def __init__(
        self,
        profile: str = "toy",
        lambda1: float = 0.8,
        lambda2: float = 0.2,
        lr: float | None = None,
        epochs: int | None = None,
        rotation_degrees: float | None = None,
        seed: int = 0,
        refine: bool = True,
        inference_points: int | None = None,
        overlap: float = 0.5,
        train_overrides: dict | None = None,
    ):
        self.profile = profile
        self.lambda1 = lambda1
        self.lambda2 = lambda2
        self.lr = lr
        self.epochs = epochs
        self.rotation_degrees = rotation_degrees
        self.seed = seed
        self.refine = refine
        self.inference_points = inference_points
        self.overlap = overlap
        self.train_overrides = train_overrides

    def _train_config(self):
        if self.profile not in PROFILES:
            raise ValueError(f"profile must be one of {sorted(PROFILES)}, got {self.profile!r}")
        kw = {"lambda1": self.lambda1, "lambda2": self.lambda2, "seed": self.seed}
        for name in ("lr", "epochs", "rotation_degrees"):
            if getattr(self, name) is not None:
                kw[name] = getattr(self, name)
        kw.update(self.train_overrides or {})
        cfg = with_overrides(PROFILES[self.profile], **kw)
        check_patch_size(cfg.patch_size)
        return cfg

    def fit(self, X, y, checkpoint_dir=None, log_path=None):
        volumes = check_volumes(X)
        masks = check_label_masks(y, volumes)
        cfg = self._train_config()
        result = fit(cfg, volumes, masks, checkpoint_dir=checkpoint_dir, log_path=log_path)
        self.model_, self.head_, self.config_ = result.model, result.head, cfg
        self.history_ = result.history
        self.n_features_in_ = 1
        return self

    def _predict_one(self, x):
        check_is_fitted(self, "model_")
        v = check_volume(x)
        return predict_volume(
            (self.model_, self.head_, self.config_), v, refine=self.refine,
            n_points=self.inference_points, seed=self.seed, overlap=self.overlap,
        )

    def predict_proba(self, X) -> list[np.ndarray]:
        return [self._predict_one(x).probs for x in check_volumes(X)]

    def predict(self, X):
        return [self._predict_one(x).mask for x in check_volumes(X)]

    def score(self, X, y) -> float:
        """Mean follicle DSC (percent) over the given volumes."""
        volumes = check_volumes(X)
        masks = check_label_masks(y, volumes)
        preds = self.predict(volumes)
        return float(np.mean([dice(p.follicle, m.follicle) for p, m in zip(preds, masks)]))

    def save(self, path) -> Path:
        check_is_fitted(self, "model_")
        return save_checkpoint(path, self.model_, self.head_, self.config_)

    @classmethod
    def load(cls, path, **params) -> "CRendSegmenter":
        model, head, cfg, _ = load_checkpoint(path)
        est = cls(seed=cfg.seed, lambda1=cfg.lambda1, lambda2=cfg.lambda2, **params)
        est.model_, est.head_, est.config_ = model, head, cfg
        est.history_ = []
        est.n_features_in_ = 1
        return est
