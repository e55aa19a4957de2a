"""scikit-learn style front end over the staged training code.

All estimators take an :class:`ExperimentConfig` (``None`` means desk
defaults) and work on numpy arrays: images ``(N, 3, H, W)`` uint8 and
Cartesian BEV maps ``(N, K, H, W)`` bool.
"""
from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin

from .alignment import Predictor, train_joint, train_stage2, train_stage3_finetune
from .autoencoder import autoencoder_from, decode, encode, reconstruct, train_stage1
from .config import ExperimentConfig
from .dataset import SplitArrays
from .evaluation import evaluate_predictions
from .geometry import cart_to_polar, polar_to_cart
from .training import batched, to_targets
from .validation import (check_bev, check_consistent_length, check_images, check_is_fitted,
                         check_mask, check_soft)


def _config(cfg, **over) -> ExperimentConfig:
    cfg = ExperimentConfig() if cfg is None else cfg
    over = {k: v for k, v in over.items() if v is not None}
    return cfg.replace(**over) if over else cfg


def _split(images, bev, visibility=None) -> SplitArrays:
    n = len(bev)
    if visibility is None:
        visibility = np.ones((n,) + bev.shape[-2:], dtype=bool)
    if images is None:
        images = np.zeros((n, 3, 1, 1), dtype=np.uint8)
    return SplitArrays([f"{i:06d}" for i in range(n)], list(range(n)), images, bev,
                       visibility)


class PolarResampler(TransformerMixin, BaseEstimator):
    """Cartesian <-> polar BEV resampling as a stateless transformer."""

    def __init__(self, config: ExperimentConfig | None = None, method: str = "nearest"):
        self.config = config
        self.method = method

    def fit(self, X=None, y=None):
        cfg = _config(self.config)
        self.grid_shape_ = cfg.gspec.shape
        self.polar_shape_ = cfg.target_shape
        return self

    def transform(self, X):
        check_is_fitted(self, "polar_shape_")
        cfg = _config(self.config)
        return cart_to_polar(np.asarray(X), cfg.camera_model, cfg.gspec, cfg.pspec, self.method)

    def inverse_transform(self, X):
        check_is_fitted(self, "polar_shape_")
        cfg = _config(self.config)
        return polar_to_cart(np.asarray(X), cfg.camera_model, cfg.gspec, cfg.pspec, self.method)


class BevAutoencoder(TransformerMixin, BaseEstimator):
    """Stage I. ``fit`` takes Cartesian maps; ``transform`` yields latents and
    ``inverse_transform`` soft maps on the network raster."""

    def __init__(self, config: ExperimentConfig | None = None, epochs: int | None = None,
                 lr: float | None = None, eta: float | None = None, random_state: int = 0):
        self.config = config
        self.epochs = epochs
        self.lr = lr
        self.eta = eta
        self.random_state = random_state

    def _cfg(self):
        return _config(self.config, train__ae__epochs=self.epochs, train__ae__lr=self.lr,
                       train__eta=self.eta, seed=self.random_state)

    def _targets(self, Y, cfg):
        Y = check_bev(Y, len(cfg.recipe.class_names), cfg.gspec.shape, "Y")
        return torch.from_numpy(to_targets(Y, cfg).astype(np.float32))

    def fit(self, Y, y=None):
        cfg = self._cfg()
        Y = check_bev(Y, len(cfg.recipe.class_names), cfg.gspec.shape, "Y")
        self.checkpoint_ = train_stage1(_split(None, Y), cfg)
        self.net_ = autoencoder_from(self.checkpoint_, cfg)
        self.n_classes_ = Y.shape[1]
        return self

    def transform(self, Y):
        check_is_fitted(self, "checkpoint_")
        cfg = self._cfg()
        return batched(lambda b: encode(b, self.net_, cfg), self._targets(Y, cfg)).numpy()

    def inverse_transform(self, Z):
        check_is_fitted(self, "checkpoint_")
        cfg = self._cfg()
        z = torch.as_tensor(np.asarray(Z), dtype=torch.float32)
        return batched(lambda b: decode(b, self.net_, cfg), z).numpy()

    def reconstruct(self, Y, seed: int = 0):
        check_is_fitted(self, "checkpoint_")
        cfg = self._cfg()
        return reconstruct(self._targets(Y, cfg), self.net_, cfg, seed=seed).numpy()

    def score(self, Y, y=None, threshold: float = 0.5):
        """Pooled reconstruction mIoU on the network raster."""
        cfg = self._cfg()
        t = self._targets(Y, cfg).numpy() > 0.5
        p = self.reconstruct(Y) >= threshold
        inter = (p & t).sum(axis=(0, 2, 3))
        union = (p | t).sum(axis=(0, 2, 3))
        return float(np.mean(np.where(union == 0, 1.0, inter / np.maximum(union, 1))))


class BevSegmenter(BaseEstimator):
    """Monocular BEV segmentation: image -> soft Cartesian class maps.

    With ``ablation.td`` the three stages run in sequence (ft optional),
    otherwise the end-to-end baseline is trained.
    """

    def __init__(self, config: ExperimentConfig | None = None, epochs: int | None = None,
                 random_state: int = 0, threshold: float = 0.5):
        self.config = config
        self.epochs = epochs
        self.random_state = random_state
        self.threshold = threshold

    def _cfg(self):
        over = {"seed": self.random_state}
        if self.epochs is not None:
            for stage in ("ae", "align", "finetune", "joint"):
                over[f"train__{stage}__epochs"] = self.epochs
        return _config(self.config, **over)

    def fit(self, X, Y, visibility=None):
        cfg = self._cfg()
        X = check_images(X, cfg.camera.image_height, cfg.camera.image_width)
        Y = check_bev(Y, len(cfg.recipe.class_names), cfg.gspec.shape, "Y")
        check_consistent_length(X, Y, visibility)
        data = _split(X, Y, visibility)
        stages = {}
        if cfg.ablation.td:
            stages["ae"] = train_stage1(data, cfg)
            stages["align"] = train_stage2(data, stages["ae"], cfg)
            final = stages["align"]
            if cfg.ablation.ft:
                stages["finetune"] = final = train_stage3_finetune(data, final, cfg)
        else:
            stages["joint"] = final = train_joint(data, cfg)
        self.stages_ = stages
        self.checkpoint_ = final
        self.predictor_ = Predictor(final, cfg)
        self.n_classes_ = Y.shape[1]
        return self

    @classmethod
    def from_checkpoint(cls, ckpt, threshold: float = 0.5) -> "BevSegmenter":
        cfg = ckpt.experiment_config
        est = cls(config=cfg, random_state=cfg.seed, threshold=threshold)
        est.stages_ = {ckpt.stage: ckpt}
        est.checkpoint_ = ckpt
        est.predictor_ = Predictor(ckpt, cfg)
        est.n_classes_ = len(cfg.recipe.class_names)
        return est

    def predict_proba(self, X):
        check_is_fitted(self, "predictor_")
        cfg = self.predictor_.cfg
        X = check_images(X, cfg.camera.image_height, cfg.camera.image_width)
        return self.predictor_.predict(X)

    def predict(self, X):
        return self.predict_proba(X) >= self.threshold

    def evaluate(self, X, Y, visibility=None):
        check_is_fitted(self, "predictor_")
        cfg = self.predictor_.cfg
        Y = check_bev(Y, self.n_classes_, cfg.gspec.shape, "Y")
        check_consistent_length(X, Y, visibility)
        if visibility is not None:
            visibility = check_mask(visibility, len(Y), cfg.gspec.shape)
        preds = check_soft(self.predict_proba(X), self.n_classes_)
        return evaluate_predictions(preds, _split(None, Y, visibility), cfg,
                                    use_visibility=visibility is not None)

    def score(self, X, Y, visibility=None):
        """Mean IoU under the evaluation protocol."""
        return self.evaluate(X, Y, visibility).mean_iou
