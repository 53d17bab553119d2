"""scikit-learn facade: ``fit`` pretrains, ``transform`` returns frozen features."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .config import Config
from .io import load_checkpoint
from .trainer import pretrain
from .probes import extract_features


def check_images(X, image_size: int | None = None) -> np.ndarray:
    """Validate an (N, H, W, 3) image array with values in [0, 1] (uint8 is rescaled)."""
    X = np.asarray(X)
    if X.ndim != 4 or X.shape[-1] != 3:
        raise ValueError(f"expected images shaped (N, H, W, 3), got {X.shape}")
    if X.shape[0] == 0:
        raise ValueError("empty image array")
    if image_size is not None and X.shape[1:3] != (image_size, image_size):
        raise ValueError(f"expected {image_size}x{image_size} images, got {X.shape[1]}x{X.shape[2]}")
    if X.dtype == np.uint8:
        return X.astype(np.float32) / 255.0
    X = X.astype(np.float32)
    if not np.isfinite(X).all():
        raise ValueError("images contain NaN or Inf")
    if X.min() < 0.0 or X.max() > 1.0:
        raise ValueError("float images must lie in [0, 1]")
    return X


class HierarchicalContrastive(TransformerMixin, BaseEstimator):
    """Self-supervised multi-stage pretraining as an unsupervised transformer.

    Parameters mirror the most used config keys; ``overrides`` takes any other
    ``{"section.key": value}`` pairs.
    """

    def __init__(self, mode="hierarchical", objective="simsiam", arrangement="CGBF", expansion="color",
                 width=32, epochs=30, batch_size=256, base_lr=0.05, rotation_from_stage=0, stage=4,
                 random_state=0, overrides=None):
        self.mode = mode
        self.objective = objective
        self.arrangement = arrangement
        self.expansion = expansion
        self.width = width
        self.epochs = epochs
        self.batch_size = batch_size
        self.base_lr = base_lr
        self.rotation_from_stage = rotation_from_stage
        self.stage = stage
        self.random_state = random_state
        self.overrides = overrides

    def to_config(self) -> Config:
        sets = {"augment.mode": self.mode, "train.objective": self.objective,
                "augment.arrangement": ",".join(self.arrangement), "model.expansion": self.expansion or "none",
                "model.width": self.width, "train.epochs": self.epochs, "train.batch_size": self.batch_size,
                "train.base_lr": self.base_lr, "augment.rotation_from_stage": self.rotation_from_stage,
                "train.seed": self.random_state}
        sets.update(self.overrides or {})
        return Config().with_overrides({k: str(v) for k, v in sets.items()}).validate()

    def fit(self, X, y=None, out_dir=None):
        config = self.to_config()
        X = check_images(X, config.data.image_size)
        result = pretrain(X, config, out_dir)
        self.model_ = result.model
        self.config_ = config
        self.checkpoint_ = result.checkpoint
        self.history_ = result.history
        self.n_features_out_ = self.model_.feature_dim
        return self

    @classmethod
    def from_checkpoint(cls, path, stage: int = 4) -> "HierarchicalContrastive":
        model, _, config = load_checkpoint(path)
        est = cls(mode=config.augment.mode, objective=config.train.objective,
                  arrangement="".join(config.augment.arrangement), expansion=",".join(config.model.expansion),
                  width=config.model.width, epochs=config.train.epochs, batch_size=config.train.batch_size,
                  base_lr=config.train.base_lr, rotation_from_stage=config.augment.rotation_from_stage,
                  stage=stage, random_state=config.train.seed)
        est.model_, est.config_, est.checkpoint_, est.history_ = model.eval(), config, path, []
        est.n_features_out_ = model.feature_dim
        return est

    def transform(self, X):
        check_is_fitted(self, "model_")
        X = check_images(X, self.config_.data.image_size)
        return extract_features(self.model_, X, self.stage)
