"""Scikit-learn style estimator around training, rendering and evaluation."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .config import Config
from .evaluation import evaluate, mean_metrics, render_target
from .model import HumanFieldModel
from .trainer import FrameCache, train
from .validation import check_dataset, check_pairs


class HumanFieldRenderer(BaseEstimator):
    """Learns to render a person's novel views and poses from one image.

    ``fit`` takes a dataset (or its directory); ``predict`` takes frame pairs
    and returns the target renders; ``score`` is the mean held-out novel-view
    PSNR. Keys not exposed as constructor arguments come from ``config``.

    Example::

        est = HumanFieldRenderer(epochs=5).fit("data")
        images = est.predict(pairs)  # (n, H, W, 3)
    """

    def __init__(self, epochs: int = 5, lr: float = 2e-3, n_samples: int = 48, rays_per_step: int = 512,
                 seed: int = 0, init_seed: int = 0, jitter: bool = True, config: Config | None = None):
        self.epochs = epochs
        self.lr = lr
        self.n_samples = n_samples
        self.rays_per_step = rays_per_step
        self.seed = seed
        self.init_seed = init_seed
        self.jitter = jitter
        self.config = config

    def _config(self) -> Config:
        base = self.config or Config()
        return base.replace(epochs=self.epochs, lr=self.lr, n_samples=self.n_samples,
                            rays_per_step=self.rays_per_step, seed=self.seed, init_seed=self.init_seed,
                            jitter=self.jitter)

    def fit(self, X, y=None):
        dataset = check_dataset(X, "train")
        cfg = self._config()
        self.model_ = HumanFieldModel(cfg)
        losses = []
        train(self.model_, dataset, on_step=lambda s: losses.append((s.epoch, s.values["total"])))
        epochs = np.array([e for e, _ in losses], dtype=int)
        totals = np.array([t for _, t in losses])
        self.loss_curve_ = np.array([totals[epochs == e].mean() for e in np.unique(epochs)])
        self.n_steps_ = len(losses)
        self.dataset_ = dataset
        return self

    def predict(self, X) -> np.ndarray:
        """Render each pair's target camera and pose from its source frame."""
        check_is_fitted(self, "model_")
        pairs = check_pairs(X, self.model_.config.image_size)
        cache = FrameCache(self.dataset_, self.model_.config)
        return np.stack([render_target(self.model_, cache, p.source, p.target)[0] for p in pairs])

    def score(self, X, y=None) -> float:
        check_is_fitted(self, "model_")
        dataset = check_dataset(X, "test")
        return mean_metrics(evaluate(self.model_, dataset, "test", self.seed, ("novel_view",))["novel_view"])[0]
