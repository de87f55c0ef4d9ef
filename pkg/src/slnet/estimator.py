"""Scikit-learn style wrappers around the point-cloud backbone.

PointCloudClassifier exposes the full train/predict pipeline through the
familiar fit/predict/get_params surface so it composes with pipelines,
grid search and cross-validation. NapeFeaturizer is a stateless transformer
producing fixed-length geometric descriptors for use with any downstream
sklearn estimator.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.exceptions import NotFittedError

from .backbone import ModelConfig, build_model
from .nape import NapeConfig, nape_embed
from .geom import normalize_cloud
from .train import LossConfig, OptimConfig, evaluate, softmax, train_classifier


def check_clouds(X, n_points: int | None = None, normalize: bool = True,
                 seed: int = 0) -> np.ndarray:
    """Validate and canonicalize cloud input to a (n, N, 3) float32 array.

    Accepts a 3-D array or a sequence of (N_i, 3) arrays; clouds are
    resampled to a common point count (deterministically, per-cloud seeded)
    and unit-sphere normalized unless disabled.
    """
    if isinstance(X, np.ndarray) and X.ndim == 3:
        clouds = [X[i] for i in range(X.shape[0])]
    else:
        clouds = [np.asarray(c) for c in X]
    if not clouds:
        raise ValueError("need at least one point cloud")
    for i, c in enumerate(clouds):
        if c.ndim != 2 or c.shape[1] < 3:
            raise ValueError(f"cloud {i} must be (N, >=3), got {c.shape}")
        if not np.all(np.isfinite(c)):
            raise ValueError(f"cloud {i} contains non-finite coordinates")
    if n_points is None:
        n_points = clouds[0].shape[0]
    out = np.empty((len(clouds), n_points, 3), dtype=np.float32)
    for i, c in enumerate(clouds):
        pts = np.asarray(c[:, :3], dtype=np.float32)
        if pts.shape[0] != n_points:
            rng = np.random.default_rng(
                np.random.SeedSequence([seed, i]).generate_state(1)[0])
            idx = rng.choice(pts.shape[0], n_points,
                             replace=pts.shape[0] < n_points)
            pts = pts[np.sort(idx)]
        out[i] = normalize_cloud(pts) if normalize else pts
    return out


class PointCloudClassifier(ClassifierMixin, BaseEstimator):
    """Trainable shape classifier with an sklearn estimator interface.

    Parameters mirror the architectural and optimization knobs; `variant`
    picks a preset ("s", "m", "tiny") whose fields individual arguments
    override when not None.
    """

    def __init__(self, variant: str = "tiny", d: int | None = None,
                 k: int | None = None, n_points: int | None = None,
                 stage_depths: tuple | None = None, lrb_ratio: float = 0.25,
                 embedding: str = "nape", gmu_placement: str = "after_embedding",
                 gmu_order: str = "ab", sampling: str = "fps",
                 epochs: int = 60, batch_size: int = 50, lr: float = 0.1,
                 momentum: float = 0.9, weight_decay: float = 1e-4,
                 ema_rho: float = 0.95, use_ema: bool = True,
                 label_smoothing: float = 0.0, loss: str = "ce",
                 normalize: bool = True, seed: int = 0, verbose: bool = False):
        self.variant = variant
        self.d = d
        self.k = k
        self.n_points = n_points
        self.stage_depths = stage_depths
        self.lrb_ratio = lrb_ratio
        self.embedding = embedding
        self.gmu_placement = gmu_placement
        self.gmu_order = gmu_order
        self.sampling = sampling
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.ema_rho = ema_rho
        self.use_ema = use_ema
        self.label_smoothing = label_smoothing
        self.loss = loss
        self.normalize = normalize
        self.seed = seed
        self.verbose = verbose

    # ------------------------------------------------------------------
    def _build_config(self, n_classes: int, n_points: int) -> ModelConfig:
        from .backbone import PRESETS

        if self.variant not in PRESETS:
            raise ValueError(f"unknown variant {self.variant!r}")
        overrides = {}
        if self.d is not None:
            overrides["d"] = self.d
        if self.k is not None:
            overrides["k"] = self.k
        if self.stage_depths is not None:
            overrides["stage_depths"] = tuple(self.stage_depths)
        cfg = PRESETS[self.variant](
            n_classes=n_classes, n_points=n_points,
            lrb_ratio=self.lrb_ratio, embedding=self.embedding,
            gmu_placement=self.gmu_placement, gmu_order=self.gmu_order,
            sampling=self.sampling, normalize_input=self.normalize,
            **overrides)
        return cfg

    def fit(self, X, y):
        y = np.asarray(y)
        self.classes_, targets = np.unique(y, return_inverse=True)
        n_points = self.n_points or (ModelConfig.slnet_s_tiny().n_points
                                     if self.variant == "tiny" else 1024)
        clouds = check_clouds(X, n_points, self.normalize, self.seed)
        self.config_ = self._build_config(len(self.classes_), n_points)
        self.model_ = build_model(self.config_, seed=self.seed)
        optim = OptimConfig(lr0=self.lr, epochs=self.epochs,
                            momentum=self.momentum,
                            weight_decay=self.weight_decay,
                            ema_rho=self.ema_rho, batch_size=self.batch_size,
                            use_ema=self.use_ema)
        freqs = np.bincount(targets, minlength=len(self.classes_))
        loss_cfg = LossConfig(kind=self.loss,
                              label_smoothing=self.label_smoothing,
                              class_freqs=freqs if self.loss == "wce" else None)
        log = print if self.verbose else None
        result = train_classifier(self.model_, clouds, targets, optim,
                                  loss_cfg, seed=self.seed, log=log)
        self.ema_ = result.ema
        self.history_ = result.log_lines
        if self.ema_ is not None:
            self.ema_.swap_in()  # serve EMA weights at prediction time
        self.model_.eval()
        return self

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError("call fit before predict")

    def decision_function(self, X) -> np.ndarray:
        self._check_fitted()
        clouds = check_clouds(X, self.config_.n_points, self.normalize, self.seed)
        logits = []
        for lo in range(0, len(clouds), 32):
            logits.append(self.model_.forward(clouds[lo:lo + 32],
                                              sample_seed=0).data)
        return np.concatenate(logits, axis=0)

    def predict_proba(self, X) -> np.ndarray:
        return softmax(self.decision_function(X))

    def predict(self, X) -> np.ndarray:
        scores = self.decision_function(X)
        return self.classes_[scores.argmax(axis=1)]

    def evaluate(self, X, y) -> tuple[float, float]:
        """(overall accuracy, mean class accuracy) on a labeled set."""
        from .train import metrics

        self._check_fitted()
        y = np.asarray(y)
        targets = np.searchsorted(self.classes_, y)
        clouds = check_clouds(X, self.config_.n_points, self.normalize, self.seed)
        return metrics(evaluate(self.model_, clouds, targets))


class NapeFeaturizer(TransformerMixin, BaseEstimator):
    """Parameter-free per-cloud descriptors: pooled adaptive basis features."""

    def __init__(self, d: int = 16, pooling: str = "max", normalize: bool = True):
        self.d = d
        self.pooling = pooling
        self.normalize = normalize

    def fit(self, X, y=None):
        if self.pooling not in ("max", "mean"):
            raise ValueError(f"unknown pooling {self.pooling!r}")
        self.nape_config_ = NapeConfig(d=self.d)
        return self

    def transform(self, X) -> np.ndarray:
        if not hasattr(self, "nape_config_"):
            raise NotFittedError("call fit before transform")
        out = np.empty((len(X), self.d), dtype=np.float32)
        for i, cloud in enumerate(X):
            pts = np.asarray(cloud, dtype=np.float32)[:, :3]
            if self.normalize:
                pts = normalize_cloud(pts)
            feats = nape_embed(pts, self.nape_config_)
            out[i] = feats.max(axis=0) if self.pooling == "max" else feats.mean(axis=0)
        return out
