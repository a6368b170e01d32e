"""Estimator wrappers with the fit/transform/predict surface.

These adapt the training loop and frozen-feature evaluators to the
scikit-learn protocol (get_params/set_params, fitted attributes with a
trailing underscore, input validation) so they compose with pipelines
and model selection utilities.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .augment import AugmentConfig
from .backbones import BackboneSpec
from .evalkit import fit_softmax, pooled_features, predict_softmax
from .grids import ElasticGrid, SamplerConfig, SubNetId
from .schedules import SchedConfig
from .slicing import materialize
from .trainer import run_pretrain


def _check_images(x) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim != 4:
        raise ValueError(f"images must be (N, C, H, W), got shape {x.shape}")
    if not np.issubdtype(x.dtype, np.floating):
        x = x.astype(np.float32)
    if not np.all(np.isfinite(x)):
        raise ValueError("images must be finite")
    return x


class ElasticPretrainer(TransformerMixin, BaseEstimator):
    """Self-distillation pre-trainer exposing pooled teacher features.

    fit(X) runs the tri-branch loop on unlabeled images; transform(X)
    returns the frozen teacher's pooled features for any lattice cell
    (default: the intact network).
    """

    def __init__(
        self,
        spec: BackboneSpec | None = None,
        grid: ElasticGrid | None = None,
        heads=None,
        sampler: SamplerConfig | None = None,
        aug: AugmentConfig | None = None,
        sched: SchedConfig | None = None,
        lam: float = 0.8,
        gamma: float = 0.1,
        same_view: bool = True,
        sk_iters: int = 3,
    ):
        self.spec = spec
        self.grid = grid
        self.heads = heads
        self.sampler = sampler
        self.aug = aug
        self.sched = sched
        self.lam = lam
        self.gamma = gamma
        self.same_view = same_view
        self.sk_iters = sk_iters

    def fit(self, X, y=None):
        for name in ("spec", "grid", "heads"):
            if getattr(self, name) is None:
                raise ValueError(f"{name} must be set before fit")
        X = _check_images(X)
        state = run_pretrain(
            self.spec,
            self.grid,
            self.heads,
            self.sampler or SamplerConfig(),
            self.aug or AugmentConfig(),
            self.sched or SchedConfig(),
            X,
            lam=self.lam,
            gamma=self.gamma,
            same_view=self.same_view,
            sk_iters=self.sk_iters,
        )
        self.state_ = state
        self.teacher_ = state.teacher
        self.n_features_in_ = X.shape[1] * X.shape[2] * X.shape[3]
        return self

    def transform(self, X, cell: SubNetId | None = None) -> np.ndarray:
        check_is_fitted(self, "teacher_")
        X = _check_images(X)
        params = self.teacher_ if cell is None else materialize(self.teacher_, self.grid, cell)
        return pooled_features(self.spec, params, X)


class CosineKNN(ClassifierMixin, BaseEstimator):
    """k-nearest-neighbor classifier with temperature-weighted cosine votes."""

    def __init__(self, k: int = 20, temperature: float = 0.07):
        self.k = k
        self.temperature = temperature

    def fit(self, X, y):
        X, y = check_X_y(X, y)
        if self.k <= 0:
            raise ValueError(f"k must be positive, got {self.k}")
        if self.k > len(X):
            raise ValueError(f"k={self.k} exceeds the {len(X)} training rows")
        if self.temperature <= 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        norms = np.linalg.norm(X, axis=1, keepdims=True)
        self.features_ = X / np.maximum(norms, 1e-12)
        self.labels_ = y
        self.classes_ = np.unique(y)
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "features_")
        X = check_array(X)
        norms = np.linalg.norm(X, axis=1, keepdims=True)
        q = X / np.maximum(norms, 1e-12)
        sims = q @ self.features_.T
        k = min(self.k, sims.shape[1])
        top = np.argpartition(sims, -k, axis=1)[:, -k:]
        rows = np.arange(len(q))[:, None]
        weights = np.exp(sims[rows, top] / self.temperature)
        votes = self.labels_[top]
        scores = np.stack(
            [np.where(votes == c, weights, 0.0).sum(axis=1) for c in self.classes_], axis=1
        )
        return self.classes_[np.argmax(scores, axis=1)]


class SoftmaxProbe(ClassifierMixin, BaseEstimator):
    """Linear probe: softmax regression on frozen features."""

    def __init__(self, epochs: int = 200, lr: float = 0.5, weight_decay: float = 1e-4):
        self.epochs = epochs
        self.lr = lr
        self.weight_decay = weight_decay

    def fit(self, X, y):
        X, y = check_X_y(X, y)
        self.classes_, self.weights_ = fit_softmax(
            X, y, epochs=self.epochs, lr=self.lr, weight_decay=self.weight_decay
        )
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "weights_")
        X = check_array(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        return predict_softmax(self.classes_, self.weights_, X)
