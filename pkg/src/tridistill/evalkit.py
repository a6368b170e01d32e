"""Frozen-feature evaluation: k-NN, linear probe, grid sweeps, robustness.

Features are the teacher's pooled backbone outputs, L2-normalized so
every comparison is cosine similarity. Sweeps materialize each lattice
cell as a sliced view and report one row per cell in enumeration order.
"""

from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass

import numpy as np

from . import kernel as K
from .backbones import BackboneSpec, forward
from .grids import ElasticGrid, depth_of, enumerate_ids, width_of
from .slicing import ParamStore, materialize

CSV_HEADER = ("depth", "width", "metric", "value", "seconds")


@dataclass(frozen=True)
class LabeledFeatures:
    """Row-normalized feature matrix with integer class labels."""

    features: np.ndarray  # (N, D), unit rows
    labels: np.ndarray  # (N,)

    def __post_init__(self):
        if self.features.ndim != 2:
            raise ValueError(f"features must be (N, D), got shape {self.features.shape}")
        if self.labels.shape != (len(self.features),):
            raise ValueError("labels must align with feature rows")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("features must be finite")

    @classmethod
    def from_raw(cls, features: np.ndarray, labels: np.ndarray) -> "LabeledFeatures":
        feats = np.asarray(features, dtype=np.float64)
        norms = np.linalg.norm(feats, axis=1, keepdims=True)
        return cls(feats / np.maximum(norms, 1e-12), np.asarray(labels))

    def __len__(self) -> int:
        return len(self.features)


def pooled_features(spec: BackboneSpec, params, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Eval-mode pooled outputs for a stack of images, batched."""
    chunks = []
    for start in range(0, len(images), batch_size):
        _, pooled = forward(spec, params, K.constant(images[start : start + batch_size]), training=False)
        chunks.append(pooled.data)
    return np.concatenate(chunks, axis=0)


def labeled_features(spec: BackboneSpec, params, images, labels, batch_size: int = 64) -> LabeledFeatures:
    return LabeledFeatures.from_raw(pooled_features(spec, params, images, batch_size), labels)


def knn_eval(train: LabeledFeatures, test: LabeledFeatures, k: int = 20, temperature: float = 0.07) -> float:
    """Top-1 accuracy of a cosine-weighted k-nearest-neighbor vote."""
    if k <= 0:
        raise ValueError(f"k must be positive, got {k}")
    if k > len(train):
        raise ValueError(f"k={k} exceeds the {len(train)} training rows")
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    sims = test.features @ train.features.T
    if k < len(train):
        top = np.argpartition(sims, -k, axis=1)[:, -k:]
    else:
        top = np.broadcast_to(np.arange(len(train)), (len(test), len(train)))
    rows = np.arange(len(test))[:, None]
    weights = np.exp(sims[rows, top] / temperature)
    votes = train.labels[top]
    classes = np.unique(train.labels)
    scores = np.stack([np.where(votes == c, weights, 0.0).sum(axis=1) for c in classes], axis=1)
    pred = classes[np.argmax(scores, axis=1)]
    return float(np.mean(pred == test.labels))


def fit_softmax(
    features: np.ndarray,
    labels: np.ndarray,
    epochs: int = 200,
    lr: float = 0.5,
    weight_decay: float = 1e-4,
) -> tuple[np.ndarray, np.ndarray]:
    """Multinomial logistic regression weights for frozen features.

    Full-batch gradient descent with heavy-ball momentum; a bias column
    is appended so no separate intercept bookkeeping is needed. Returns
    (classes, weights) where weights is (D + 1, C).
    """
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    classes = np.unique(labels)
    x = np.hstack([features, np.ones((len(features), 1))])
    y = (labels[:, None] == classes[None, :]).astype(np.float64)
    w = np.zeros((x.shape[1], len(classes)))
    vel = np.zeros_like(w)
    for _ in range(epochs):
        logits = x @ w
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        grad = x.T @ (p - y) / len(x) + weight_decay * w
        vel = 0.9 * vel - lr * grad
        w += vel
    return classes, w


def predict_softmax(classes: np.ndarray, weights: np.ndarray, features: np.ndarray) -> np.ndarray:
    x = np.hstack([features, np.ones((len(features), 1))])
    return classes[np.argmax(x @ weights, axis=1)]


def linear_probe(
    train: LabeledFeatures,
    test: LabeledFeatures,
    epochs: int = 200,
    lr: float = 0.5,
    weight_decay: float = 1e-4,
) -> float:
    """Test accuracy of a softmax regression fit on frozen features."""
    classes, w = fit_softmax(train.features, train.labels, epochs, lr, weight_decay)
    pred = predict_softmax(classes, w, test.features)
    return float(np.mean(pred == test.labels))


# -- full-grid sweeps ---------------------------------------------------------------


@dataclass(frozen=True)
class SweepRow:
    depth: int
    width: int
    metric: str
    value: float
    seconds: float


@dataclass(frozen=True)
class SweepReport:
    rows: tuple[SweepRow, ...]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for r in self.rows:
            writer.writerow([r.depth, r.width, r.metric, repr(r.value), repr(r.seconds)])
        return buf.getvalue()

    def save(self, path) -> None:
        with open(path, "w") as f:
            f.write(self.to_csv())

    @classmethod
    def from_csv(cls, text: str) -> "SweepReport":
        reader = csv.reader(io.StringIO(text))
        header = tuple(next(reader))
        if header != CSV_HEADER:
            raise ValueError(f"unexpected CSV header {header}")
        rows = tuple(
            SweepRow(int(d), int(w), m, float(v), float(s)) for d, w, m, v, s in reader
        )
        return cls(rows)

    def cell(self, depth: int, width: int, metric: str) -> float:
        for r in self.rows:
            if (r.depth, r.width, r.metric) == (depth, width, metric):
                return r.value
        raise KeyError(f"no row for depth={depth} width={width} metric={metric}")


def sweep(
    store: ParamStore,
    grid: ElasticGrid,
    train_images: np.ndarray,
    train_labels: np.ndarray,
    test_images: np.ndarray,
    test_labels: np.ndarray,
    k: int = 20,
    temperature: float = 0.07,
    batch_size: int = 64,
) -> SweepReport:
    """k-NN accuracy of every lattice cell, one row per cell in
    canonical enumeration order."""
    rows = []
    for sid in enumerate_ids(grid):
        t0 = time.perf_counter()
        view = materialize(store, grid, sid)
        train = labeled_features(store.spec, view, train_images, train_labels, batch_size)
        test = labeled_features(store.spec, view, test_images, test_labels, batch_size)
        acc = knn_eval(train, test, k=k, temperature=temperature)
        rows.append(
            SweepRow(depth_of(grid, sid.j), width_of(grid, sid.i), "knn", acc, time.perf_counter() - t0)
        )
    return SweepReport(tuple(rows))


# -- robustness probes --------------------------------------------------------------


def occlude_patches(images: np.ndarray, patch: int, level: float, rng: np.random.Generator) -> np.ndarray:
    """Zero out a random `level` fraction of patch-size cells per image."""
    if not 0.0 <= level <= 1.0:
        raise ValueError(f"occlusion level must be in [0, 1], got {level}")
    b, c, h, w = images.shape
    gh, gw = h // patch, w // patch
    n_cells = gh * gw
    n_drop = int(round(level * n_cells))
    out = images.copy()
    if n_drop == 0:
        return out
    cells = out.reshape(b, c, gh, patch, gw, patch)
    for i in range(b):
        drop = rng.choice(n_cells, size=n_drop, replace=False)
        cells[i, :, drop // gw, :, drop % gw, :] = 0.0
    return out


def shuffle_patches(images: np.ndarray, grid_size: int, rng: np.random.Generator) -> np.ndarray:
    """Randomly permute the cells of a grid_size x grid_size partition."""
    b, c, h, w = images.shape
    if grid_size < 1 or h % grid_size or w % grid_size:
        raise ValueError(f"grid size {grid_size} must divide the {h}x{w} image")
    if grid_size == 1:
        return images.copy()
    ch, cw = h // grid_size, w // grid_size
    cells = images.reshape(b, c, grid_size, ch, grid_size, cw)
    cells = cells.transpose(0, 2, 4, 1, 3, 5).reshape(b, grid_size * grid_size, c, ch, cw)
    out = np.empty_like(cells)
    for i in range(b):
        out[i] = cells[i, rng.permutation(grid_size * grid_size)]
    out = out.reshape(b, grid_size, grid_size, c, ch, cw).transpose(0, 3, 1, 4, 2, 5)
    return out.reshape(b, c, h, w)


def robustness_probe(
    spec: BackboneSpec,
    params,
    train_images,
    train_labels,
    test_images,
    test_labels,
    mode: str,
    levels,
    k: int = 20,
    temperature: float = 0.07,
    seed: int = 0,
    batch_size: int = 64,
) -> list[tuple[float, float]]:
    """k-NN accuracy per perturbation level applied to the test images.

    `mode` is "occlusion" (levels are masked-token fractions) or
    "shuffle" (levels are partition grid sizes). Training features stay
    clean; only the query images are perturbed.
    """
    if spec.family not in ("vit", "swin"):
        raise ValueError(f"robustness probes need a patch-token family, not {spec.family}")
    if mode not in ("occlusion", "shuffle"):
        raise ValueError(f"mode must be occlusion or shuffle, got {mode!r}")
    train = labeled_features(spec, params, train_images, train_labels, batch_size)
    curve = []
    for level in levels:
        rng = np.random.default_rng(seed)
        if mode == "occlusion":
            perturbed = occlude_patches(test_images, spec.patch_size, float(level), rng)
        else:
            perturbed = shuffle_patches(test_images, int(level), rng)
        test = labeled_features(spec, params, perturbed, test_labels, batch_size)
        curve.append((float(level), knn_eval(train, test, k=k, temperature=temperature)))
    return curve
