"""Synthetic image data for desk-scale runs.

Three shape classes (disk, box, bars) drawn in a random foreground
color on a noisy gray background. Colors are independent of the class
so only shape structure carries label information; this leaves the
evaluation headroom above chance without saturating at 100%.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

CLASS_NAMES = ("disk", "box", "bars")


@dataclass(frozen=True)
class ShapesConfig:
    num_images: int = 120
    image_size: int = 32
    noise: float = 0.03
    seed: int = 0

    def __post_init__(self):
        if self.num_images < 3:
            raise ValueError("num_images must be >= 3 (one per class)")
        if self.image_size < 8:
            raise ValueError("image_size must be >= 8")
        if self.noise < 0:
            raise ValueError("noise must be >= 0")


def _mask_disk(size: int, cy: float, cx: float, r: float) -> np.ndarray:
    yy, xx = np.ogrid[:size, :size]
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r


def _mask_box(size: int, cy: float, cx: float, half: float) -> np.ndarray:
    yy, xx = np.ogrid[:size, :size]
    return (np.abs(yy - cy) <= half) & (np.abs(xx - cx) <= half)


def _mask_bars(size: int, cy: float, cx: float, half: float, period: int) -> np.ndarray:
    cols = (np.arange(size) // period) % 2 == 0
    return _mask_box(size, cy, cx, half) & cols[None, :]


def make_shapes(cfg: ShapesConfig) -> tuple[np.ndarray, np.ndarray]:
    """Balanced dataset: images (N, 3, S, S) float32 in [0, 1], labels (N,)."""
    rng = np.random.default_rng(cfg.seed)
    s = cfg.image_size
    images = np.empty((cfg.num_images, 3, s, s), dtype=np.float32)
    labels = np.empty(cfg.num_images, dtype=np.int64)
    for i in range(cfg.num_images):
        cls = i % len(CLASS_NAMES)
        bg = rng.uniform(0.05, 0.30) + rng.normal(0.0, 0.02, size=3)
        fg = rng.uniform(0.55, 1.0, size=3)
        cy, cx = rng.uniform(0.38 * s, 0.62 * s, size=2)
        half = rng.uniform(0.22 * s, 0.34 * s)
        if cls == 0:
            mask = _mask_disk(s, cy, cx, half)
        elif cls == 1:
            mask = _mask_box(s, cy, cx, half)
        else:
            mask = _mask_bars(s, cy, cx, half, period=int(rng.integers(3, 5)))
        img = np.broadcast_to(bg.reshape(3, 1, 1), (3, s, s)).copy()
        img[:, mask] = fg.reshape(3, 1)
        if cfg.noise > 0:
            img += rng.normal(0.0, cfg.noise, size=img.shape)
        images[i] = np.clip(img, 0.0, 1.0)
        labels[i] = cls
    return images, labels


def save_npz(path, images: np.ndarray, labels: np.ndarray) -> None:
    _validate(images, labels)
    np.savez(path, images=images, labels=labels)


def load_npz(path) -> tuple[np.ndarray, np.ndarray]:
    with np.load(path) as z:
        if "images" not in z or "labels" not in z:
            raise ValueError(f"{path} must contain 'images' and 'labels' arrays")
        images, labels = z["images"], z["labels"]
    _validate(images, labels)
    return images, labels


def split_even_odd(images: np.ndarray, labels: np.ndarray):
    """Deterministic train/test split: even indices train, odd test.

    Balanced generators emit classes round-robin, so both halves stay
    class-balanced for 3-class data with an even sample count.
    """
    return (images[0::2], labels[0::2]), (images[1::2], labels[1::2])


def _validate(images: np.ndarray, labels: np.ndarray) -> None:
    if images.ndim != 4:
        raise ValueError(f"images must be (N, C, H, W), got shape {images.shape}")
    if labels.ndim != 1 or len(labels) != len(images):
        raise ValueError(f"labels must be ({len(images)},), got shape {labels.shape}")
    if not np.issubdtype(images.dtype, np.floating):
        raise ValueError(f"images must be floating point, got {images.dtype}")
    if not np.issubdtype(labels.dtype, np.integer):
        raise ValueError(f"labels must be integers, got {labels.dtype}")
    lo, hi = float(images.min()), float(images.max())
    if lo < 0.0 or hi > 1.0:
        raise ValueError(f"image values must lie in [0, 1], found range [{lo}, {hi}]")
