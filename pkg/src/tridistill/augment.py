"""Multi-crop augmentation producing two global and v local views.

Images are (B, C, H, W) float arrays in [0, 1]. Per view and image the
pipeline is: random resized crop, horizontal flip, color jitter
(brightness, contrast, saturation, hue, in that fixed order), Gaussian
blur, and, for the second global view only, solarization. Blur
probability differs per view slot (first global, second global,
locals). Everything is driven by the one generator passed in, so a
fixed seed reproduces the views bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.ndimage import gaussian_filter

_YIQ = np.array(
    [[0.299, 0.587, 0.114], [0.595716, -0.274453, -0.321263], [0.211456, -0.522591, 0.311135]]
)
_YIQ_INV = np.linalg.inv(_YIQ)
_LUMA = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class AugmentConfig:
    local_crops: int = 2
    global_size: int = 32
    local_size: int = 16
    global_scale: tuple[float, float] = (0.32, 1.0)
    local_scale: tuple[float, float] = (0.05, 0.32)
    flip_prob: float = 0.5
    jitter_prob: float = 0.8
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.2
    hue: float = 0.1
    blur_probs: tuple[float, float, float] = (1.0, 0.1, 0.5)
    blur_radius: tuple[float, float] = (0.1, 2.0)
    solarize_prob: float = 0.2
    solarize_threshold: float = 0.5

    def __post_init__(self):
        if self.local_crops < 0:
            raise ValueError("local_crops must be >= 0")
        for name in ("global_scale", "local_scale", "blur_radius"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi:
                raise ValueError(f"{name} must be an increasing positive range, got ({lo}, {hi})")
        for name in ("flip_prob", "jitter_prob", "solarize_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must be a probability, got {p}")


@dataclass
class ViewBatch:
    """Two global crops and local crops of one image batch."""

    globals_: list[np.ndarray]
    locals_: list[np.ndarray]


@lru_cache(maxsize=4096)
def _lin_matrix(src: int, dst: int) -> np.ndarray:
    """(dst, src) bilinear resampling matrix for one axis."""
    m = np.zeros((dst, src))
    scale = src / dst
    for o in range(dst):
        s = min(max((o + 0.5) * scale - 0.5, 0.0), src - 1.0)
        i0 = int(math.floor(s))
        w = s - i0
        i1 = min(i0 + 1, src - 1)
        m[o, i0] += 1.0 - w
        m[o, i1] += w
    return m


def _resize(img: np.ndarray, size: int) -> np.ndarray:
    c, h, w = img.shape
    if h == size and w == size:
        return img
    my = _lin_matrix(h, size)
    mx = _lin_matrix(w, size)
    return np.einsum("oh,chw,pw->cop", my, img, mx, optimize=True)


def _random_resized_crop(
    img: np.ndarray, size: int, scale: tuple[float, float], rng: np.random.Generator
) -> np.ndarray:
    c, h, w = img.shape
    area = h * w
    for _ in range(10):
        target = area * rng.uniform(*scale)
        aspect = math.exp(rng.uniform(math.log(3 / 4), math.log(4 / 3)))
        cw = int(round(math.sqrt(target * aspect)))
        ch = int(round(math.sqrt(target / aspect)))
        if 0 < cw <= w and 0 < ch <= h:
            top = int(rng.integers(0, h - ch + 1))
            left = int(rng.integers(0, w - cw + 1))
            return _resize(img[:, top : top + ch, left : left + cw], size)
    side = min(h, w)
    top = (h - side) // 2
    left = (w - side) // 2
    return _resize(img[:, top : top + side, left : left + side], size)


def _color_jitter(img: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    out = img
    if cfg.brightness > 0:
        out = out * rng.uniform(1 - cfg.brightness, 1 + cfg.brightness)
    if cfg.contrast > 0:
        mean = (out * _LUMA[:, None, None]).sum(axis=0).mean()
        out = (out - mean) * rng.uniform(1 - cfg.contrast, 1 + cfg.contrast) + mean
    if cfg.saturation > 0:
        luma = np.tensordot(_LUMA, out, axes=1)[None]
        out = (out - luma) * rng.uniform(1 - cfg.saturation, 1 + cfg.saturation) + luma
    if cfg.hue > 0:
        theta = rng.uniform(-cfg.hue, cfg.hue) * 2.0 * math.pi
        cos_t, sin_t = math.cos(theta), math.sin(theta)
        rot = np.array([[1, 0, 0], [0, cos_t, -sin_t], [0, sin_t, cos_t]])
        m = _YIQ_INV @ rot @ _YIQ
        out = np.tensordot(m, out, axes=1)
    return np.clip(out, 0.0, 1.0)


def _augment_one(
    img: np.ndarray,
    size: int,
    scale: tuple[float, float],
    blur_prob: float,
    solarize_prob: float,
    cfg: AugmentConfig,
    rng: np.random.Generator,
) -> np.ndarray:
    out = _random_resized_crop(img, size, scale, rng)
    if rng.random() < cfg.flip_prob:
        out = out[:, :, ::-1]
    if rng.random() < cfg.jitter_prob:
        out = _color_jitter(out, cfg, rng)
    if rng.random() < blur_prob:
        sigma = rng.uniform(*cfg.blur_radius)
        out = gaussian_filter(out, sigma=(0.0, sigma, sigma))
    if solarize_prob > 0 and rng.random() < solarize_prob:
        out = np.where(out >= cfg.solarize_threshold, 1.0 - out, out)
    return np.ascontiguousarray(out)


def augment(images: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> ViewBatch:
    """Crop a batch into 2 global and cfg.local_crops local views."""
    images = np.asarray(images)
    if images.ndim != 4:
        raise ValueError(f"expected (B, C, H, W) images, got shape {images.shape}")
    side = min(images.shape[2], images.shape[3])
    wanted = max(cfg.global_size, cfg.local_size if cfg.local_crops > 0 else 0)
    if wanted > side:
        raise ValueError(f"crop size {wanted} larger than {images.shape[2]}x{images.shape[3]} images")
    dtype = images.dtype
    slots = [
        ("g", cfg.blur_probs[0], 0.0),
        ("g", cfg.blur_probs[1], cfg.solarize_prob),
    ] + [("l", cfg.blur_probs[2], 0.0)] * cfg.local_crops
    views: list[np.ndarray] = []
    for kind, blur_p, sol_p in slots:
        size = cfg.global_size if kind == "g" else cfg.local_size
        scale = cfg.global_scale if kind == "g" else cfg.local_scale
        batch = np.stack(
            [_augment_one(img, size, scale, blur_p, sol_p, cfg, rng) for img in images]
        ).astype(dtype)
        views.append(batch)
    return ViewBatch(globals_=views[:2], locals_=views[2:])
