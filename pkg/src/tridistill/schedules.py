"""Per-step scalar schedules used by the training loop.

All functions take integer step counts and return plain floats. The
learning rate warms up linearly from zero, then decays on a cosine; the
weight decay and teacher momentum follow cosines; the teacher
temperature warms up linearly to its final value, then holds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass


@dataclass(frozen=True)
class SchedConfig:
    """Optimization knobs resolved per step by the schedule functions."""

    epochs: int = 5
    batch_size: int = 8
    max_steps: int = 0  # 0 runs epochs * steps-per-epoch
    warmup_epochs: float = 1.0
    temp_warmup_epochs: float = 1.0
    lr_base: float = 0.004
    lr_final: float = 0.0
    wd_start: float = 0.04
    wd_end: float = 0.4
    student_temp: float = 0.1
    teacher_temp_start: float = 0.04
    teacher_temp_end: float = 0.07
    momentum_start: float = 0.992
    momentum_end: float = 0.9999
    clip_norm: float = 1.5
    layerwise_decay: float = 0.9
    patch_embed_mult: float = 0.2
    freeze_proto_epochs: int = 1
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (the spread penalty needs pairs)")
        if self.max_steps < 0:
            raise ValueError("max_steps must be >= 0")
        for name in ("student_temp", "teacher_temp_start", "teacher_temp_end"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in ("momentum_start", "momentum_end"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must be in [0, 1]")
        if self.clip_norm < 0:
            raise ValueError("clip_norm must be >= 0 (0 disables clipping)")
        if not 0.0 < self.layerwise_decay <= 1.0:
            raise ValueError("layerwise_decay must be in (0, 1]")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype!r}")


def cosine_interp(step: int, total: int, start: float, end: float) -> float:
    """Cosine interpolation from start (step 0) to end (step total)."""
    if total <= 0:
        return end
    t = min(max(step / total, 0.0), 1.0)
    return end + (start - end) * 0.5 * (1.0 + math.cos(math.pi * t))


def linear_then_cosine(step: int, total: int, warmup: int, peak: float, final: float = 0.0) -> float:
    """Linear ramp 0 -> peak over `warmup` steps, cosine peak -> final after."""
    if warmup > 0 and step < warmup:
        return peak * step / warmup
    span = max(total - warmup, 1)
    return cosine_interp(step - warmup, span, peak, final)


def base_lr(lr_base: float, batch_size: int) -> float:
    """Square-root batch scaling of the reference rate (defined at 1024)."""
    return lr_base * math.sqrt(batch_size / 1024.0)


def lr_at(
    step: int,
    total: int,
    warmup: int,
    batch_size: int,
    lr_base: float = 0.004,
    final: float = 0.0,
) -> float:
    return linear_then_cosine(step, total, warmup, base_lr(lr_base, batch_size), final)


def wd_at(step: int, total: int, start: float = 0.04, end: float = 0.4) -> float:
    return cosine_interp(step, total, start, end)


def momentum_at(step: int, total: int, start: float = 0.992, end: float = 0.9999) -> float:
    return cosine_interp(step, total, start, end)


def teacher_temp_at(step: int, warmup: int, start: float = 0.04, end: float = 0.07) -> float:
    """Linear warmup to the final temperature, constant afterwards."""
    if warmup <= 0 or step >= warmup:
        return end
    return start + (end - start) * step / warmup
