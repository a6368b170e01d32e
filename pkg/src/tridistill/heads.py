"""Projection heads mapping pooled features to prototype logits.

Each head is a three-layer MLP whose bottleneck output is L2-normalized
before the final prototype projection. Multiple heads with different
prototype counts run side by side; losses are averaged over them.

Only the first layer sees the backbone width, so it is the only head
parameter that participates in width slicing. All later layers are
shared storage between the intact and elastic branches.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernel as K

BOTTLENECK_EPS = 1e-6


@dataclass(frozen=True)
class HeadsConfig:
    """Shared sizing for the bank of heads."""

    in_dim: int
    hidden: int = 64
    bottleneck: int = 32
    prototypes: tuple[int, ...] = (64, 128, 256, 512)

    def __post_init__(self):
        object.__setattr__(self, "prototypes", tuple(int(p) for p in self.prototypes))
        if self.in_dim < 1 or self.hidden < 1 or self.bottleneck < 1:
            raise ValueError("head dimensions must be positive")
        if not self.prototypes or min(self.prototypes) < 2:
            raise ValueError("each head needs at least 2 prototypes")

    @property
    def count(self) -> int:
        return len(self.prototypes)


def head_param_shapes(cfg: HeadsConfig) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}
    for h, protos in enumerate(cfg.prototypes):
        shapes[f"head{h}.fc1.weight"] = (cfg.hidden, cfg.in_dim)
        shapes[f"head{h}.fc1.bias"] = (cfg.hidden,)
        shapes[f"head{h}.fc2.weight"] = (cfg.hidden, cfg.hidden)
        shapes[f"head{h}.fc2.bias"] = (cfg.hidden,)
        shapes[f"head{h}.fc3.weight"] = (cfg.bottleneck, cfg.hidden)
        shapes[f"head{h}.fc3.bias"] = (cfg.bottleneck,)
        shapes[f"head{h}.proto.weight"] = (protos, cfg.bottleneck)
    return shapes


def head_init_arrays(cfg: HeadsConfig, rng: np.random.Generator, dtype=np.float32) -> dict[str, np.ndarray]:
    arrays: dict[str, np.ndarray] = {}
    for name, shape in head_param_shapes(cfg).items():
        if name.endswith(".bias"):
            arrays[name] = np.zeros(shape, dtype=dtype)
        else:
            arrays[name] = rng.normal(0.0, 0.02, size=shape).astype(dtype)
    return arrays


def head_forward(params, h: int, pooled: K.Tensor) -> K.Tensor:
    """Prototype logits for head h from pooled features (B, d).

    The fc1 weight obtained from `params` already matches the active
    width when `params` is a sliced view.
    """
    w1 = params.get(f"head{h}.fc1.weight")
    if pooled.shape[-1] != w1.shape[-1]:
        raise ValueError(
            f"pooled width {pooled.shape[-1]} does not match head{h}.fc1 input {w1.shape[-1]}"
        )
    x = K.add(K.matmul(pooled, K.transpose(w1, (1, 0))), params.get(f"head{h}.fc1.bias"))
    x = K.gelu(x)
    x = K.add(K.matmul(x, K.transpose(params.get(f"head{h}.fc2.weight"), (1, 0))), params.get(f"head{h}.fc2.bias"))
    x = K.gelu(x)
    x = K.add(K.matmul(x, K.transpose(params.get(f"head{h}.fc3.weight"), (1, 0))), params.get(f"head{h}.fc3.bias"))
    x = K.l2_normalize(x, eps=BOTTLENECK_EPS)
    return K.matmul(x, K.transpose(params.get(f"head{h}.proto.weight"), (1, 0)))
