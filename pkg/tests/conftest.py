"""Shared fixtures: tiny architectures and the finite-difference oracle."""

from __future__ import annotations

import numpy as np
import pytest

from tridistill import kernel as K
from tridistill.backbones import BackboneSpec
from tridistill.grids import ElasticGrid
from tridistill.heads import HeadsConfig


@pytest.fixture(autouse=True)
def _float32_default():
    """Each test starts from the float32 default dtype."""
    K.set_default_dtype(np.float32)
    yield
    K.set_default_dtype(np.float32)


def central_diff(f, x: np.ndarray, idx: tuple, h: float = 1e-5) -> float:
    """Central finite difference of scalar f at one coordinate of x.

    Mutates x in place around the evaluation and restores it after, so
    f may capture x by reference.
    """
    orig = x[idx]
    x[idx] = orig + h
    fp = f()
    x[idx] = orig - h
    fm = f()
    x[idx] = orig
    return (fp - fm) / (2.0 * h)


def rel_err(a: float, b: float, floor: float = 1e-8) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def tiny_vit(**kw) -> BackboneSpec:
    base = dict(family="vit", image_size=16, patch_size=4, d_h=4, n_h=4, l_max=3)
    base.update(kw)
    return BackboneSpec(**base)


def tiny_swin(**kw) -> BackboneSpec:
    base = dict(
        family="swin",
        image_size=16,
        patch_size=2,
        d_h=4,
        n_h=2,
        l_max=7,
        stage_blocks=(1, 2, 4),
        window=2,
    )
    base.update(kw)
    return BackboneSpec(**base)


def tiny_resnet(**kw) -> BackboneSpec:
    base = dict(
        family="resnet",
        image_size=16,
        d_h=4,
        n_h=2,
        l_max=8,
        stage_blocks=(1, 3, 3, 1),
        stem_channels=4,
        expansion=2,
    )
    base.update(kw)
    return BackboneSpec(**base)


def grid_for(spec: BackboneSpec, m: int = 1, n: int = 1, stage_depths=None) -> ElasticGrid:
    return ElasticGrid(
        d_h=spec.d_h, n_h=spec.n_h, l_max=spec.l_max, m=m, n=n, stage_depths=stage_depths
    )


def tiny_heads(spec: BackboneSpec, protos=(8, 16)) -> HeadsConfig:
    return HeadsConfig(in_dim=spec.pooled_dim(), hidden=12, bottleneck=6, prototypes=protos)
