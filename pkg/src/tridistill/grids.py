"""Width/depth lattice bookkeeping and sub-network sampling.

A grid describes every extractable sub-network of one pretrained store:
widths shrink from the full model in steps of one attention head worth
of channels, depths shrink one block at a time (or, for the residual
family, follow an explicit per-stage table). `SubNetId` indexes the
lattice with (0, 0) as the full network.

The sampler draws ids either round-robin (a fresh shuffled permutation
each cycle) or probabilistically, where smaller networks are favored by
a size-graded weight so that the weakest members of the family see the
most training signal.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True, order=True)
class SubNetId:
    """Lattice coordinates: i indexes width, j depth, (0, 0) = full net."""

    i: int
    j: int


@dataclass(frozen=True)
class ElasticGrid:
    """The lattice of widths and depths carved out of one full network.

    d_h is the width quantum (one attention head's channels), n_h the
    head count at full width, so full width d_max = n_h * d_h and width
    i is (n_h - i) * d_h for i in 0..m. Depth j is l_max - j for j in
    0..n, except when `stage_depths` is given (residual family): then j
    indexes that table directly and each entry lists the block count of
    every depth-elastic stage.
    """

    d_h: int
    n_h: int
    l_max: int
    m: int
    n: int
    stage_depths: tuple[tuple[int, ...], ...] | None = None

    def __post_init__(self):
        if self.d_h < 1 or self.n_h < 1:
            raise ValueError(f"d_h and n_h must be positive, got d_h={self.d_h}, n_h={self.n_h}")
        if not 0 <= self.m < self.n_h:
            raise ValueError(f"width count m+1 must satisfy 0 <= m < n_h, got m={self.m}, n_h={self.n_h}")
        if self.stage_depths is not None:
            object.__setattr__(self, "stage_depths", tuple(tuple(s) for s in self.stage_depths))
            if self.n != len(self.stage_depths) - 1:
                raise ValueError(
                    f"n={self.n} inconsistent with {len(self.stage_depths)} stage depth entries"
                )
            if len(set(self.stage_depths)) != len(self.stage_depths):
                raise ValueError("duplicate entries in stage_depths")
        else:
            if self.n < 0 or self.l_max - self.n < 2:
                raise ValueError(
                    f"depth count n+1 must keep the shallowest depth >= 2, got n={self.n}, l_max={self.l_max}"
                )

    @property
    def d_max(self) -> int:
        return self.n_h * self.d_h

    @property
    def num_subnets(self) -> int:
        return (self.m + 1) * (self.n + 1)


def width_of(grid: ElasticGrid, i: int) -> int:
    """Width at index i: (n_h - i) * d_h, so i = 0 is the full width."""
    if not 0 <= i <= grid.m:
        raise ValueError(f"width index {i} outside 0..{grid.m}")
    return (grid.n_h - i) * grid.d_h


def depth_of(grid: ElasticGrid, j: int) -> int:
    """Total depth at index j. For staged tables this sums the entry."""
    if not 0 <= j <= grid.n:
        raise ValueError(f"depth index {j} outside 0..{grid.n}")
    if grid.stage_depths is not None:
        return sum(grid.stage_depths[j])
    return grid.l_max - j


def block_ids(l_max: int, l_i: int) -> list[int]:
    """Which of l_max stacked blocks a depth-l_i sub-network keeps.

    Blocks are spread evenly across the full stack: the k-th kept block
    is floor((l_max - 1) * k / (l_i - 1)). The first and last block are
    always kept, which is why l_i must be at least 2.
    """
    if l_i < 2:
        raise ValueError(f"sub-network depth must be >= 2, got {l_i}")
    if l_i > l_max:
        raise ValueError(f"sub-network depth {l_i} exceeds stack depth {l_max}")
    return [((l_max - 1) * k) // (l_i - 1) for k in range(l_i)]


def enumerate_ids(grid: ElasticGrid) -> list[SubNetId]:
    """All lattice ids, width-major, full network first."""
    return [SubNetId(i, j) for i in range(grid.m + 1) for j in range(grid.n + 1)]


@dataclass(frozen=True)
class SamplerConfig:
    mode: str = "probabilistic"
    s_w: float = 3.0
    s_d: float = 3.0
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("probabilistic", "round_robin"):
            raise ValueError(f"sampler mode must be probabilistic or round_robin, got {self.mode!r}")
        if self.s_w < 1.0 or self.s_d < 1.0:
            raise ValueError(f"sampling intensities must be >= 1, got s_w={self.s_w}, s_d={self.s_d}")


def sample_prob(cfg: SamplerConfig, grid: ElasticGrid, i: int, j: int) -> float:
    """Draw probability of lattice cell (i, j) in size order.

    Size order means i = 0 is the narrowest width and j = 0 the
    shallowest depth (the reverse of `SubNetId`), so the smallest
    sub-network carries the largest probability. Each axis contributes
    a weight that decays linearly from its intensity knob down to 1;
    degenerate axes (a single width or a single depth) contribute a
    constant factor.
    """
    if not 0 <= i <= grid.m:
        raise ValueError(f"width index {i} outside 0..{grid.m}")
    if not 0 <= j <= grid.n:
        raise ValueError(f"depth index {j} outside 0..{grid.n}")
    ws = _axis_weights(cfg.s_w, grid.m)
    hs = _axis_weights(cfg.s_d, grid.n)
    return float(ws[i] * hs[j] / (ws.sum() * hs.sum()))


def _axis_weights(intensity: float, last: int) -> np.ndarray:
    if last == 0:
        return np.ones(1)
    idx = np.arange(last + 1)
    return (intensity - 1.0) * (last - idx) / last + 1.0


class SubnetSampler:
    """Stateful id stream over a grid, seeded and reproducible."""

    def __init__(self, cfg: SamplerConfig, grid: ElasticGrid):
        self.cfg = cfg
        self.grid = grid
        self.rng = np.random.default_rng(cfg.seed)
        # Size-ordered flat cells: index = i * (n + 1) + j with i, j in size order.
        self._cells = [(i, j) for i in range(grid.m + 1) for j in range(grid.n + 1)]
        if cfg.mode == "probabilistic":
            ws = _axis_weights(cfg.s_w, grid.m)
            hs = _axis_weights(cfg.s_d, grid.n)
            flat = np.outer(ws, hs).reshape(-1)
            self._p = flat / flat.sum()
        else:
            self._order = self.rng.permutation(len(self._cells))
            self._pos = 0

    def next(self) -> SubNetId:
        if self.cfg.mode == "probabilistic":
            k = int(self.rng.choice(len(self._cells), p=self._p))
        else:
            if self._pos == len(self._order):
                self._order = self.rng.permutation(len(self._cells))
                self._pos = 0
            k = int(self._order[self._pos])
            self._pos += 1
        i_small, j_small = self._cells[k]
        # Size order -> lattice order (0 = full network).
        return SubNetId(self.grid.m - i_small, self.grid.n - j_small)


def next_subnet(sampler: SubnetSampler) -> SubNetId:
    return sampler.next()
