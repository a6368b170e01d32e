"""Toy encoder families sized for quick CPU runs.

Three families share one parameter-naming scheme
(`{family}.{stage?}.{block}.{submodule}.{weight|bias}`) and one calling
convention: `forward(spec, params, images)` where `params` is anything
with a `get(name) -> Tensor` method and a `net` geometry attribute. The
same forward code therefore serves the full network, a sliced view of
it, and a standalone extracted copy.

Family notes:

* vit: pre-norm transformer on patch tokens with a class token. Q/K/V
  weights are stored per head, shape (heads, d_h, width), so a narrower
  network is literally a prefix of heads.
* swin: windowed attention in stages whose width doubles at each
  transition. A transition expands tokens to 4x width, mean-pools 2x2
  spatially, then projects 4x back down to 2x.
* resnet: bottleneck blocks (1x1, 3x3, 1x1 convolutions with channel
  layer norm). Only the middle channels are elastic, block outputs stay
  at full width.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import kernel as K
from .grids import ElasticGrid, SubNetId, block_ids

FAMILIES = ("vit", "swin", "resnet")


@dataclass(frozen=True)
class BackboneSpec:
    """Static architecture description of one full network."""

    family: str
    image_size: int
    patch_size: int = 4
    d_h: int = 8
    n_h: int = 4
    l_max: int = 4
    mlp_ratio: int = 4
    drop_path: float = 0.0
    stage_blocks: tuple[int, ...] | None = None
    window: int = 4
    stem_channels: int = 8
    expansion: int = 4
    base_channels: int = 0  # resnet block-output base; 0 means n_h * d_h
    in_channels: int = 3

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}, expected one of {FAMILIES}")
        if self.stage_blocks is not None:
            object.__setattr__(self, "stage_blocks", tuple(int(b) for b in self.stage_blocks))
        if self.d_h < 1 or self.n_h < 1:
            raise ValueError("d_h and n_h must be positive")
        if not 0.0 <= self.drop_path < 1.0:
            raise ValueError(f"drop_path must be in [0, 1), got {self.drop_path}")
        if self.family == "vit":
            if self.stage_blocks is not None:
                raise ValueError("vit takes no stage_blocks")
            if self.l_max < 2:
                raise ValueError("vit needs l_max >= 2")
            if self.image_size % self.patch_size:
                raise ValueError(f"image size {self.image_size} not divisible by patch {self.patch_size}")
        elif self.family == "swin":
            if self.stage_blocks is None or len(self.stage_blocks) < 3:
                raise ValueError("swin needs stage_blocks with at least 3 stages")
            if min(self.stage_blocks) < 1:
                raise ValueError("swin stage_blocks must be positive")
            if self.stage_blocks[2] < 2:
                raise ValueError("swin stage 3 must have at least 2 blocks (it is the depth-elastic one)")
            if self.l_max != sum(self.stage_blocks):
                raise ValueError(f"l_max {self.l_max} must equal total blocks {sum(self.stage_blocks)}")
            grid0 = self.image_size // self.patch_size
            if self.image_size % self.patch_size or grid0 % (1 << (len(self.stage_blocks) - 1)):
                raise ValueError(
                    f"token grid {grid0} must be divisible by 2^{len(self.stage_blocks) - 1} for the stage transitions"
                )
        else:
            if self.stage_blocks is None or len(self.stage_blocks) != 4:
                raise ValueError("resnet needs exactly 4 stage_blocks")
            if min(self.stage_blocks) < 1:
                raise ValueError("resnet stage_blocks must be positive")
            if self.stage_blocks[1] < 2 or self.stage_blocks[2] < 2:
                raise ValueError("resnet stages 2 and 3 (the depth-elastic ones) need at least 2 blocks")
            if self.l_max != sum(self.stage_blocks):
                raise ValueError(f"l_max {self.l_max} must equal total blocks {sum(self.stage_blocks)}")

    @property
    def d_max(self) -> int:
        return self.n_h * self.d_h

    @property
    def num_stages(self) -> int:
        return 1 if self.stage_blocks is None else len(self.stage_blocks)

    @property
    def resnet_base(self) -> int:
        return self.base_channels if self.base_channels else self.d_max

    def stage_width(self, stage: int, base: int | None = None) -> int:
        """Width of a stage given a (possibly reduced) base width."""
        if base is None:
            base = self.d_max
        return base << stage

    def resnet_out(self, stage: int) -> int:
        """Block output channels per stage; independent of elastic width."""
        return self.expansion * (self.resnet_base << stage)

    def pooled_dim(self, base: int | None = None) -> int:
        if base is None:
            base = self.d_max
        if self.family == "vit":
            return base
        if self.family == "swin":
            return base << (self.num_stages - 1)
        return self.resnet_out(self.num_stages - 1)


@dataclass(frozen=True)
class NetGeometry:
    """Which parts of the full network a forward pass actually runs."""

    width: int  # active base width (stage-1 width for staged families)
    heads: int  # active head count at the base stage
    stage_blocks: tuple[tuple[int, ...], ...]  # active block ids per stage
    pooled_dim: int


def full_geometry(spec: BackboneSpec) -> NetGeometry:
    if spec.family == "vit":
        blocks = (tuple(range(spec.l_max)),)
    else:
        blocks = tuple(tuple(range(b)) for b in spec.stage_blocks)
    return NetGeometry(spec.d_max, spec.n_h, blocks, spec.pooled_dim())


def check_grid(spec: BackboneSpec, grid: ElasticGrid) -> None:
    """Reject grids that do not describe sub-networks of this spec."""
    if grid.d_h != spec.d_h or grid.n_h != spec.n_h:
        raise ValueError(
            f"grid width lattice (d_h={grid.d_h}, n_h={grid.n_h}) does not match "
            f"spec (d_h={spec.d_h}, n_h={spec.n_h})"
        )
    if grid.l_max != spec.l_max:
        raise ValueError(f"grid l_max {grid.l_max} does not match spec total depth {spec.l_max}")
    if spec.family == "resnet":
        if grid.stage_depths is None:
            raise ValueError("resnet grids need an explicit stage_depths table")
        for entry in grid.stage_depths:
            if len(entry) != 2:
                raise ValueError(f"resnet stage_depths entries must be (n2, n3), got {entry}")
            n2, n3 = entry
            if not (2 <= n2 <= spec.stage_blocks[1] and 2 <= n3 <= spec.stage_blocks[2]):
                raise ValueError(
                    f"stage depths {entry} outside the allowed 2..{spec.stage_blocks[1]} x "
                    f"2..{spec.stage_blocks[2]} box"
                )
    else:
        if grid.stage_depths is not None:
            raise ValueError(f"{spec.family} grids take no stage_depths table")
        if spec.family == "swin" and grid.n > spec.stage_blocks[2] - 2:
            raise ValueError(
                f"grid depth range n={grid.n} would shrink stage 3 below 2 of its "
                f"{spec.stage_blocks[2]} blocks"
            )


def sub_geometry(spec: BackboneSpec, grid: ElasticGrid, sid: SubNetId) -> NetGeometry:
    """Active widths and block ids for one lattice cell."""
    check_grid(spec, grid)
    if not (0 <= sid.i <= grid.m and 0 <= sid.j <= grid.n):
        raise ValueError(f"{sid} outside grid (m={grid.m}, n={grid.n})")
    heads = spec.n_h - sid.i
    width = heads * spec.d_h
    if spec.family == "vit":
        blocks = (tuple(block_ids(spec.l_max, spec.l_max - sid.j)),)
    elif spec.family == "swin":
        blocks = []
        for s, count in enumerate(spec.stage_blocks):
            if s == 2:
                blocks.append(tuple(block_ids(count, count - sid.j)))
            else:
                blocks.append(tuple(range(count)))
        blocks = tuple(blocks)
    else:
        n2, n3 = grid.stage_depths[sid.j]
        blocks = (
            tuple(range(spec.stage_blocks[0])),
            tuple(block_ids(spec.stage_blocks[1], n2)),
            tuple(block_ids(spec.stage_blocks[2], n3)),
            tuple(range(spec.stage_blocks[3])),
        )
    return NetGeometry(width, heads, blocks, spec.pooled_dim(width))


# -- parameter tables ------------------------------------------------------------


def _attention_shapes(prefix: str, heads: int, d_h: int, width: int, ratio: int) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}
    shapes[f"{prefix}.ln1.weight"] = (width,)
    shapes[f"{prefix}.ln1.bias"] = (width,)
    for part in ("q", "k", "v"):
        shapes[f"{prefix}.msa.{part}.weight"] = (heads, d_h, width)
        shapes[f"{prefix}.msa.{part}.bias"] = (heads, d_h)
    shapes[f"{prefix}.msa.out.weight"] = (width, width)
    shapes[f"{prefix}.msa.out.bias"] = (width,)
    shapes[f"{prefix}.ln2.weight"] = (width,)
    shapes[f"{prefix}.ln2.bias"] = (width,)
    shapes[f"{prefix}.mlp.fc1.weight"] = (ratio * width, width)
    shapes[f"{prefix}.mlp.fc1.bias"] = (ratio * width,)
    shapes[f"{prefix}.mlp.fc2.weight"] = (width, ratio * width)
    shapes[f"{prefix}.mlp.fc2.bias"] = (width,)
    return shapes


def param_shapes(spec: BackboneSpec) -> dict[str, tuple[int, ...]]:
    """Every backbone parameter name with its full-network shape."""
    d = spec.d_max
    c = spec.in_channels
    shapes: dict[str, tuple[int, ...]] = {}
    if spec.family == "vit":
        tokens = (spec.image_size // spec.patch_size) ** 2
        shapes["vit.embed.patch.weight"] = (d, c * spec.patch_size**2)
        shapes["vit.embed.patch.bias"] = (d,)
        shapes["vit.embed.cls.weight"] = (1, 1, d)
        shapes["vit.embed.pos.weight"] = (1, tokens + 1, d)
        for k in range(spec.l_max):
            shapes.update(_attention_shapes(f"vit.b{k}", spec.n_h, spec.d_h, d, spec.mlp_ratio))
        shapes["vit.final_ln.weight"] = (d,)
        shapes["vit.final_ln.bias"] = (d,)
    elif spec.family == "swin":
        tokens = (spec.image_size // spec.patch_size) ** 2
        shapes["swin.embed.patch.weight"] = (d, c * spec.patch_size**2)
        shapes["swin.embed.patch.bias"] = (d,)
        shapes["swin.embed.pos.weight"] = (1, tokens, d)
        for s, count in enumerate(spec.stage_blocks):
            w = spec.stage_width(s)
            heads = spec.n_h << s
            for k in range(count):
                shapes.update(_attention_shapes(f"swin.s{s}.b{k}", heads, spec.d_h, w, spec.mlp_ratio))
            if s < spec.num_stages - 1:
                shapes[f"swin.s{s}.expand.weight"] = (4 * w, w)
                shapes[f"swin.s{s}.expand.bias"] = (4 * w,)
                shapes[f"swin.s{s}.pm.weight"] = (2 * w, 4 * w)
                shapes[f"swin.s{s}.pm.bias"] = (2 * w,)
        wf = spec.stage_width(spec.num_stages - 1)
        shapes["swin.final_ln.weight"] = (wf,)
        shapes["swin.final_ln.bias"] = (wf,)
    else:
        shapes["resnet.stem.conv.weight"] = (spec.stem_channels, c, 3, 3)
        shapes["resnet.stem.ln.weight"] = (spec.stem_channels,)
        shapes["resnet.stem.ln.bias"] = (spec.stem_channels,)
        in_ch = spec.stem_channels
        for s, count in enumerate(spec.stage_blocks):
            mid = spec.stage_width(s)
            out = spec.resnet_out(s)
            for k in range(count):
                block_in = in_ch if k == 0 else out
                prefix = f"resnet.s{s}.b{k}"
                shapes[f"{prefix}.conv1.weight"] = (mid, block_in, 1, 1)
                shapes[f"{prefix}.ln1.weight"] = (mid,)
                shapes[f"{prefix}.ln1.bias"] = (mid,)
                shapes[f"{prefix}.conv2.weight"] = (mid, mid, 3, 3)
                shapes[f"{prefix}.ln2.weight"] = (mid,)
                shapes[f"{prefix}.ln2.bias"] = (mid,)
                shapes[f"{prefix}.conv3.weight"] = (out, mid, 1, 1)
                shapes[f"{prefix}.ln3.weight"] = (out,)
                shapes[f"{prefix}.ln3.bias"] = (out,)
                if k == 0:
                    shapes[f"{prefix}.down.weight"] = (out, block_in, 1, 1)
            in_ch = out
        shapes["resnet.final_ln.weight"] = (in_ch,)
        shapes["resnet.final_ln.bias"] = (in_ch,)
    return shapes


def init_arrays(spec: BackboneSpec, rng: np.random.Generator, dtype=np.float32) -> dict[str, np.ndarray]:
    """Initial parameter values keyed by name, in a deterministic order."""
    arrays: dict[str, np.ndarray] = {}
    for name, shape in param_shapes(spec).items():
        arrays[name] = _init_one(name, shape, rng).astype(dtype)
    return arrays


def _init_one(name: str, shape: tuple[int, ...], rng: np.random.Generator) -> np.ndarray:
    leaf = name.rsplit(".", 2)[-2]  # submodule label
    if name.endswith(".bias"):
        return np.zeros(shape)
    if leaf in ("ln1", "ln2", "ln3", "final_ln", "ln"):
        return np.ones(shape)
    if leaf in ("conv1", "conv2", "conv3", "down", "conv"):
        fan_in = int(np.prod(shape[1:]))
        return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)
    # Linear / embedding weights and tokens.
    return rng.normal(0.0, 0.02, size=shape)


# -- shared building blocks --------------------------------------------------------


def drop_path(x: K.Tensor, rate: float, training: bool, rng: np.random.Generator | None = None) -> K.Tensor:
    """Drop whole residual branches per sample, rescaling survivors.

    Identity when not training or when the rate is zero.
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"drop rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("training-mode drop_path needs an rng")
    keep = 1.0 - rate
    shape = (x.shape[0],) + (1,) * (x.ndim - 1)
    mask = (rng.random(shape) < keep).astype(x.data.dtype) / keep
    return K.mul(x, K.constant(mask, dtype=x.dtype))


def _linear(x: K.Tensor, w: K.Tensor, b: K.Tensor | None = None) -> K.Tensor:
    out = K.matmul(x, K.transpose(w, (1, 0)))
    if b is not None:
        out = K.add(out, b)
    return out


def _attention(params, prefix: str, x: K.Tensor, heads: int, d_h: int) -> K.Tensor:
    b, t, width = x.shape
    xe = K.reshape(x, (b, 1, t, width))
    parts = []
    for part in ("q", "k", "v"):
        w = params.get(f"{prefix}.msa.{part}.weight")  # (heads, d_h, width)
        bias = params.get(f"{prefix}.msa.{part}.bias")
        proj = K.matmul(xe, K.transpose(w, (0, 2, 1)))  # (b, heads, t, d_h)
        proj = K.add(proj, K.reshape(bias, (heads, 1, d_h)))
        parts.append(proj)
    q, k, v = parts
    att = K.scale(K.matmul(q, K.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(d_h))
    att = K.softmax(att)
    o = K.matmul(att, v)  # (b, heads, t, d_h)
    o = K.reshape(K.transpose(o, (0, 2, 1, 3)), (b, t, heads * d_h))
    return _linear(o, params.get(f"{prefix}.msa.out.weight"), params.get(f"{prefix}.msa.out.bias"))


def _block(params, prefix: str, x: K.Tensor, heads: int, d_h: int, rate: float, training: bool, rng) -> K.Tensor:
    h = K.layer_norm(x, params.get(f"{prefix}.ln1.weight"), params.get(f"{prefix}.ln1.bias"))
    x = K.add(x, drop_path(_attention(params, prefix, h, heads, d_h), rate, training, rng))
    h = K.layer_norm(x, params.get(f"{prefix}.ln2.weight"), params.get(f"{prefix}.ln2.bias"))
    h = _linear(h, params.get(f"{prefix}.mlp.fc1.weight"), params.get(f"{prefix}.mlp.fc1.bias"))
    h = K.gelu(h)
    h = _linear(h, params.get(f"{prefix}.mlp.fc2.weight"), params.get(f"{prefix}.mlp.fc2.bias"))
    return K.add(x, drop_path(h, rate, training, rng))


@lru_cache(maxsize=64)
def _bilinear_matrix(src: int, dst: int) -> np.ndarray:
    """(dst^2, src^2) matrix resampling a src x src grid to dst x dst."""
    m = np.zeros((dst * dst, src * src))
    scale = src / dst
    for oy in range(dst):
        sy = min(max((oy + 0.5) * scale - 0.5, 0.0), src - 1.0)
        y0 = int(math.floor(sy))
        wy = sy - y0
        y1 = min(y0 + 1, src - 1)
        for ox in range(dst):
            sx = min(max((ox + 0.5) * scale - 0.5, 0.0), src - 1.0)
            x0 = int(math.floor(sx))
            wx = sx - x0
            x1 = min(x0 + 1, src - 1)
            row = oy * dst + ox
            m[row, y0 * src + x0] += (1 - wy) * (1 - wx)
            m[row, y0 * src + x1] += (1 - wy) * wx
            m[row, y1 * src + x0] += wy * (1 - wx)
            m[row, y1 * src + x1] += wy * wx
    return m


def _patchify(images: K.Tensor, patch: int) -> K.Tensor:
    b, c, h, w = images.shape
    if h % patch or w % patch:
        raise ValueError(f"image {h}x{w} not divisible by patch {patch}")
    gh, gw = h // patch, w // patch
    x = K.reshape(images, (b, c, gh, patch, gw, patch))
    x = K.transpose(x, (0, 2, 4, 1, 3, 5))
    return K.reshape(x, (b, gh * gw, c * patch * patch))


def _interp_pos(pos: K.Tensor, src: int, dst: int, width: int, lead: int) -> K.Tensor:
    """Resample a flattened positional grid, keeping `lead` leading tokens."""
    if src == dst:
        return pos
    parts = []
    if lead:
        parts.append(K.slice_(pos, (slice(None), slice(0, lead), slice(None))))
    grid = K.reshape(K.slice_(pos, (slice(None), slice(lead, None), slice(None))), (src * src, width))
    mat = K.constant(_bilinear_matrix(src, dst), dtype=pos.dtype)
    resampled = K.reshape(K.matmul(mat, grid), (1, dst * dst, width))
    parts.append(resampled)
    return K.concat(parts, axis=1) if len(parts) > 1 else parts[0]


# -- family forwards ---------------------------------------------------------------


def forward(spec: BackboneSpec, params, images, training: bool = False, rng: np.random.Generator | None = None):
    """Run the backbone. Returns (tokens, pooled) feature tensors.

    `images` is a (B, C, H, W) array or tensor in [0, 1]. H and W may
    differ from spec.image_size (local crops); positional grids are
    resampled bilinearly. `pooled` is the class token for vit and the
    global average for the staged families.
    """
    if not isinstance(images, K.Tensor):
        images = K.constant(images)
    if images.ndim != 4:
        raise ValueError(f"images must be (B, C, H, W), got shape {images.shape}")
    geo: NetGeometry = params.net
    if spec.family == "vit":
        return _forward_vit(spec, params, geo, images, training, rng)
    if spec.family == "swin":
        return _forward_swin(spec, params, geo, images, training, rng)
    return _forward_resnet(spec, params, geo, images, training, rng)


def _forward_vit(spec, params, geo, images, training, rng):
    b = images.shape[0]
    d = geo.width
    x = _patchify(images, spec.patch_size)
    x = _linear(x, params.get("vit.embed.patch.weight"), params.get("vit.embed.patch.bias"))
    cls = K.broadcast_to(params.get("vit.embed.cls.weight"), (b, 1, d))
    x = K.concat([cls, x], axis=1)
    src = spec.image_size // spec.patch_size
    dst = images.shape[2] // spec.patch_size
    pos = _interp_pos(params.get("vit.embed.pos.weight"), src, dst, d, lead=1)
    x = K.add(x, pos)
    for k in geo.stage_blocks[0]:
        x = _block(params, f"vit.b{k}", x, geo.heads, spec.d_h, spec.drop_path, training, rng)
    tokens = K.layer_norm(x, params.get("vit.final_ln.weight"), params.get("vit.final_ln.bias"))
    pooled = K.slice_(tokens, (slice(None), 0, slice(None)))
    return tokens, pooled


def _window_split(x: K.Tensor, grid: int, win: int, width: int) -> K.Tensor:
    b = x.shape[0]
    n = grid // win
    x = K.reshape(x, (b, n, win, n, win, width))
    x = K.transpose(x, (0, 1, 3, 2, 4, 5))
    return K.reshape(x, (b * n * n, win * win, width))


def _window_join(x: K.Tensor, b: int, grid: int, win: int, width: int) -> K.Tensor:
    n = grid // win
    x = K.reshape(x, (b, n, n, win, win, width))
    x = K.transpose(x, (0, 1, 3, 2, 4, 5))
    return K.reshape(x, (b, grid * grid, width))


def _forward_swin(spec, params, geo, images, training, rng):
    b = images.shape[0]
    base = geo.width
    x = _patchify(images, spec.patch_size)
    x = _linear(x, params.get("swin.embed.patch.weight"), params.get("swin.embed.patch.bias"))
    src = spec.image_size // spec.patch_size
    grid = images.shape[2] // spec.patch_size
    x = K.add(x, _interp_pos(params.get("swin.embed.pos.weight"), src, grid, base, lead=0))
    for s in range(spec.num_stages):
        w = base << s
        heads = geo.heads << s
        win = min(spec.window, grid)
        if grid % win:
            raise ValueError(f"stage {s} grid {grid} not divisible by window {win}")
        for k in geo.stage_blocks[s]:
            xw = _window_split(x, grid, win, w)
            xw = _block(params, f"swin.s{s}.b{k}", xw, heads, spec.d_h, spec.drop_path, training, rng)
            x = _window_join(xw, b, grid, win, w)
        if s < spec.num_stages - 1:
            if grid % 2:
                raise ValueError(f"stage {s} grid {grid} is odd, cannot merge 2x2")
            x = _linear(x, params.get(f"swin.s{s}.expand.weight"), params.get(f"swin.s{s}.expand.bias"))
            half = grid // 2
            x = K.reshape(x, (b, half, 2, half, 2, 4 * w))
            x = K.mean(x, axis=(2, 4))
            x = K.reshape(x, (b, half * half, 4 * w))
            x = _linear(x, params.get(f"swin.s{s}.pm.weight"), params.get(f"swin.s{s}.pm.bias"))
            grid = half
    tokens = K.layer_norm(x, params.get("swin.final_ln.weight"), params.get("swin.final_ln.bias"))
    pooled = K.mean(tokens, axis=1)
    return tokens, pooled


def _conv(x: K.Tensor, w: K.Tensor, stride: int = 1, padding: int = 0) -> K.Tensor:
    """2D convolution on (B, C, H, W) via unfold + matmul, no bias."""
    out_ch = w.shape[0]
    k = w.shape[2]
    cols = K.unfold2d(pad2d_if(x, padding), k, stride)  # (B, OH, OW, C*k*k)
    flat = K.reshape(w, (out_ch, w.shape[1] * k * k))
    y = K.matmul(cols, K.transpose(flat, (1, 0)))  # (B, OH, OW, out)
    return K.transpose(y, (0, 3, 1, 2))


def pad2d_if(x: K.Tensor, padding: int) -> K.Tensor:
    return K.pad2d(x, padding) if padding else x


def _ln_channels(x: K.Tensor, w: K.Tensor, b: K.Tensor) -> K.Tensor:
    y = K.transpose(x, (0, 2, 3, 1))
    y = K.layer_norm(y, w, b)
    return K.transpose(y, (0, 3, 1, 2))


def _forward_resnet(spec, params, geo, images, training, rng):
    x = _conv(images, params.get("resnet.stem.conv.weight"), stride=1, padding=1)
    x = K.relu(_ln_channels(x, params.get("resnet.stem.ln.weight"), params.get("resnet.stem.ln.bias")))
    for s in range(spec.num_stages):
        for k in geo.stage_blocks[s]:
            prefix = f"resnet.s{s}.b{k}"
            stride = 2 if (s > 0 and k == 0) else 1
            if k == 0:
                identity = _conv(x, params.get(f"{prefix}.down.weight"), stride=stride)
            else:
                identity = x
            y = _conv(x, params.get(f"{prefix}.conv1.weight"))
            y = K.relu(_ln_channels(y, params.get(f"{prefix}.ln1.weight"), params.get(f"{prefix}.ln1.bias")))
            y = _conv(y, params.get(f"{prefix}.conv2.weight"), stride=stride, padding=1)
            y = K.relu(_ln_channels(y, params.get(f"{prefix}.ln2.weight"), params.get(f"{prefix}.ln2.bias")))
            y = _conv(y, params.get(f"{prefix}.conv3.weight"))
            y = _ln_channels(y, params.get(f"{prefix}.ln3.weight"), params.get(f"{prefix}.ln3.bias"))
            y = drop_path(y, spec.drop_path, training, rng)
            x = K.relu(K.add(y, identity))
    tokens = _ln_channels(x, params.get("resnet.final_ln.weight"), params.get("resnet.final_ln.bias"))
    pooled = K.mean(tokens, axis=(2, 3))  # (B, C)
    return tokens, pooled
