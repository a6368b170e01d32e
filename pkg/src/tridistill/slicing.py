"""Parameter store, slicing rules, and sub-network views.

A `ParamStore` owns the full network's tensors (backbone plus heads).
A `SubNetView` is a zero-copy window onto a store: per parameter it
records which prefix to take and which scalar to multiply by, and it
builds those slice/scale graph nodes on demand. Because a view slices
the store's own leaf tensors, gradients computed through a view land in
the full network's buffers, which is exactly what lets the narrow
branch train the shared weights.

Slicing rules per submodule (width d_i out of d_max, alpha = d_max/d_i):

* attention: per-head q/k/v weights keep the first (active) heads and
  the first d_i input columns, scaled by alpha; their biases keep the
  active heads unscaled. The output projection takes its leading
  d_i x d_i block scaled by alpha, bias truncated unscaled.
* mlp: fc1 takes (ratio*d_i, d_i) scaled, fc2 takes (d_i, ratio*d_i)
  scaled; biases truncate unscaled.
* layer norms, patch/positional embeddings and the class token truncate
  without scaling.
* swin transitions: expand takes (4*d_i, d_i) and the merge projection
  (2*d_i, 4*d_i), both scaled.
* resnet bottlenecks: conv1 truncates output channels unscaled, conv2
  takes its leading channel block scaled, conv3 truncates input
  channels scaled. Block outputs keep full width.
* heads: only the first layer's input columns are sliced (scaled); all
  later head layers are the very same tensors as the full network's.

Depth elasticity never slices tensors; it selects which blocks run.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, replace

import numpy as np

from . import kernel as K
from .backbones import (
    BackboneSpec,
    NetGeometry,
    check_grid,
    full_geometry,
    init_arrays,
    param_shapes,
    sub_geometry,
)
from .grids import ElasticGrid, SubNetId
from .heads import HeadsConfig, head_init_arrays, head_param_shapes


@dataclass(frozen=True)
class SliceRule:
    """How one parameter maps into a sub-network: index, then scale."""

    key: tuple | None  # None means the identity (hand back the leaf itself)
    alpha: float = 1.0


IDENTITY = SliceRule(None, 1.0)


class ParamStore:
    """Named parameter tensors of one full network, backbone plus heads."""

    def __init__(self, spec: BackboneSpec, heads_cfg: HeadsConfig, tensors: dict[str, K.Tensor]):
        if heads_cfg.in_dim != spec.pooled_dim():
            raise ValueError(
                f"heads expect input width {heads_cfg.in_dim} but the backbone pools to {spec.pooled_dim()}"
            )
        self.spec = spec
        self.heads_cfg = heads_cfg
        self.tensors = tensors
        self._net = full_geometry(spec)

    @classmethod
    def initialize(
        cls,
        spec: BackboneSpec,
        heads_cfg: HeadsConfig,
        seed: int = 0,
        dtype=np.float32,
        trainable: bool = True,
    ) -> "ParamStore":
        rng = np.random.default_rng(seed)
        arrays = init_arrays(spec, rng, dtype=dtype)
        arrays.update(head_init_arrays(heads_cfg, rng, dtype=dtype))
        tensors = {name: K.Tensor(arr, requires_grad=trainable) for name, arr in arrays.items()}
        return cls(spec, heads_cfg, tensors)

    def get(self, name: str) -> K.Tensor:
        return self.tensors[name]

    @property
    def net(self) -> NetGeometry:
        return self._net

    def names(self) -> list[str]:
        return list(self.tensors)

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def clone(self, trainable: bool = False) -> "ParamStore":
        tensors = {n: K.Tensor(t.data.copy(), requires_grad=trainable) for n, t in self.tensors.items()}
        return ParamStore(self.spec, self.heads_cfg, tensors)


# -- per-submodule rules -------------------------------------------------------


def slice_msa(prefix: str, heads: int, d_i: int, d_max: int) -> dict[str, SliceRule]:
    if d_i == d_max:
        return {}
    alpha = d_max / d_i
    rules: dict[str, SliceRule] = {}
    for part in ("q", "k", "v"):
        rules[f"{prefix}.msa.{part}.weight"] = SliceRule(
            (slice(0, heads), slice(None), slice(0, d_i)), alpha
        )
        rules[f"{prefix}.msa.{part}.bias"] = SliceRule((slice(0, heads), slice(None)), 1.0)
    rules[f"{prefix}.msa.out.weight"] = SliceRule((slice(0, d_i), slice(0, d_i)), alpha)
    rules[f"{prefix}.msa.out.bias"] = SliceRule((slice(0, d_i),), 1.0)
    return rules


def slice_mlp(prefix: str, d_i: int, d_max: int, ratio: int) -> dict[str, SliceRule]:
    if d_i == d_max:
        return {}
    alpha = d_max / d_i
    return {
        f"{prefix}.mlp.fc1.weight": SliceRule((slice(0, ratio * d_i), slice(0, d_i)), alpha),
        f"{prefix}.mlp.fc1.bias": SliceRule((slice(0, ratio * d_i),), 1.0),
        f"{prefix}.mlp.fc2.weight": SliceRule((slice(0, d_i), slice(0, ratio * d_i)), alpha),
        f"{prefix}.mlp.fc2.bias": SliceRule((slice(0, d_i),), 1.0),
    }


def slice_ln(name_base: str, d_i: int, d_max: int) -> dict[str, SliceRule]:
    if d_i == d_max:
        return {}
    return {
        f"{name_base}.weight": SliceRule((slice(0, d_i),), 1.0),
        f"{name_base}.bias": SliceRule((slice(0, d_i),), 1.0),
    }


def slice_swin_transition(prefix: str, w_i: int, w_max: int) -> dict[str, SliceRule]:
    if w_i == w_max:
        return {}
    alpha = w_max / w_i
    return {
        f"{prefix}.expand.weight": SliceRule((slice(0, 4 * w_i), slice(0, w_i)), alpha),
        f"{prefix}.expand.bias": SliceRule((slice(0, 4 * w_i),), 1.0),
        f"{prefix}.pm.weight": SliceRule((slice(0, 2 * w_i), slice(0, 4 * w_i)), alpha),
        f"{prefix}.pm.bias": SliceRule((slice(0, 2 * w_i),), 1.0),
    }


def slice_resnet_block(prefix: str, mid_i: int, mid_max: int) -> dict[str, SliceRule]:
    if mid_i == mid_max:
        return {}
    alpha = mid_max / mid_i
    rules = {
        f"{prefix}.conv1.weight": SliceRule((slice(0, mid_i),), 1.0),
        f"{prefix}.conv2.weight": SliceRule((slice(0, mid_i), slice(0, mid_i)), alpha),
        f"{prefix}.conv3.weight": SliceRule((slice(None), slice(0, mid_i)), alpha),
    }
    rules.update(slice_ln(f"{prefix}.ln1", mid_i, mid_max))
    rules.update(slice_ln(f"{prefix}.ln2", mid_i, mid_max))
    return rules


def slice_head_first_layer(h: int, d_i: int, d_max: int) -> dict[str, SliceRule]:
    if d_i == d_max:
        return {}
    alpha = d_max / d_i
    return {f"head{h}.fc1.weight": SliceRule((slice(None), slice(0, d_i)), alpha)}


def slice_embed(family: str, d_i: int, d_max: int) -> dict[str, SliceRule]:
    if d_i == d_max:
        return {}
    rules = {
        f"{family}.embed.patch.weight": SliceRule((slice(0, d_i), slice(None)), 1.0),
        f"{family}.embed.patch.bias": SliceRule((slice(0, d_i),), 1.0),
        f"{family}.embed.pos.weight": SliceRule((slice(None), slice(None), slice(0, d_i)), 1.0),
    }
    if family == "vit":
        rules["vit.embed.cls.weight"] = SliceRule((slice(None), slice(None), slice(0, d_i)), 1.0)
    return rules


# -- whole-network plans --------------------------------------------------------


def slicing_plan(
    spec: BackboneSpec, heads_cfg: HeadsConfig, grid: ElasticGrid, sid: SubNetId
) -> tuple[NetGeometry, dict[str, SliceRule]]:
    """Geometry plus a rule for every parameter the sub-network uses."""
    geo = sub_geometry(spec, grid, sid)
    d_max = spec.d_max
    rules: dict[str, SliceRule] = {}
    if spec.family == "vit":
        rules.update(slice_embed("vit", geo.width, d_max))
        for k in geo.stage_blocks[0]:
            prefix = f"vit.b{k}"
            rules.update(slice_ln(f"{prefix}.ln1", geo.width, d_max))
            rules.update(slice_ln(f"{prefix}.ln2", geo.width, d_max))
            rules.update(slice_msa(prefix, geo.heads, geo.width, d_max))
            rules.update(slice_mlp(prefix, geo.width, d_max, spec.mlp_ratio))
        rules.update(slice_ln("vit.final_ln", geo.width, d_max))
    elif spec.family == "swin":
        rules.update(slice_embed("swin", geo.width, d_max))
        for s in range(spec.num_stages):
            w_i, w_full = geo.width << s, d_max << s
            heads_i = geo.heads << s
            for k in geo.stage_blocks[s]:
                prefix = f"swin.s{s}.b{k}"
                rules.update(slice_ln(f"{prefix}.ln1", w_i, w_full))
                rules.update(slice_ln(f"{prefix}.ln2", w_i, w_full))
                rules.update(slice_msa(prefix, heads_i, w_i, w_full))
                rules.update(slice_mlp(prefix, w_i, w_full, spec.mlp_ratio))
            if s < spec.num_stages - 1:
                rules.update(slice_swin_transition(f"swin.s{s}", w_i, w_full))
        w_last = geo.width << (spec.num_stages - 1)
        rules.update(slice_ln("swin.final_ln", w_last, d_max << (spec.num_stages - 1)))
    else:
        for s in range(spec.num_stages):
            mid_i, mid_full = geo.width << s, d_max << s
            for k in geo.stage_blocks[s]:
                rules.update(slice_resnet_block(f"resnet.s{s}.b{k}", mid_i, mid_full))
    pooled_full = spec.pooled_dim()
    for h in range(heads_cfg.count):
        rules.update(slice_head_first_layer(h, geo.pooled_dim, pooled_full))

    plan: dict[str, SliceRule] = {}
    for name in _active_names(spec, heads_cfg, geo):
        plan[name] = rules.get(name, IDENTITY)
    return geo, plan


def _active_names(spec: BackboneSpec, heads_cfg: HeadsConfig, geo: NetGeometry) -> list[str]:
    """All parameter names a forward pass with this geometry touches."""
    active: list[str] = []
    block_re = re.compile(r"^(?:\w+)\.(?:s(\d+)\.)?b(\d+)\.")
    keep: set[tuple[int, int]] = set()
    for s, blocks in enumerate(geo.stage_blocks):
        for k in blocks:
            keep.add((s, k))
    all_names = list(param_shapes(spec)) + list(head_param_shapes(heads_cfg))
    for name in all_names:
        m = block_re.match(name)
        if m:
            s = int(m.group(1)) if m.group(1) is not None else 0
            if (s, int(m.group(2))) not in keep:
                continue
        active.append(name)
    return active


class SubNetView:
    """A sliced window onto a store; shares storage with the full net."""

    def __init__(self, store: ParamStore, sid: SubNetId, geo: NetGeometry, plan: dict[str, SliceRule]):
        self.store = store
        self.sid = sid
        self.plan = plan
        self._net = geo

    @property
    def spec(self) -> BackboneSpec:
        return self.store.spec

    @property
    def net(self) -> NetGeometry:
        return self._net

    def get(self, name: str) -> K.Tensor:
        rule = self.plan.get(name)
        if rule is None:
            raise KeyError(f"{name} is not part of this sub-network")
        leaf = self.store.tensors[name]
        if rule.key is None:
            return leaf
        out = K.slice_(leaf, rule.key)
        if rule.alpha != 1.0:
            out = K.scale(out, rule.alpha)
        return out


def materialize(store: ParamStore, grid: ElasticGrid, sid: SubNetId) -> SubNetView:
    """Build the zero-copy view of one lattice cell."""
    geo, plan = slicing_plan(store.spec, store.heads_cfg, grid, sid)
    return SubNetView(store, sid, geo, plan)


# -- standalone extraction -------------------------------------------------------


def subnet_spec(spec: BackboneSpec, grid: ElasticGrid, sid: SubNetId) -> BackboneSpec:
    """The architecture of the standalone network at one lattice cell."""
    geo = sub_geometry(spec, grid, sid)
    heads = geo.heads
    if spec.family == "vit":
        return replace(spec, n_h=heads, l_max=len(geo.stage_blocks[0]))
    counts = tuple(len(b) for b in geo.stage_blocks)
    if spec.family == "swin":
        return replace(spec, n_h=heads, stage_blocks=counts, l_max=sum(counts))
    return replace(
        spec, n_h=heads, stage_blocks=counts, l_max=sum(counts), base_channels=spec.resnet_base
    )


def _source_name(sub_name: str, geo: NetGeometry) -> str:
    """Map a renumbered standalone parameter name back to the store's name."""
    m = re.match(r"^(\w+)\.(?:s(\d+)\.)?b(\d+)\.(.+)$", sub_name)
    if not m:
        return sub_name
    family, stage, new_idx, rest = m.group(1), m.group(2), int(m.group(3)), m.group(4)
    s = int(stage) if stage is not None else 0
    orig = geo.stage_blocks[s][new_idx]
    if stage is None:
        return f"{family}.b{orig}.{rest}"
    return f"{family}.s{stage}.b{orig}.{rest}"


def extract_arrays(
    store: ParamStore, grid: ElasticGrid, sid: SubNetId
) -> tuple[BackboneSpec, HeadsConfig, dict[str, np.ndarray]]:
    """Deep-copy one sub-network with its scale factors baked in.

    Unlike a view this allocates fresh buffers and renumbers blocks
    contiguously, so the result is an ordinary standalone network.
    """
    geo, plan = slicing_plan(store.spec, store.heads_cfg, grid, sid)
    sspec = subnet_spec(store.spec, grid, sid)
    sheads = replace(store.heads_cfg, in_dim=geo.pooled_dim)
    expected = dict(param_shapes(sspec))
    expected.update(head_param_shapes(sheads))
    out: dict[str, np.ndarray] = {}
    for sub_name, shape in expected.items():
        src = _source_name(sub_name, geo)
        rule = plan[src]
        arr = store.tensors[src].data
        if rule.key is not None:
            arr = arr[rule.key]
        arr = arr.copy()
        if rule.alpha != 1.0:
            # Same-precision multiply, bit-identical to the view's scale op.
            arr *= arr.dtype.type(rule.alpha)
        if arr.shape != shape:
            raise AssertionError(f"{sub_name}: sliced shape {arr.shape} != expected {shape}")
        out[sub_name] = arr
    return sspec, sheads, out


def standalone_store(
    store: ParamStore, grid: ElasticGrid, sid: SubNetId, trainable: bool = False
) -> ParamStore:
    """Extracted sub-network wrapped back up as a plain full store."""
    sspec, sheads, arrays = extract_arrays(store, grid, sid)
    tensors = {n: K.Tensor(a, requires_grad=trainable) for n, a in arrays.items()}
    return ParamStore(sspec, sheads, tensors)
