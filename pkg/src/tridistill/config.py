"""Plain-text run configuration.

INI sections mirror the component configs: [backbone], [grid],
[sampler], [heads], [loss], [sched], [aug], [data], [out]. Unknown
sections or keys are rejected by name so typos cannot silently fall
back to defaults; every validation error names the offending key.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass

from .augment import AugmentConfig
from .backbones import BackboneSpec, check_grid
from .grids import ElasticGrid, SamplerConfig
from .heads import HeadsConfig
from .schedules import SchedConfig


class ConfigError(ValueError):
    """A configuration file problem; the message names the key."""


@dataclass(frozen=True)
class RunConfig:
    spec: BackboneSpec
    grid: ElasticGrid
    heads: HeadsConfig
    sampler: SamplerConfig
    sched: SchedConfig
    aug: AugmentConfig
    lam: float = 0.8
    gamma: float = 0.1
    same_view: bool = True
    sk_iters: int = 3
    data_path: str | None = None
    out_dir: str | None = None
    ckpt_every: int = 0


def _to_int(text: str) -> int:
    return int(text.strip())


def _to_float(text: str) -> float:
    return float(text.strip())


def _to_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("true", "1", "yes", "on"):
        return True
    if t in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _to_str(text: str) -> str:
    return text.strip()


def _to_ints(text: str) -> tuple[int, ...]:
    return tuple(int(t) for t in text.replace(",", " ").split())


def _to_floats(text: str) -> tuple[float, ...]:
    return tuple(float(t) for t in text.replace(",", " ").split())


def _to_depth_pairs(text: str) -> tuple[tuple[int, int], ...]:
    """Whitespace-separated "n2-n3" tokens, possibly spanning lines."""
    pairs = []
    for token in text.split():
        left, sep, right = token.partition("-")
        if not sep:
            raise ValueError(f"depth entries look like n2-n3, got {token!r}")
        pairs.append((int(left), int(right)))
    return tuple(pairs)


# section -> key -> converter; None marks required keys with no default
_SCHEMA: dict[str, dict[str, object]] = {
    "backbone": {
        "family": _to_str,
        "image_size": _to_int,
        "patch_size": _to_int,
        "d_h": _to_int,
        "n_h": _to_int,
        "l_max": _to_int,
        "mlp_ratio": _to_int,
        "drop_path": _to_float,
        "stage_blocks": _to_ints,
        "window": _to_int,
        "stem_channels": _to_int,
        "expansion": _to_int,
        "base_channels": _to_int,
        "in_channels": _to_int,
    },
    "grid": {"m": _to_int, "n": _to_int, "stage_depths": _to_depth_pairs},
    "sampler": {"mode": _to_str, "s_w": _to_float, "s_d": _to_float, "seed": _to_int},
    "heads": {"hidden": _to_int, "bottleneck": _to_int, "prototypes": _to_ints},
    "loss": {"lambda": _to_float, "gamma": _to_float, "same_view": _to_bool, "sk_iters": _to_int},
    "sched": {
        "epochs": _to_int,
        "batch_size": _to_int,
        "max_steps": _to_int,
        "warmup_epochs": _to_float,
        "temp_warmup_epochs": _to_float,
        "lr_base": _to_float,
        "lr_final": _to_float,
        "wd_start": _to_float,
        "wd_end": _to_float,
        "student_temp": _to_float,
        "teacher_temp_start": _to_float,
        "teacher_temp_end": _to_float,
        "momentum_start": _to_float,
        "momentum_end": _to_float,
        "clip_norm": _to_float,
        "layerwise_decay": _to_float,
        "patch_embed_mult": _to_float,
        "freeze_proto_epochs": _to_int,
        "beta1": _to_float,
        "beta2": _to_float,
        "adam_eps": _to_float,
        "seed": _to_int,
        "dtype": _to_str,
    },
    "aug": {
        "local_crops": _to_int,
        "global_size": _to_int,
        "local_size": _to_int,
        "global_scale": _to_floats,
        "local_scale": _to_floats,
        "flip_prob": _to_float,
        "jitter_prob": _to_float,
        "brightness": _to_float,
        "contrast": _to_float,
        "saturation": _to_float,
        "hue": _to_float,
        "blur_probs": _to_floats,
        "blur_radius": _to_floats,
        "solarize_prob": _to_float,
        "solarize_threshold": _to_float,
    },
    "data": {"path": _to_str},
    "out": {"dir": _to_str, "ckpt_every": _to_int},
}

_REQUIRED = (("backbone", "family"), ("backbone", "image_size"))


def _read_section(parser: configparser.ConfigParser, section: str) -> dict:
    """Convert one section, rejecting unknown keys by name."""
    known = _SCHEMA[section]
    out: dict = {}
    if not parser.has_section(section):
        return out
    for key, raw in parser.items(section):
        conv = known.get(key)
        if conv is None:
            raise ConfigError(f"unknown key {section}.{key}")
        try:
            out[key] = conv(raw)
        except ValueError as e:
            raise ConfigError(f"bad value for {section}.{key}: {e}") from e
    return out


def _build(section: str, cls, values: dict, **extra):
    try:
        return cls(**values, **extra)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"[{section}] {e}") from e


def parse_config(text: str) -> RunConfig:
    parser = configparser.ConfigParser(
        interpolation=None, inline_comment_prefixes=("#",), empty_lines_in_values=False
    )
    try:
        parser.read_string(text)
    except configparser.Error as e:
        raise ConfigError(str(e)) from e
    for section in parser.sections():
        if section not in _SCHEMA:
            raise ConfigError(f"unknown section [{section}]")
    for section, key in _REQUIRED:
        if not parser.has_option(section, key):
            raise ConfigError(f"{section}.{key} is required")

    spec = _build("backbone", BackboneSpec, _read_section(parser, "backbone"))
    grid_values = _read_section(parser, "grid")
    grid_values.setdefault("m", 0)
    grid_values.setdefault("n", 0)
    grid = _build(
        "grid", ElasticGrid, grid_values, d_h=spec.d_h, n_h=spec.n_h, l_max=spec.l_max
    )
    try:
        check_grid(spec, grid)
    except ValueError as e:
        raise ConfigError(f"[grid] {e}") from e
    heads = _build("heads", HeadsConfig, _read_section(parser, "heads"), in_dim=spec.pooled_dim())
    sampler = _build("sampler", SamplerConfig, _read_section(parser, "sampler"))
    sched = _build("sched", SchedConfig, _read_section(parser, "sched"))
    aug = _build("aug", AugmentConfig, _read_section(parser, "aug"))
    if aug.global_size > spec.image_size or aug.local_size > spec.image_size:
        raise ConfigError("aug.global_size and aug.local_size must not exceed backbone.image_size")

    loss = _read_section(parser, "loss")
    lam = loss.get("lambda", 0.8)
    gamma = loss.get("gamma", 0.1)
    if not 0.0 <= lam <= 1.0:
        raise ConfigError(f"loss.lambda must be in [0, 1], got {lam}")
    if gamma < 0.0:
        raise ConfigError(f"loss.gamma must be >= 0, got {gamma}")
    sk_iters = loss.get("sk_iters", 3)
    if sk_iters < 1:
        raise ConfigError(f"loss.sk_iters must be >= 1, got {sk_iters}")

    data = _read_section(parser, "data")
    out = _read_section(parser, "out")
    ckpt_every = out.get("ckpt_every", 0)
    if ckpt_every < 0:
        raise ConfigError(f"out.ckpt_every must be >= 0, got {ckpt_every}")
    return RunConfig(
        spec=spec,
        grid=grid,
        heads=heads,
        sampler=sampler,
        sched=sched,
        aug=aug,
        lam=lam,
        gamma=gamma,
        same_view=loss.get("same_view", True),
        sk_iters=sk_iters,
        data_path=data.get("path"),
        out_dir=out.get("dir"),
        ckpt_every=ckpt_every,
    )


def load_config(path) -> RunConfig:
    try:
        with open(path) as f:
            text = f.read()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    return parse_config(text)


def with_overrides(cfg: RunConfig, **fields) -> RunConfig:
    """A copy of cfg with top-level fields replaced (sched overrides
    take a full SchedConfig)."""
    return dataclasses.replace(cfg, **fields)
