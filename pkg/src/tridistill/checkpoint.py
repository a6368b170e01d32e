"""Single-file binary checkpoints.

Layout: an 8-byte magic, a little-endian u32 format version, a u64
length-prefixed JSON header (architecture, grid, metadata, and a tensor
index with offsets), then the raw little-endian tensor payloads. The
index lives at the head so a reader can fetch single tensors without
scanning the file. Writes go to a temp file in the target directory and
are renamed into place, so readers never observe partial files.
"""

from __future__ import annotations

import dataclasses
import json
import os
import struct
import tempfile
from dataclasses import dataclass

import numpy as np

from .backbones import BackboneSpec
from .grids import ElasticGrid
from .heads import HeadsConfig
from .slicing import ParamStore

MAGIC = b"TDSTCKPT"
VERSION = 1
_DTYPES = ("<f4", "<f8")


class CheckpointError(Exception):
    """Unreadable, corrupt, or incompatible checkpoint file."""


@dataclass
class Checkpoint:
    spec: BackboneSpec
    heads: HeadsConfig
    arrays: dict[str, np.ndarray]
    grid: ElasticGrid | None = None
    role: str = "teacher"
    step: int = 0
    alpha_baked: bool = False
    extra: dict | None = None

    def __post_init__(self):
        if self.role not in ("teacher", "student"):
            raise ValueError(f"role must be teacher or student, got {self.role!r}")


def store_to_checkpoint(
    store: ParamStore,
    role: str,
    step: int = 0,
    grid: ElasticGrid | None = None,
    alpha_baked: bool = False,
    extra: dict | None = None,
) -> Checkpoint:
    arrays = {name: t.data for name, t in store.tensors.items()}
    return Checkpoint(store.spec, store.heads_cfg, arrays, grid, role, step, alpha_baked, extra)


def checkpoint_to_store(ckpt: Checkpoint, trainable: bool = False) -> ParamStore:
    from . import kernel as K

    tensors = {n: K.Tensor(a.copy(), requires_grad=trainable) for n, a in ckpt.arrays.items()}
    return ParamStore(ckpt.spec, ckpt.heads, tensors)


def _le(arr: np.ndarray) -> np.ndarray:
    code = {4: "<f4", 8: "<f8"}.get(arr.dtype.itemsize)
    if code is None or arr.dtype.kind != "f":
        raise CheckpointError(f"only float32/float64 tensors are serializable, got {arr.dtype}")
    return np.ascontiguousarray(arr.astype(code, copy=False))


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    payload_parts: list[bytes] = []
    index = []
    offset = 0
    for name, arr in ckpt.arrays.items():
        le = _le(arr)
        buf = le.tobytes()
        index.append(
            {"name": name, "dtype": le.dtype.str, "shape": list(arr.shape), "offset": offset, "nbytes": len(buf)}
        )
        payload_parts.append(buf)
        offset += len(buf)
    meta = {
        "spec": dataclasses.asdict(ckpt.spec),
        "heads": dataclasses.asdict(ckpt.heads),
        "grid": dataclasses.asdict(ckpt.grid) if ckpt.grid is not None else None,
        "role": ckpt.role,
        "step": ckpt.step,
        "alpha_baked": ckpt.alpha_baked,
        "extra": ckpt.extra or {},
        "tensors": index,
    }
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(prefix=".ckpt-", dir=directory)
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(MAGIC)
            f.write(struct.pack("<I", VERSION))
            f.write(struct.pack("<Q", len(meta_bytes)))
            f.write(meta_bytes)
            for part in payload_parts:
                f.write(part)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _spec_from(d: dict) -> BackboneSpec:
    if d.get("stage_blocks") is not None:
        d = dict(d, stage_blocks=tuple(d["stage_blocks"]))
    return BackboneSpec(**d)


def _grid_from(d: dict | None) -> ElasticGrid | None:
    if d is None:
        return None
    if d.get("stage_depths") is not None:
        d = dict(d, stage_depths=tuple(tuple(e) for e in d["stage_depths"]))
    return ElasticGrid(**d)


def load_checkpoint(path) -> Checkpoint:
    try:
        with open(path, "rb") as f:
            blob = f.read()
    except OSError as e:
        raise CheckpointError(f"cannot read {path}: {e}") from e
    if blob[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
    pos = len(MAGIC)
    (version,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    if version != VERSION:
        raise CheckpointError(f"unknown checkpoint format version {version} (this build reads {VERSION})")
    (meta_len,) = struct.unpack_from("<Q", blob, pos)
    pos += 8
    try:
        meta = json.loads(blob[pos : pos + meta_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"corrupt checkpoint header in {path}: {e}") from e
    payload = blob[pos + meta_len :]
    arrays: dict[str, np.ndarray] = {}
    try:
        for entry in meta["tensors"]:
            name, code, shape = entry["name"], entry["dtype"], tuple(entry["shape"])
            if code not in _DTYPES:
                raise CheckpointError(f"unsupported tensor dtype {code!r} in {path}")
            if name in arrays:
                raise CheckpointError(f"duplicate tensor {name!r} in {path}")
            dt = np.dtype(code)
            expect = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
            if entry["nbytes"] != expect or entry["offset"] + expect > len(payload):
                raise CheckpointError(f"tensor {name!r} index inconsistent with payload in {path}")
            raw = payload[entry["offset"] : entry["offset"] + expect]
            arrays[name] = np.frombuffer(raw, dtype=dt).reshape(shape).copy()
        spec = _spec_from(meta["spec"])
        heads = HeadsConfig(**meta["heads"])
        return Checkpoint(
            spec=spec,
            heads=heads,
            arrays=arrays,
            grid=_grid_from(meta.get("grid")),
            role=meta["role"],
            step=meta["step"],
            alpha_baked=meta["alpha_baked"],
            extra=meta.get("extra") or {},
        )
    except (KeyError, TypeError, ValueError) as e:
        raise CheckpointError(f"invalid checkpoint metadata in {path}: {e}") from e
