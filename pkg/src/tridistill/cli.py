"""Command-line surface.

Subcommands: pretrain, extract, enumerate, sweep, eval, make-data.
Exit codes: 0 success, 1 runtime failure, 2 configuration or argument
error. Setting TRIDISTILL_DETERMINISTIC=1 forces 64-bit training for
bit-reproducible runs regardless of the configured dtype.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys
import time

import numpy as np

from . import data as datamod
from . import evalkit
from .checkpoint import (
    Checkpoint,
    CheckpointError,
    checkpoint_to_store,
    load_checkpoint,
    save_checkpoint,
    store_to_checkpoint,
)
from .config import ConfigError, load_config
from .grids import SubNetId, depth_of, enumerate_ids, width_of
from .slicing import extract_arrays, materialize
from .trainer import TrainingDiverged, run_pretrain

DETERMINISTIC_ENV = "TRIDISTILL_DETERMINISTIC"


def _env_deterministic() -> bool:
    return os.environ.get(DETERMINISTIC_ENV, "").strip().lower() in ("1", "true", "yes", "on")


def _require(cfg_value, key: str):
    if cfg_value is None:
        raise ConfigError(f"{key} is required for this command")
    return cfg_value


def cmd_pretrain(args) -> int:
    cfg = load_config(args.config)
    data_path = _require(cfg.data_path, "data.path")
    out_dir = _require(cfg.out_dir, "out.dir")
    sched = cfg.sched
    if _env_deterministic() and sched.dtype != "float64":
        sched = dataclasses.replace(sched, dtype="float64")
    try:
        images, _ = datamod.load_npz(data_path)
    except (OSError, ValueError, KeyError) as e:
        raise ConfigError(f"data.path: cannot load {data_path}: {e}") from e
    os.makedirs(out_dir, exist_ok=True)

    def write_ckpt(state):
        extra = {"sampler_seed": cfg.sampler.seed, "sched": dataclasses.asdict(sched)}
        for role, store in (("teacher", state.teacher), ("student", state.student)):
            ck = store_to_checkpoint(store, role, state.step, cfg.grid, extra=extra)
            save_checkpoint(os.path.join(out_dir, f"{role}.ckpt"), ck)

    state = run_pretrain(
        cfg.spec,
        cfg.grid,
        cfg.heads,
        cfg.sampler,
        cfg.aug,
        sched,
        images,
        lam=cfg.lam,
        gamma=cfg.gamma,
        same_view=cfg.same_view,
        sk_iters=cfg.sk_iters,
        log_path=os.path.join(out_dir, "metrics.jsonl"),
        on_checkpoint=write_ckpt,
        ckpt_every=cfg.ckpt_every,
    )
    print(f"pretrained {state.step} steps; checkpoints in {out_dir}")
    return 0


def _parse_depth(token: str) -> int | tuple[int, int]:
    if "-" in token:
        left, _, right = token.partition("-")
        return (int(left), int(right))
    return int(token)


def _resolve_cell(grid, width: int, depth) -> SubNetId:
    widths = [width_of(grid, i) for i in range(grid.m + 1)]
    if width not in widths:
        raise ConfigError(f"width {width} not on the lattice; valid widths: {widths}")
    if grid.stage_depths is not None:
        if not isinstance(depth, tuple):
            raise ConfigError(
                "staged grids take --depth n2-n3; valid entries: "
                + " ".join(f"{a}-{b}" for a, b in grid.stage_depths)
            )
        if depth not in grid.stage_depths:
            raise ConfigError(
                f"depth {depth[0]}-{depth[1]} not on the lattice; valid entries: "
                + " ".join(f"{a}-{b}" for a, b in grid.stage_depths)
            )
        j = grid.stage_depths.index(depth)
    else:
        depths = [depth_of(grid, j) for j in range(grid.n + 1)]
        if depth not in depths:
            raise ConfigError(f"depth {depth} not on the lattice; valid depths: {depths}")
        j = depths.index(depth)
    return SubNetId(widths.index(width), j)


def _load_training_ckpt(path):
    ckpt = load_checkpoint(path)
    if ckpt.alpha_baked:
        raise ConfigError(f"{path} is an extracted sub-network; re-extraction is refused")
    if ckpt.grid is None:
        raise ConfigError(f"{path} carries no elastic grid")
    return ckpt


def cmd_extract(args) -> int:
    ckpt = _load_training_ckpt(args.ckpt)
    sid = _resolve_cell(ckpt.grid, args.width, _parse_depth(args.depth))
    store = checkpoint_to_store(ckpt)
    sspec, sheads, arrays = extract_arrays(store, ckpt.grid, sid)
    out = Checkpoint(
        spec=sspec,
        heads=sheads,
        arrays=arrays,
        grid=None,
        role=ckpt.role,
        step=ckpt.step,
        alpha_baked=True,
        extra={"source_cell": [sid.i, sid.j]},
    )
    save_checkpoint(args.out, out)
    print(f"extracted width={args.width} depth={args.depth} -> {args.out}")
    return 0


def cmd_enumerate(args) -> int:
    if args.ckpt:
        grid = _load_training_ckpt(args.ckpt).grid
    else:
        grid = load_config(args.config).grid
    print("i,j,width,depth")
    for sid in enumerate_ids(grid):
        print(f"{sid.i},{sid.j},{width_of(grid, sid.i)},{depth_of(grid, sid.j)}")
    return 0


def _load_eval_inputs(args):
    ckpt = _load_training_ckpt(args.ckpt)
    store = checkpoint_to_store(ckpt)
    images, labels = datamod.load_npz(args.data)
    (tr_x, tr_y), (te_x, te_y) = datamod.split_even_odd(images, labels)
    return ckpt, store, (tr_x, tr_y), (te_x, te_y)


def cmd_sweep(args) -> int:
    ckpt, store, (tr_x, tr_y), (te_x, te_y) = _load_eval_inputs(args)
    report = evalkit.sweep(
        store, ckpt.grid, tr_x, tr_y, te_x, te_y, k=args.k, temperature=args.temperature
    )
    report.save(args.csv)
    print(f"swept {len(report.rows)} cells -> {args.csv}")
    return 0


def cmd_eval(args) -> int:
    ckpt, store, (tr_x, tr_y), (te_x, te_y) = _load_eval_inputs(args)
    grid = ckpt.grid
    if args.width is not None or args.depth is not None:
        if args.width is None or args.depth is None:
            raise ConfigError("--width and --depth must be given together")
        sid = _resolve_cell(grid, args.width, _parse_depth(args.depth))
    else:
        sid = SubNetId(0, 0)
    params = materialize(store, grid, sid)
    depth, width = depth_of(grid, sid.j), width_of(grid, sid.i)
    rows = []
    t0 = time.perf_counter()
    if args.mode in ("knn", "probe"):
        train = evalkit.labeled_features(store.spec, params, tr_x, tr_y)
        test = evalkit.labeled_features(store.spec, params, te_x, te_y)
        if args.mode == "knn":
            value = evalkit.knn_eval(train, test, k=args.k, temperature=args.temperature)
        else:
            value = evalkit.linear_probe(train, test, epochs=args.epochs, lr=args.lr)
        rows.append(evalkit.SweepRow(depth, width, args.mode, value, time.perf_counter() - t0))
    else:
        levels = args.levels if args.levels is not None else ([0.0, 0.25, 0.5, 0.75] if args.mode == "occlusion" else [1, 2, 4])
        curve = evalkit.robustness_probe(
            store.spec, params, tr_x, tr_y, te_x, te_y, args.mode, levels,
            k=args.k, temperature=args.temperature, seed=args.seed,
        )
        now = time.perf_counter() - t0
        for level, value in curve:
            rows.append(evalkit.SweepRow(depth, width, f"{args.mode}@{level:g}", value, now))
    report = evalkit.SweepReport(tuple(rows))
    text = report.to_csv()
    if args.csv:
        report.save(args.csv)
    print(text, end="")
    return 0


def cmd_make_data(args) -> int:
    cfg = datamod.ShapesConfig(
        num_images=args.num, image_size=args.size, noise=args.noise, seed=args.seed
    )
    images, labels = datamod.make_shapes(cfg)
    save_dir = os.path.dirname(os.path.abspath(args.out))
    os.makedirs(save_dir, exist_ok=True)
    datamod.save_npz(args.out, images, labels)
    print(f"wrote {len(images)} images to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tridistill",
        description="Width/depth-elastic self-distillation: pre-train once, extract many sizes.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="run the tri-branch training loop from a config file")
    p.add_argument("--config", required=True)
    p.set_defaults(fn=cmd_pretrain)

    p = sub.add_parser("extract", help="bake one sub-network out of a training checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--width", type=int, required=True)
    p.add_argument("--depth", required=True, help="block count, or n2-n3 for staged grids")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_extract)

    p = sub.add_parser("enumerate", help="list every lattice cell")
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--ckpt")
    g.add_argument("--config")
    p.set_defaults(fn=cmd_enumerate)

    p = sub.add_parser("sweep", help="k-NN accuracy of every sub-network")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--csv", required=True)
    p.add_argument("--k", type=int, default=20)
    p.add_argument("--temperature", type=float, default=0.07)
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("eval", help="evaluate one sub-network (default: the intact net)")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--mode", required=True, choices=("knn", "probe", "occlusion", "shuffle"))
    p.add_argument("--width", type=int)
    p.add_argument("--depth")
    p.add_argument("--levels", type=float, nargs="+")
    p.add_argument("--csv")
    p.add_argument("--k", type=int, default=20)
    p.add_argument("--temperature", type=float, default=0.07)
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--lr", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("make-data", help="generate the synthetic shapes dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--num", type=int, default=240)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--noise", type=float, default=0.03)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_make_data)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (ValueError, np.exceptions.AxisError) as e:
        print(f"invalid request: {e}", file=sys.stderr)
        return 2
    except TrainingDiverged as e:
        print(f"training diverged: {e}", file=sys.stderr)
        return 1
    except (CheckpointError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
