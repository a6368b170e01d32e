"""Acceptance gate: one test per shipped guarantee, tolerances included.

Each test is self-contained and prints as a single pass/fail line under
`pytest -v`. The two training-based checks (09, 10) dominate the
runtime; everything else finishes in seconds.
"""

from __future__ import annotations

import dataclasses
import json
import math
import time
from pathlib import Path
from types import SimpleNamespace

import numpy as np
import pytest
from conftest import central_diff, grid_for, rel_err, tiny_heads, tiny_resnet, tiny_swin, tiny_vit
from oracles import loop_take, oracle_extract, oracle_store, take

from tridistill import kernel as K
from tridistill.backbones import forward, full_geometry
from tridistill.checkpoint import load_checkpoint, save_checkpoint, store_to_checkpoint
from tridistill.cli import main
from tridistill.config import load_config
from tridistill.data import ShapesConfig, make_shapes, split_even_odd
from tridistill.evalkit import SweepReport, knn_eval, labeled_features
from tridistill.grids import (
    ElasticGrid,
    SamplerConfig,
    SubNetId,
    SubnetSampler,
    block_ids,
    enumerate_ids,
)
from tridistill.heads import head_forward
from tridistill.losses import (
    HeadTerms,
    koleo,
    loss_elastic,
    loss_intact,
    loss_total,
    sk_center,
    teacher_probs,
)
from tridistill.augment import AugmentConfig
from tridistill.schedules import SchedConfig, momentum_at
from tridistill.slicing import ParamStore, extract_arrays, materialize
from tridistill.trainer import ema_update, run_pretrain

CONFIG_DIR = Path(__file__).resolve().parents[1] / "configs"


def _family_cases():
    vit = tiny_vit()
    swin = tiny_swin()
    resnet = tiny_resnet()
    return [
        ("vit", vit, grid_for(vit, m=2, n=1)),
        ("swin", swin, grid_for(swin, m=1, n=2)),
        ("resnet", resnet, grid_for(resnet, m=1, n=3, stage_depths=((3, 3), (3, 2), (2, 3), (2, 2)))),
    ]


# -- 1: a sliced view computes exactly what a copied sub-network computes ------------


def test_criterion_01_view_forward_matches_copied_subnet():
    t0 = time.perf_counter()
    pairs_per_family = 200
    for d_idx, (dtype, tol) in enumerate(((np.float32, 1e-6), (np.float64, 1e-12))):
        K.set_default_dtype(dtype)
        for f_idx, (family, spec, grid) in enumerate(_family_cases()):
            rng = np.random.default_rng(10 * d_idx + f_idx)
            ids = enumerate_ids(grid)
            images = rng.random((2, 3, spec.image_size, spec.image_size)).astype(dtype)
            for p in range(pairs_per_family):
                store = ParamStore.initialize(spec, tiny_heads(spec), seed=1000 + p, dtype=dtype)
                sid = ids[rng.integers(len(ids))]
                view = materialize(store, grid, sid)
                ref = oracle_store(store, grid, sid)
                t_v, p_v = forward(spec, view, images)
                t_o, p_o = forward(ref.spec, ref, images)
                assert np.max(np.abs(t_v.data - t_o.data)) < tol, (family, sid)
                assert np.max(np.abs(p_v.data - p_o.data)) < tol, (family, sid)
            # Anchor the vectorized oracle gather to true entry loops.
            store = ParamStore.initialize(spec, tiny_heads(spec), seed=7, dtype=dtype)
            sid = SubNetId(grid.m, grid.n)
            _, _, fast = oracle_extract(store, grid, sid, gather=take)
            _, _, slow = oracle_extract(store, grid, sid, gather=loop_take)
            for name in fast:
                assert np.array_equal(fast[name], slow[name]), (family, name)
    assert time.perf_counter() - t0 < 120.0


# -- 2: the identity cell is the intact network, bit for bit ------------------------


def test_criterion_02_identity_cell_is_the_intact_network():
    for family, spec, grid in _family_cases():
        heads = tiny_heads(spec)
        store = ParamStore.initialize(spec, heads, seed=41)
        images = np.random.default_rng(42).random((2, 3, spec.image_size, spec.image_size), dtype=np.float32)
        view = materialize(store, grid, SubNetId(0, 0))
        t_v, p_v = forward(spec, view, images)
        t_i, p_i = forward(spec, store, images)
        assert t_v.data.tobytes() == t_i.data.tobytes(), family
        assert p_v.data.tobytes() == p_i.data.tobytes(), family
        sspec, sheads, arrays = extract_arrays(store, grid, SubNetId(0, 0))
        # Derived fields may be materialized; the geometry must not move.
        assert full_geometry(sspec) == full_geometry(spec)
        assert sheads == heads
        backbone = [n for n in store.tensors if n.startswith(spec.family + ".")]
        assert backbone
        for name in backbone:
            assert arrays[name].tobytes() == store.tensors[name].data.tobytes(), (family, name)


# -- 3: every loss term agrees with central finite differences ----------------------


def _sample_coords(store: ParamStore, rng: np.random.Generator, count: int):
    """Size-weighted random parameter coordinates across the whole store."""
    names = list(store.tensors)
    sizes = np.array([store.tensors[n].data.size for n in names])
    cum = np.cumsum(sizes)
    coords = []
    for flat in rng.integers(0, cum[-1], size=count):
        k = int(np.searchsorted(cum, flat, side="right"))
        local = int(flat - (cum[k] - sizes[k]))
        coords.append((names[k], np.unravel_index(local, store.tensors[names[k]].data.shape)))
    return coords


def test_criterion_03_loss_gradients_match_finite_differences():
    t0 = time.perf_counter()
    K.set_default_dtype(np.float64)
    spec = tiny_vit()
    heads = tiny_heads(spec)
    store = ParamStore.initialize(spec, heads, seed=51, dtype=np.float64, trainable=True)
    grid = grid_for(spec, m=1, n=1)
    elastic = materialize(store, grid, SubNetId(1, 1))
    rng = np.random.default_rng(52)
    g_b = rng.random((2, 3, 16, 16))
    local_views = [rng.random((2, 3, 8, 8)) for _ in range(2)]
    targets = [K.constant(teacher_probs(rng.normal(size=(2, p)), tau=0.04)) for p in heads.prototypes]

    def prob(params, h, img):
        return K.softmax_t(head_forward(params, h, forward(spec, params, img)[1]), 0.1)

    # Same-view targets are stop-gradients; hold them at the unperturbed
    # values while differencing so autodiff and the difference quotient
    # see the same cut.
    frozen = {
        h: [K.constant(prob(store, h, v).data) for v in (g_b, *local_views)]
        for h in range(heads.count)
    }

    def intact_global():
        return loss_intact(targets[0], prob(store, 0, g_b))

    def intact_multicrop():
        locs = [prob(store, 0, v) for v in local_views]
        return loss_intact(targets[0], prob(store, 0, g_b), locs)

    def elastic_term(idx, with_locals):
        def build():
            p_b2 = prob(elastic, 0, g_b)
            if not with_locals:
                return loss_elastic(targets[0], frozen[0][0], p_b2)[idx]
            l2 = [prob(elastic, 0, v) for v in local_views]
            return loss_elastic(targets[0], frozen[0][0], p_b2, frozen[0][1:], l2)[idx]

        return build

    def spread():
        return koleo(forward(spec, store, g_b)[1], forward(spec, elastic, g_b)[1])

    def total():
        p1 = [forward(spec, store, v)[1] for v in (g_b, *local_views)]
        p2 = [forward(spec, elastic, v)[1] for v in (g_b, *local_views)]
        terms = []
        for h in range(heads.count):
            b1 = [K.softmax_t(head_forward(store, h, p), 0.1) for p in p1]
            b2 = [K.softmax_t(head_forward(elastic, h, p), 0.1) for p in p2]
            li = loss_intact(targets[h], b1[0], b1[1:])
            e1, e2 = loss_elastic(targets[h], frozen[h][0], b2[0], frozen[h][1:], b2[1:])
            terms.append(HeadTerms(li, e1, e2))
        return loss_total(terms, 0.8, 0.1, koleo(p1[0], p2[0]), same_view=True)

    builders = {
        "intact_global": intact_global,
        "intact_multicrop": intact_multicrop,
        "cross_view_global": elastic_term(0, False),
        "cross_view_multicrop": elastic_term(0, True),
        "same_view_global": elastic_term(1, False),
        "same_view_multicrop": elastic_term(1, True),
        "spread": spread,
        "total": total,
    }
    for label, build in builders.items():
        store.zero_grad()
        build().backward()
        grads = {n: None if t.grad is None else t.grad.copy() for n, t in store.tensors.items()}
        for name, idx in _sample_coords(store, rng, 50):
            got = 0.0 if grads[name] is None else float(grads[name][idx])
            fd = central_diff(lambda: float(build().data), store.tensors[name].data, idx, h=1e-6)
            assert rel_err(got, fd, floor=1e-4) < 1e-4, f"{label}: {name}{idx} grad={got} fd={fd}"
    assert time.perf_counter() - t0 < 300.0


# -- 4: depth selection keeps evenly spread blocks, endpoints included ---------------


def test_criterion_04_block_id_table():
    assert block_ids(24, 12) == [0, 2, 4, 6, 8, 10, 12, 14, 16, 18, 20, 23]
    for l_max in range(2, 65):
        for l_i in range(2, l_max + 1):
            ids = block_ids(l_max, l_i)
            assert len(ids) == l_i, (l_max, l_i)
            assert len(set(ids)) == l_i, (l_max, l_i)
            assert ids == sorted(ids), (l_max, l_i)
            assert ids[0] == 0 and ids[-1] == l_max - 1, (l_max, l_i)
            assert all(0 <= b < l_max for b in ids), (l_max, l_i)


# -- 5: the shipped configs span the documented lattices -----------------------------


def test_criterion_05_shipped_lattice_cardinalities():
    for fname, want in (("vit_l16.cfg", 143), ("swin_b.cfg", 39), ("resnet152.cfg", 465)):
        cfg = load_config(CONFIG_DIR / fname)
        assert len(enumerate_ids(cfg.grid)) == want, fname


# -- 6: the sampler favors small cells at the documented rates -----------------------


def test_criterion_06_sampler_distribution_and_coverage():
    grid = ElasticGrid(d_h=4, n_h=2, l_max=4, m=1, n=1)
    sampler = SubnetSampler(SamplerConfig(mode="probabilistic", s_w=3.0, s_d=3.0, seed=5), grid)
    draws = 100_000
    counts: dict[SubNetId, int] = {}
    for _ in range(draws):
        sid = sampler.next()
        counts[sid] = counts.get(sid, 0) + 1
    # Intensity 3 per axis: the smallest cell is drawn 9/16 of the time,
    # the full network 1/16.
    expected = {
        SubNetId(1, 1): 9 / 16,
        SubNetId(1, 0): 3 / 16,
        SubNetId(0, 1): 3 / 16,
        SubNetId(0, 0): 1 / 16,
    }
    assert sum(counts.values()) == draws and set(counts) == set(expected)
    for sid, p in expected.items():
        assert abs(counts[sid] / draws - p) <= 0.01, sid

    rr = SubnetSampler(SamplerConfig(mode="round_robin", seed=7), grid)
    cells = set(enumerate_ids(grid))
    for cycle in range(25):
        assert {rr.next() for _ in range(len(cells))} == cells, cycle


# -- 7: batch centering balances prototypes in three iterations ----------------------


def test_criterion_07_sinkhorn_centering():
    rng = np.random.default_rng(71)
    # Logits at pipeline scale: unit-norm bottleneck rows against a
    # 0.02-std prototype matrix, 64 samples x 16 prototypes.
    z = rng.normal(size=(64, 32))
    z /= np.linalg.norm(z, axis=1, keepdims=True)
    logits = z @ rng.normal(0.0, 0.02, size=(16, 32)).T
    p3 = sk_center(logits, n_iter=3, eps=0.07)
    p100 = sk_center(logits, n_iter=100, eps=0.07)
    assert np.max(np.abs(p3.sum(axis=1) - 1.0)) < 1e-6
    assert np.max(np.abs(p3 - p100)) < 1e-3
    # Row sums hold for arbitrary-scale logits too.
    wild = sk_center(rng.normal(size=(64, 16)) * 5.0, n_iter=3, eps=0.07)
    assert np.max(np.abs(wild.sum(axis=1) - 1.0)) < 1e-6
    # Hand fixed point: exp(logits/eps) proportional to [[2,1],[1,2]] is
    # already balanced, so any iteration count reproduces it.
    eps = 0.07
    hand = eps * np.log(np.array([[2.0, 1.0], [1.0, 2.0]]))
    want = np.array([[2 / 3, 1 / 3], [1 / 3, 2 / 3]])
    assert np.allclose(sk_center(hand, n_iter=3, eps=eps), want, atol=1e-12)


# -- 8: the teacher update matches its closed form over 1000 steps -------------------


def test_criterion_08_ema_matches_closed_form():
    spec = tiny_vit()
    heads = tiny_heads(spec)
    rng = np.random.default_rng(81)
    n = 1000
    s_seq = rng.normal(size=n)
    t_init = 0.7
    schedules_ = {
        "constant": np.full(n, 0.996),
        "cosine": np.array([momentum_at(k, n, 0.992, 0.9999) for k in range(n)]),
    }
    for label, mus in schedules_.items():
        teacher = ParamStore(spec, heads, {"w": K.Tensor(np.array([t_init]))})
        student = ParamStore(spec, heads, {"w": K.Tensor(np.array([0.0]))})
        for k in range(n):
            student.tensors["w"].data[0] = s_seq[k]
            ema_update(teacher, student, float(mus[k]))
            got = float(teacher.tensors["w"].data[0])
            # t_{k+1} = t_0 prod_{j<=k} mu_j + sum_t (1 - mu_t) s_t prod_{j=t+1}^{k} mu_j
            tail = np.ones(k + 2)
            tail[: k + 1] = np.cumprod(mus[: k + 1][::-1])[::-1]
            want = t_init * tail[0] + math.fsum(
                (1.0 - mus[t]) * s_seq[t] * tail[t + 1] for t in range(k + 1)
            )
            assert abs(got - want) <= 1e-10, (label, k)


# -- 9: the demo recipe trains every cell to useful accuracy in one sitting ----------


@pytest.fixture(scope="module")
def toy_run(tmp_path_factory):
    """One shipped-config pretraining run shared by the quality checks."""
    root = tmp_path_factory.mktemp("toy")
    data = root / "shapes.npz"
    assert main(["make-data", "--out", str(data)]) == 0
    text = (CONFIG_DIR / "toy_vit.cfg").read_text()
    text = text.replace("path = shapes.npz", f"path = {data}")
    text = text.replace("dir = runs/toy", f"dir = {root / 'run'}")
    config = root / "toy_vit.cfg"
    config.write_text(text)
    t0 = time.perf_counter()
    assert main(["pretrain", "--config", str(config)]) == 0
    csv = root / "sweep.csv"
    rc = main(
        ["sweep", "--ckpt", str(root / "run" / "teacher.ckpt"), "--data", str(data), "--csv", str(csv)]
    )
    assert rc == 0
    elapsed = time.perf_counter() - t0
    return SimpleNamespace(
        root=root,
        csv=csv,
        log=root / "run" / "metrics.jsonl",
        elapsed=elapsed,
    )


def test_criterion_09_toy_grid_beats_chance_everywhere(toy_run):
    assert toy_run.elapsed < 1800.0, f"took {toy_run.elapsed:.0f}s"
    report = SweepReport.from_csv(toy_run.csv.read_text())
    accs = {(r.depth, r.width): r.value for r in report.rows if r.metric == "knn"}
    assert len(accs) == 9
    chance = 1.0 / 3.0
    for cell, acc in accs.items():
        assert acc >= chance + 0.20, f"cell {cell}: {acc:.3f}"
    depths = sorted({d for d, _ in accs})
    widths = sorted({w for _, w in accs})
    largest = accs[(depths[-1], widths[-1])]
    smallest = accs[(depths[0], widths[0])]
    assert largest >= smallest - 0.02
    # Stability: every logged quantity stayed finite for the whole run.
    steps = [json.loads(line) for line in toy_run.log.read_text().splitlines()]
    assert steps
    for row in steps:
        for key, value in row.items():
            if isinstance(value, float):
                assert np.isfinite(value), (row["step"], key)


# -- 10: dropping same-view distillation hurts the smallest cell ---------------------


def test_criterion_10_same_view_ablation_direction():
    cfg = load_config(CONFIG_DIR / "toy_vit.cfg")
    images, labels = make_shapes(ShapesConfig(num_images=240, image_size=32, noise=0.03, seed=0))
    (tr_i, tr_l), (te_i, te_l) = split_even_odd(images, labels)
    smallest = SubNetId(cfg.grid.m, cfg.grid.n)

    def smallest_cell_knn(seed: int, same_view: bool) -> float:
        sched = dataclasses.replace(cfg.sched, epochs=20, seed=seed)
        sampler = dataclasses.replace(cfg.sampler, seed=seed)
        state = run_pretrain(
            cfg.spec, cfg.grid, cfg.heads, sampler, cfg.aug, sched, images,
            lam=cfg.lam, gamma=cfg.gamma, same_view=same_view, sk_iters=cfg.sk_iters,
        )
        view = materialize(state.teacher, cfg.grid, smallest)
        train = labeled_features(cfg.spec, view, tr_i, tr_l)
        test = labeled_features(cfg.spec, view, te_i, te_l)
        return knn_eval(train, test, k=20)

    seeds = (0, 1, 2)
    with_term = [smallest_cell_knn(s, True) for s in seeds]
    without = [smallest_cell_knn(s, False) for s in seeds]
    assert float(np.mean(without)) < float(np.mean(with_term)), (with_term, without)


# -- 11: runs are reproducible and checkpoints round-trip exactly --------------------


def test_criterion_11_determinism_and_checkpoint_round_trip(tmp_path):
    spec = tiny_vit()
    heads = tiny_heads(spec)
    grid = grid_for(spec, m=1, n=1)
    sampler = SamplerConfig(seed=3)
    aug = AugmentConfig(global_size=16, local_size=8, local_crops=1)
    sched = SchedConfig(epochs=2, batch_size=4, warmup_epochs=1.0, seed=5, dtype="float64")
    images = np.random.default_rng(11).random((8, 3, 16, 16))

    def run(log):
        return run_pretrain(spec, grid, heads, sampler, aug, sched, images, log_path=log)

    log_a, log_b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    state_a = run(log_a)
    state_b = run(log_b)
    for store_a, store_b in ((state_a.teacher, state_b.teacher), (state_a.student, state_b.student)):
        assert set(store_a.tensors) == set(store_b.tensors)
        for name, t in store_a.tensors.items():
            assert t.data.tobytes() == store_b.tensors[name].data.tobytes(), name
    assert log_a.read_bytes() == log_b.read_bytes()

    ckpt = store_to_checkpoint(state_a.teacher, role="teacher", step=state_a.step, grid=grid)
    path_a, path_b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(path_a, ckpt)
    loaded = load_checkpoint(path_a)
    assert loaded.spec == ckpt.spec
    assert loaded.heads == ckpt.heads
    assert loaded.grid == ckpt.grid
    assert (loaded.role, loaded.step, loaded.alpha_baked) == (ckpt.role, ckpt.step, ckpt.alpha_baked)
    assert set(loaded.arrays) == set(ckpt.arrays)
    for name, arr in ckpt.arrays.items():
        got = loaded.arrays[name]
        assert got.dtype == arr.dtype and got.shape == arr.shape
        assert got.tobytes() == arr.tobytes(), name
    save_checkpoint(path_b, loaded)
    assert path_a.read_bytes() == path_b.read_bytes()
