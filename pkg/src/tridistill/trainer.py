"""The tri-branch training loop.

Per step: sample one lattice cell, run the teacher on the first global
view, run the intact student and the sampled elastic view of it on the
second global view plus all local views, combine the distillation
losses and the spread penalty, backpropagate (elastic gradients land in
the shared store), clip, apply the decoupled-decay Adam update with
layer-wise learning rates, then let the teacher's exponential moving
average track the student. The teacher starts as an exact copy of the
student and never receives gradients.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass

import numpy as np

from . import kernel as K
from . import schedules
from .augment import AugmentConfig, ViewBatch, augment
from .backbones import BackboneSpec, forward
from .grids import ElasticGrid, SamplerConfig, SubnetSampler
from .heads import HeadsConfig, head_forward
from .losses import HeadTerms, koleo, loss_elastic, loss_intact, loss_total, teacher_probs
from .slicing import ParamStore, materialize


class TrainingDiverged(RuntimeError):
    """Raised when the loss stops being finite; carries a diagnostic report."""

    def __init__(self, step: int, report: dict):
        super().__init__(f"non-finite loss at step {step}")
        self.step = step
        self.report = report


@dataclass
class TrainState:
    spec: BackboneSpec
    grid: ElasticGrid
    heads_cfg: HeadsConfig
    sched: schedules.SchedConfig
    aug_cfg: AugmentConfig
    lam: float
    gamma: float
    same_view: bool
    sk_iters: int
    student: ParamStore
    teacher: ParamStore
    sampler: SubnetSampler
    step: int
    total_steps: int
    steps_per_epoch: int
    warmup_steps: int
    temp_warmup_steps: int
    opt_m: dict[str, np.ndarray]
    opt_v: dict[str, np.ndarray]
    lr_mults: dict[str, float]
    wd_apply: dict[str, bool]
    rng_augment: np.random.Generator
    rng_droppath: np.random.Generator
    rng_batch: np.random.Generator

    @classmethod
    def create(
        cls,
        spec: BackboneSpec,
        grid: ElasticGrid,
        heads_cfg: HeadsConfig,
        sampler_cfg: SamplerConfig,
        aug_cfg: AugmentConfig,
        sched: schedules.SchedConfig,
        num_images: int,
        lam: float = 0.8,
        gamma: float = 0.1,
        same_view: bool = True,
        sk_iters: int = 3,
    ) -> "TrainState":
        dtype = np.dtype(sched.dtype)
        K.set_default_dtype(dtype)
        student = ParamStore.initialize(spec, heads_cfg, seed=sched.seed, dtype=dtype, trainable=True)
        teacher = student.clone(trainable=False)
        sampler = SubnetSampler(sampler_cfg, grid)
        steps_per_epoch = max(1, num_images // sched.batch_size)
        total = sched.max_steps if sched.max_steps > 0 else sched.epochs * steps_per_epoch
        seeds = np.random.SeedSequence(sched.seed).spawn(3)
        return cls(
            spec=spec,
            grid=grid,
            heads_cfg=heads_cfg,
            sched=sched,
            aug_cfg=aug_cfg,
            lam=lam,
            gamma=gamma,
            same_view=same_view,
            sk_iters=sk_iters,
            student=student,
            teacher=teacher,
            sampler=sampler,
            step=0,
            total_steps=total,
            steps_per_epoch=steps_per_epoch,
            warmup_steps=int(round(sched.warmup_epochs * steps_per_epoch)),
            temp_warmup_steps=int(round(sched.temp_warmup_epochs * steps_per_epoch)),
            opt_m={n: np.zeros_like(t.data) for n, t in student.tensors.items()},
            opt_v={n: np.zeros_like(t.data) for n, t in student.tensors.items()},
            lr_mults=_lr_multipliers(spec, student, sched.layerwise_decay, sched.patch_embed_mult),
            wd_apply={n: _wd_applies(n, t) for n, t in student.tensors.items()},
            rng_augment=np.random.default_rng(seeds[0]),
            rng_droppath=np.random.default_rng(seeds[1]),
            rng_batch=np.random.default_rng(seeds[2]),
        )

    @property
    def epoch(self) -> int:
        return self.step // self.steps_per_epoch


_BLOCK_RE = re.compile(r"^(\w+)\.(?:s(\d+)\.)?b(\d+)\.")


def _lr_multipliers(spec: BackboneSpec, store: ParamStore, decay: float, patch_mult: float) -> dict[str, float]:
    """Layer-wise decay: 1.0 at the heads, shrinking toward the input.

    Block k of L gets decay^(L - k); embeddings and the stem sit below
    every block at decay^(L + 1), with the patch projection further
    scaled by `patch_mult`. Stage transition layers share their stage's
    last block depth.
    """
    if spec.family == "vit":
        offsets = [0]
    else:
        offsets = list(np.cumsum((0,) + spec.stage_blocks[:-1]))
    total = spec.l_max
    mults: dict[str, float] = {}
    for name in store.tensors:
        if name.startswith("head") or ".final_ln." in name:
            mults[name] = 1.0
            continue
        m = _BLOCK_RE.match(name)
        if m:
            stage = int(m.group(2)) if m.group(2) is not None else 0
            depth = offsets[stage] + int(m.group(3))
            mults[name] = decay ** (total - depth)
        elif ".expand." in name or ".pm." in name:
            stage = int(re.search(r"\.s(\d+)\.", name).group(1))
            depth = offsets[stage] + spec.stage_blocks[stage] - 1
            mults[name] = decay ** (total - depth)
        else:
            # embeddings, class token, positional grid, stem
            mult = decay ** (total + 1)
            if ".embed.patch." in name:
                mult *= patch_mult
            mults[name] = mult
    return mults


def _wd_applies(name: str, t: K.Tensor) -> bool:
    if name.endswith(".bias") or t.data.ndim < 2:
        return False
    return ".embed.pos." not in name and ".embed.cls." not in name


def freeze_policy(state: TrainState) -> frozenset[str]:
    """Names excluded from this step's update: the prototype layers
    while the run is still inside the initial freeze window."""
    if state.epoch < state.sched.freeze_proto_epochs:
        return frozenset(f"head{h}.proto.weight" for h in range(state.heads_cfg.count))
    return frozenset()


def clip_gradients(store: ParamStore, max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most max_norm."""
    total = 0.0
    grads = [t.grad for t in store.tensors.values() if t.grad is not None]
    for g in grads:
        total += float((g.astype(np.float64) ** 2).sum())
    norm = float(np.sqrt(total))
    if max_norm > 0 and norm > max_norm:
        factor = max_norm / norm
        for g in grads:
            g *= g.dtype.type(factor)
    return norm


def ema_update(teacher: ParamStore, student: ParamStore, momentum: float) -> None:
    """teacher <- momentum * teacher + (1 - momentum) * student, in place."""
    if not 0.0 <= momentum <= 1.0:
        raise ValueError(f"momentum must be in [0, 1], got {momentum}")
    for name, t in teacher.tensors.items():
        mu = t.data.dtype.type(momentum)
        t.data *= mu
        t.data += (1 - mu) * student.tensors[name].data


def lr_at(state: TrainState, step: int | None = None) -> float:
    s = state.sched
    return schedules.lr_at(
        state.step if step is None else step,
        state.total_steps,
        state.warmup_steps,
        s.batch_size,
        s.lr_base,
        s.lr_final,
    )


def train_step(state: TrainState, views: ViewBatch) -> dict:
    """One optimization step over an augmented batch. Returns a report
    of schedule values and loss components (plain floats)."""
    s = state.sched
    sid = state.sampler.next()
    elastic = materialize(state.student, state.grid, sid)
    lr = lr_at(state)
    wd = schedules.wd_at(state.step, state.total_steps, s.wd_start, s.wd_end)
    mu = schedules.momentum_at(state.step, state.total_steps, s.momentum_start, s.momentum_end)
    t_temp = schedules.teacher_temp_at(
        state.step, state.temp_warmup_steps, s.teacher_temp_start, s.teacher_temp_end
    )

    g_a, g_b = views.globals_
    _, t_pooled = forward(state.spec, state.teacher, g_a, training=False)
    _, b1_pooled = forward(state.spec, state.student, g_b, training=True, rng=state.rng_droppath)
    _, b2_pooled = forward(state.spec, elastic, g_b, training=True, rng=state.rng_droppath)
    b1_locals, b2_locals = [], []
    for lv in views.locals_:
        _, p1 = forward(state.spec, state.student, lv, training=True, rng=state.rng_droppath)
        _, p2 = forward(state.spec, elastic, lv, training=True, rng=state.rng_droppath)
        b1_locals.append(p1)
        b2_locals.append(p2)

    head_terms: list[HeadTerms] = []
    for h in range(state.heads_cfg.count):
        t_logits = head_forward(state.teacher, h, t_pooled)
        p_a = K.constant(teacher_probs(t_logits.data, t_temp, state.sk_iters))
        p_b1 = K.softmax_t(head_forward(state.student, h, b1_pooled), s.student_temp)
        p_b2 = K.softmax_t(head_forward(elastic, h, b2_pooled), s.student_temp)
        l1 = [K.softmax_t(head_forward(state.student, h, p), s.student_temp) for p in b1_locals]
        l2 = [K.softmax_t(head_forward(elastic, h, p), s.student_temp) for p in b2_locals]
        li = loss_intact(p_a, p_b1, l1)
        e1, e2 = loss_elastic(p_a, p_b1, p_b2, l1, l2)
        head_terms.append(HeadTerms(li, e1, e2))

    kol = koleo(b1_pooled, b2_pooled) if state.gamma > 0 else None
    total = loss_total(head_terms, state.lam, state.gamma, kol, state.same_view)

    report = {
        "step": state.step,
        "lr": lr,
        "wd": wd,
        "momentum": mu,
        "teacher_temp": t_temp,
        "subnet_i": sid.i,
        "subnet_j": sid.j,
        "loss": total.item(),
        "loss_intact": float(np.mean([t.intact.item() for t in head_terms])),
        "loss_cross_view": float(np.mean([t.es1.item() for t in head_terms])),
        "loss_same_view": float(np.mean([t.es2.item() for t in head_terms])),
        "loss_spread": kol.item() if kol is not None else 0.0,
    }
    if not np.isfinite(report["loss"]):
        raise TrainingDiverged(state.step, report)

    state.student.zero_grad()
    total.backward()
    report["grad_norm"] = clip_gradients(state.student, s.clip_norm)
    _adam_step(state, lr, wd, freeze_policy(state))
    ema_update(state.teacher, state.student, mu)
    state.step += 1
    return report


def _adam_step(state: TrainState, lr: float, wd: float, frozen: frozenset[str]) -> None:
    s = state.sched
    t = state.step + 1
    bc1 = 1.0 - s.beta1**t
    bc2 = 1.0 - s.beta2**t
    for name, p in state.student.tensors.items():
        if name in frozen or p.grad is None:
            continue
        g = p.grad
        m = state.opt_m[name]
        v = state.opt_v[name]
        m *= s.beta1
        m += (1.0 - s.beta1) * g
        v *= s.beta2
        v += (1.0 - s.beta2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + s.adam_eps)
        if state.wd_apply[name]:
            update = update + wd * p.data
        p.data -= p.data.dtype.type(lr * state.lr_mults[name]) * update.astype(p.data.dtype)


def run_pretrain(
    spec: BackboneSpec,
    grid: ElasticGrid,
    heads_cfg: HeadsConfig,
    sampler_cfg: SamplerConfig,
    aug_cfg: AugmentConfig,
    sched: schedules.SchedConfig,
    images: np.ndarray,
    lam: float = 0.8,
    gamma: float = 0.1,
    same_view: bool = True,
    sk_iters: int = 3,
    log_path=None,
    on_checkpoint=None,
    ckpt_every: int = 0,
) -> TrainState:
    """Train on an in-memory image array (N, C, H, W) in [0, 1].

    Writes one JSON line per step to `log_path` if given. Calls
    `on_checkpoint(state)` every `ckpt_every` steps and once at the end.
    """
    images = np.asarray(images, dtype=np.dtype(sched.dtype))
    if images.ndim != 4:
        raise ValueError(f"expected (N, C, H, W) images, got shape {images.shape}")
    if len(images) < sched.batch_size:
        raise ValueError(f"need at least batch_size={sched.batch_size} images, got {len(images)}")
    state = TrainState.create(
        spec, grid, heads_cfg, sampler_cfg, aug_cfg, sched, len(images), lam, gamma, same_view, sk_iters
    )
    log = open(log_path, "w") if log_path else None
    try:
        while state.step < state.total_steps:
            order = state.rng_batch.permutation(len(images))
            for start in range(0, len(images) - sched.batch_size + 1, sched.batch_size):
                if state.step >= state.total_steps:
                    break
                batch = images[order[start : start + sched.batch_size]]
                views = augment(batch, aug_cfg, state.rng_augment)
                report = train_step(state, views)
                if log:
                    log.write(json.dumps(report) + "\n")
                if on_checkpoint is not None and ckpt_every > 0 and state.step % ckpt_every == 0:
                    on_checkpoint(state)
    finally:
        if log:
            log.close()
    if on_checkpoint is not None:
        on_checkpoint(state)
    return state
