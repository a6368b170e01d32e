"""Distillation losses over prototype distributions.

Three cross-entropy terms train the two student branches against soft
targets: the intact student matches the teacher across views, the
elastic student matches both the teacher (cross-view) and the intact
student (same view). Teacher targets are centered with a few rounds of
Sinkhorn-Knopp normalization before their temperature softmax; the
intact-student targets for the same-view term use the student
temperature and no centering, and are detached.

A nearest-neighbor spread penalty (negative mean log distance between
L2-normalized pooled features) discourages feature collapse; it applies
to the global-view features of both student branches.
"""

from __future__ import annotations

from typing import NamedTuple, Sequence

import numpy as np

from . import kernel as K

CE_FLOOR = 1e-12
KOLEO_DISTANCE_FLOOR = 1e-8


def sk_center(logits: np.ndarray, n_iter: int = 3, eps: float = 0.07) -> np.ndarray:
    """Balance a (B, P) logit batch toward uniform prototype usage.

    Alternately normalizes prototype (column) and sample (row) masses of
    exp(logits / eps) and ends on the row step, so every row is a
    probability distribution and column masses approach B / P. Row-wise
    max subtraction makes the result exactly invariant to per-row logit
    offsets and keeps the exp finite.
    """
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    if n_iter < 1:
        raise ValueError(f"n_iter must be >= 1, got {n_iter}")
    x = np.asarray(logits)
    if x.ndim != 2:
        raise ValueError(f"expected (B, P) logits, got shape {x.shape}")
    if not np.isfinite(x).all():
        raise ValueError("logits must be finite")
    scaled = x / eps
    m = np.exp(scaled - scaled.max(axis=1, keepdims=True))
    for _ in range(n_iter):
        m = m / m.sum(axis=0, keepdims=True)
        m = m / m.sum(axis=1, keepdims=True)
    return m


def teacher_probs(logits: np.ndarray, tau: float, n_iter: int = 3) -> np.ndarray:
    """Teacher target distribution: temperature softmax of the centered logits."""
    if tau <= 0:
        raise ValueError(f"teacher temperature must be positive, got {tau}")
    q = sk_center(logits, n_iter=n_iter, eps=tau) / tau
    q = q - q.max(axis=1, keepdims=True)
    e = np.exp(q)
    return e / e.sum(axis=1, keepdims=True)


def _local_mean(target: K.Tensor, locals_: Sequence[K.Tensor]) -> K.Tensor | None:
    if not locals_:
        return None
    terms = [K.cross_entropy(target, p, floor=CE_FLOOR) for p in locals_]
    total = terms[0]
    for t in terms[1:]:
        total = K.add(total, t)
    return K.scale(total, 1.0 / len(terms))


def loss_intact(p_a: K.Tensor, p_b1: K.Tensor, locals_b1: Sequence[K.Tensor] = ()) -> K.Tensor:
    """Intact-student loss: teacher targets for the global view plus the
    mean over local views."""
    loss = K.cross_entropy(p_a, p_b1, floor=CE_FLOOR)
    local = _local_mean(p_a, locals_b1)
    return loss if local is None else K.add(loss, local)


def loss_elastic(
    p_a: K.Tensor,
    p_b1: K.Tensor,
    p_b2: K.Tensor,
    locals_b1: Sequence[K.Tensor] = (),
    locals_b2: Sequence[K.Tensor] = (),
) -> tuple[K.Tensor, K.Tensor]:
    """Elastic-student losses (cross-view, same-view).

    The cross-view term matches the teacher targets; the same-view term
    matches the intact student's distributions, detached, view by view
    (global against global, l-th local against l-th local).
    """
    if len(locals_b1) != len(locals_b2):
        raise ValueError(f"local view counts differ: {len(locals_b1)} vs {len(locals_b2)}")
    es1 = K.cross_entropy(p_a, p_b2, floor=CE_FLOOR)
    local = _local_mean(p_a, locals_b2)
    if local is not None:
        es1 = K.add(es1, local)
    es2 = K.cross_entropy(p_b1.detach(), p_b2, floor=CE_FLOOR)
    if locals_b2:
        pairwise = [
            K.cross_entropy(l1.detach(), l2, floor=CE_FLOOR) for l1, l2 in zip(locals_b1, locals_b2)
        ]
        total = pairwise[0]
        for t in pairwise[1:]:
            total = K.add(total, t)
        es2 = K.add(es2, K.scale(total, 1.0 / len(pairwise)))
    return es1, es2


class HeadTerms(NamedTuple):
    intact: K.Tensor
    es1: K.Tensor
    es2: K.Tensor


def loss_total(
    head_terms: Sequence[HeadTerms],
    lam: float,
    gamma: float,
    koleo_term: K.Tensor | None = None,
    same_view: bool = True,
) -> K.Tensor:
    """Combine per-head terms: mean over heads of
    lam * intact + (1 - lam) * (cross-view + same-view), plus the spread
    penalty weighted by gamma. `same_view=False` drops that term (an
    ablation switch)."""
    if not head_terms:
        raise ValueError("need at least one head")
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must be in [0, 1], got {lam}")
    if gamma < 0.0:
        raise ValueError(f"gamma must be non-negative, got {gamma}")
    total: K.Tensor | None = None
    for terms in head_terms:
        elastic = K.add(terms.es1, terms.es2) if same_view else terms.es1
        head_loss = K.add(K.scale(terms.intact, lam), K.scale(elastic, 1.0 - lam))
        total = head_loss if total is None else K.add(total, head_loss)
    total = K.scale(total, 1.0 / len(head_terms))
    if koleo_term is not None and gamma > 0.0:
        total = K.add(total, K.scale(koleo_term, gamma))
    return total


def _koleo_branch(z: K.Tensor) -> K.Tensor:
    """Negative mean log nearest-neighbor distance of L2-normalized rows."""
    if z.ndim != 2 or z.shape[0] < 2:
        raise ValueError(f"spread penalty needs a (B>=2, D) batch, got shape {z.shape}")
    b = z.shape[0]
    zn = K.l2_normalize(z)
    # Nearest neighbors are chosen on detached values; gradients then flow
    # through the selected pair distances only.
    data = zn.data
    sq = (data * data).sum(axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (data @ data.T)
    np.fill_diagonal(d2, np.inf)
    nearest = d2.argmin(axis=1)
    select = np.zeros((b, b), dtype=data.dtype)
    select[np.arange(b), nearest] = 1.0
    diff = K.add(zn, K.scale(K.matmul(K.constant(select, dtype=zn.dtype), zn), -1.0))
    dist2 = K.sum_(K.mul(diff, diff), axis=1)
    logs = K.log(K.clamp_min(dist2, KOLEO_DISTANCE_FLOOR**2))
    return K.scale(K.mean(logs), -0.5)


def koleo(z_b1: K.Tensor, z_b2: K.Tensor) -> K.Tensor:
    """Spread penalty summed over the two student branches."""
    return K.add(_koleo_branch(z_b1), _koleo_branch(z_b2))
