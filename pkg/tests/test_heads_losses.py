"""Projection heads, Sinkhorn centering, and the distillation losses."""

import numpy as np
import pytest
from conftest import central_diff, grid_for, rel_err, tiny_heads, tiny_vit

from tridistill import kernel as K
from tridistill.grids import SubNetId
from tridistill.heads import HeadsConfig, head_forward
from tridistill.losses import (
    KOLEO_DISTANCE_FLOOR,
    HeadTerms,
    koleo,
    loss_elastic,
    loss_intact,
    loss_total,
    sk_center,
    teacher_probs,
)
from tridistill.slicing import ParamStore, materialize


def ce(target: np.ndarray, pred: np.ndarray) -> float:
    """Reference cross-entropy: batch mean of -sum(target * log pred)."""
    return float(-(target * np.log(pred)).sum(axis=1).mean())


def rand_probs(rng, b: int, p: int) -> np.ndarray:
    e = rng.random((b, p)) + 0.1
    return e / e.sum(axis=1, keepdims=True)


class TestHeadForward:
    def test_bottleneck_rows_unit_norm(self):
        # With an identity prototype matrix the logits expose the
        # normalized bottleneck directly.
        cfg = HeadsConfig(in_dim=16, hidden=12, bottleneck=6, prototypes=(6,))
        spec = tiny_vit()
        store = ParamStore.initialize(spec, cfg, seed=0)
        store.tensors["head0.proto.weight"].data[:] = np.eye(6, dtype=np.float32)
        pooled = K.constant(np.random.default_rng(0).random((5, 16), dtype=np.float32))
        logits = head_forward(store, 0, pooled)
        norms = np.linalg.norm(logits.data, axis=1)
        assert np.allclose(norms, 1.0, atol=1e-6)

    def test_zero_features_stay_finite(self):
        cfg = HeadsConfig(in_dim=16, hidden=12, bottleneck=6, prototypes=(8,))
        spec = tiny_vit()
        store = ParamStore.initialize(spec, cfg, seed=1)
        for name in store.names():
            if name.startswith("head"):
                store.tensors[name].data[:] = 0.0
        logits = head_forward(store, 0, K.constant(np.zeros((3, 16), dtype=np.float32)))
        assert np.isfinite(logits.data).all()

    def test_identity_slice_bit_exact(self):
        spec = tiny_vit()
        store = ParamStore.initialize(spec, tiny_heads(spec), seed=2)
        view = materialize(store, grid_for(spec, m=2, n=1), SubNetId(0, 0))
        pooled = K.constant(np.random.default_rng(1).random((4, 16), dtype=np.float32))
        a = head_forward(store, 0, pooled)
        b = head_forward(view, 0, pooled)
        assert np.array_equal(a.data, b.data)

    def test_width_mismatch_rejected(self):
        spec = tiny_vit()
        store = ParamStore.initialize(spec, tiny_heads(spec), seed=3)
        with pytest.raises(ValueError):
            head_forward(store, 0, K.constant(np.zeros((2, 8), dtype=np.float32)))

    def test_later_layers_share_storage(self):
        # An in-place change to a shared layer shows through both the
        # intact store and the elastic view.
        spec = tiny_vit()
        store = ParamStore.initialize(spec, tiny_heads(spec), seed=4)
        grid = grid_for(spec, m=2, n=1)
        view = materialize(store, grid, SubNetId(2, 0))
        assert view.get("head0.fc2.weight") is store.tensors["head0.fc2.weight"]
        pooled_full = K.constant(np.random.default_rng(2).random((3, 16), dtype=np.float32))
        pooled_thin = K.constant(np.random.default_rng(3).random((3, 8), dtype=np.float32))
        a0 = head_forward(store, 0, pooled_full).data.copy()
        b0 = head_forward(view, 0, pooled_thin).data.copy()
        store.tensors["head0.proto.weight"].data[:] *= 2.0
        assert not np.array_equal(head_forward(store, 0, pooled_full).data, a0)
        assert not np.array_equal(head_forward(view, 0, pooled_thin).data, b0)


class TestSinkhornCentering:
    def test_uniform_logits_stay_uniform(self):
        out = sk_center(np.zeros((4, 6)), n_iter=3, eps=0.07)
        assert np.allclose(out, 1.0 / 6.0, atol=1e-12)

    def test_hand_fixed_point(self):
        # exp(logits/eps) proportional to [[2,1],[1,2]] is already the
        # balanced fixed point [[2/3,1/3],[1/3,2/3]].
        eps = 0.07
        logits = eps * np.log(np.array([[2.0, 1.0], [1.0, 2.0]]))
        want = np.array([[2 / 3, 1 / 3], [1 / 3, 2 / 3]])
        for n_iter in (1, 3, 10):
            assert np.allclose(sk_center(logits, n_iter=n_iter, eps=eps), want, atol=1e-12)

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(0)
        out = sk_center(rng.normal(size=(8, 4)), n_iter=3, eps=0.05)
        assert np.allclose(out.sum(axis=1), 1.0, atol=1e-6)
        assert (out > 0).all()

    def test_row_shift_invariance(self):
        rng = np.random.default_rng(1)
        logits = rng.normal(size=(6, 5))
        shifted = logits + rng.normal(size=(6, 1))
        a = sk_center(logits, n_iter=3, eps=0.07)
        b = sk_center(shifted, n_iter=3, eps=0.07)
        assert np.allclose(a, b, atol=1e-12)

    def test_converged_column_mass_uniform(self):
        # At the balanced fixed point each prototype's column carries
        # B / P of the total mass.
        rng = np.random.default_rng(2)
        out = sk_center(rng.normal(size=(8, 4)), n_iter=100, eps=0.07)
        assert np.allclose(out.sum(axis=0), 8 / 4, atol=1e-6)

    def test_three_iterations_near_converged(self):
        # Logits at the scale the heads emit: unit-norm bottleneck rows
        # against a 0.02-std prototype matrix.
        rng = np.random.default_rng(3)
        z = rng.normal(size=(64, 32))
        z /= np.linalg.norm(z, axis=1, keepdims=True)
        logits = z @ rng.normal(0.0, 0.02, size=(16, 32)).T
        a = sk_center(logits, n_iter=3, eps=0.07)
        b = sk_center(logits, n_iter=100, eps=0.07)
        assert np.max(np.abs(a - b)) < 1e-3

    def test_rejects_bad_arguments(self):
        with pytest.raises(ValueError):
            sk_center(np.zeros((2, 2)), eps=0.0)
        with pytest.raises(ValueError):
            sk_center(np.zeros((2, 2)), n_iter=0)
        with pytest.raises(ValueError):
            sk_center(np.zeros(4))
        with pytest.raises(ValueError):
            sk_center(np.array([[np.nan, 0.0], [0.0, 0.0]]))


class TestTeacherProbs:
    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(4)
        p = teacher_probs(rng.normal(size=(5, 7)), tau=0.04)
        assert np.allclose(p.sum(axis=1), 1.0, atol=1e-6)
        assert (p > 0).all()

    def test_rejects_bad_temperature(self):
        with pytest.raises(ValueError):
            teacher_probs(np.zeros((2, 2)), tau=0.0)


class TestLossIntact:
    def test_matching_one_hot_is_zero(self):
        p = K.constant(np.array([[1.0, 0.0], [0.0, 1.0]]))
        assert loss_intact(p, p).data == pytest.approx(0.0, abs=1e-9)

    def test_uniform_target_averages_logs(self):
        rng = np.random.default_rng(5)
        pred = rand_probs(rng, 3, 4)
        p_a = K.constant(np.full((3, 4), 0.25))
        want = float(-np.log(pred).mean(axis=1).mean())
        got = loss_intact(p_a, K.constant(pred)).data
        assert rel_err(float(got), want) < 1e-12

    def test_random_instance_vs_hand_sum(self):
        rng = np.random.default_rng(6)
        p_a = rand_probs(rng, 2, 3)
        p_b1 = rand_probs(rng, 2, 3)
        l1, l2 = rand_probs(rng, 2, 3), rand_probs(rng, 2, 3)
        got = loss_intact(
            K.constant(p_a), K.constant(p_b1), [K.constant(l1), K.constant(l2)]
        ).data
        want = ce(p_a, p_b1) + 0.5 * (ce(p_a, l1) + ce(p_a, l2))
        assert rel_err(float(got), want) < 1e-12


class TestLossElastic:
    def test_self_target_gives_entropy(self):
        rng = np.random.default_rng(7)
        p = rand_probs(rng, 4, 5)
        _, es2 = loss_elastic(K.constant(rand_probs(rng, 4, 5)), K.constant(p), K.constant(p))
        entropy = float(-(p * np.log(p)).sum(axis=1).mean())
        assert rel_err(float(es2.data), entropy) < 1e-12

    def test_one_hot_teacher(self):
        p_a = np.array([[0.0, 1.0, 0.0]])
        p_b2 = np.array([[0.2, 0.5, 0.3]])
        es1, _ = loss_elastic(K.constant(p_a), K.constant(p_b2), K.constant(p_b2))
        assert rel_err(float(es1.data), -np.log(0.5)) < 1e-12

    def test_random_instance_vs_hand_sum(self):
        rng = np.random.default_rng(8)
        p_a, p_b1, p_b2 = (rand_probs(rng, 2, 3) for _ in range(3))
        la1, la2 = rand_probs(rng, 2, 3), rand_probs(rng, 2, 3)
        lb1, lb2 = rand_probs(rng, 2, 3), rand_probs(rng, 2, 3)
        es1, es2 = loss_elastic(
            K.constant(p_a),
            K.constant(p_b1),
            K.constant(p_b2),
            locals_b1=[K.constant(la1), K.constant(la2)],
            locals_b2=[K.constant(lb1), K.constant(lb2)],
        )
        want_es1 = ce(p_a, p_b2) + 0.5 * (ce(p_a, lb1) + ce(p_a, lb2))
        want_es2 = ce(p_b1, p_b2) + 0.5 * (ce(la1, lb1) + ce(la2, lb2))
        assert rel_err(float(es1.data), want_es1) < 1e-12
        assert rel_err(float(es2.data), want_es2) < 1e-12

    def test_same_view_target_is_detached(self):
        rng = np.random.default_rng(9)
        p_b1 = K.param(rand_probs(rng, 3, 4))
        p_b2 = K.param(rand_probs(rng, 3, 4))
        _, es2 = loss_elastic(K.constant(rand_probs(rng, 3, 4)), p_b1, p_b2)
        es2.backward()
        assert p_b1.grad is None
        assert p_b2.grad is not None

    def test_local_count_mismatch_rejected(self):
        p = K.constant(np.full((2, 2), 0.5))
        with pytest.raises(ValueError):
            loss_elastic(p, p, p, locals_b1=[p], locals_b2=[])


class TestLossTotal:
    def _terms(self, i: float, e1: float, e2: float) -> HeadTerms:
        return HeadTerms(K.constant(i), K.constant(e1), K.constant(e2))

    def test_hand_value(self):
        total = loss_total([self._terms(1.0, 2.0, 3.0)], lam=0.8, gamma=0.0)
        assert float(total.data) == pytest.approx(0.8 + 0.2 * 5.0)

    def test_lambda_one_drops_elastic(self):
        a = loss_total([self._terms(1.5, 2.0, 3.0)], lam=1.0, gamma=0.0)
        b = loss_total([self._terms(1.5, 9.0, -4.0)], lam=1.0, gamma=0.0)
        assert float(a.data) == float(b.data) == pytest.approx(1.5)

    def test_two_equal_heads_average(self):
        one = loss_total([self._terms(1.0, 2.0, 3.0)], lam=0.8, gamma=0.0)
        two = loss_total([self._terms(1.0, 2.0, 3.0)] * 2, lam=0.8, gamma=0.0)
        assert float(one.data) == pytest.approx(float(two.data))

    def test_same_view_off_drops_es2(self):
        total = loss_total([self._terms(1.0, 2.0, 3.0)], lam=0.8, gamma=0.0, same_view=False)
        assert float(total.data) == pytest.approx(0.8 + 0.2 * 2.0)

    def test_spread_penalty_scaled_by_gamma(self):
        base = loss_total([self._terms(1.0, 2.0, 3.0)], lam=0.8, gamma=0.0)
        with_k = loss_total(
            [self._terms(1.0, 2.0, 3.0)], lam=0.8, gamma=0.1, koleo_term=K.constant(4.0)
        )
        assert float(with_k.data) == pytest.approx(float(base.data) + 0.4)

    def test_monotone_in_each_term(self):
        base = float(loss_total([self._terms(1.0, 2.0, 3.0)], lam=0.8, gamma=0.0).data)
        assert float(loss_total([self._terms(1.1, 2.0, 3.0)], lam=0.8, gamma=0.0).data) > base
        assert float(loss_total([self._terms(1.0, 2.1, 3.0)], lam=0.8, gamma=0.0).data) > base
        assert float(loss_total([self._terms(1.0, 2.0, 3.1)], lam=0.8, gamma=0.0).data) > base

    def test_rejects_bad_weights(self):
        with pytest.raises(ValueError):
            loss_total([], lam=0.8, gamma=0.0)
        with pytest.raises(ValueError):
            loss_total([self._terms(1, 2, 3)], lam=1.2, gamma=0.0)
        with pytest.raises(ValueError):
            loss_total([self._terms(1, 2, 3)], lam=0.8, gamma=-0.1)


class TestKoleo:
    def test_orthogonal_pair(self):
        z = K.constant(np.array([[1.0, 0.0], [0.0, 1.0]]))
        # Each branch contributes -log(sqrt(2)).
        want = 2.0 * (-np.log(np.sqrt(2.0)))
        assert float(koleo(z, z).data) == pytest.approx(want, abs=1e-12)

    def test_duplicate_rows_clamped(self):
        z = K.constant(np.array([[1.0, 0.0], [1.0, 0.0]]))
        out = float(koleo(z, z).data)
        assert np.isfinite(out)
        assert out == pytest.approx(2.0 * -np.log(KOLEO_DISTANCE_FLOOR))

    def test_brute_force_oracle(self):
        rng = np.random.default_rng(10)
        z1 = rng.normal(size=(3, 4))
        z2 = rng.normal(size=(3, 4))

        def branch(z):
            zn = z / np.linalg.norm(z, axis=1, keepdims=True)
            total = 0.0
            for i in range(len(zn)):
                d = min(np.linalg.norm(zn[i] - zn[j]) for j in range(len(zn)) if j != i)
                total += np.log(max(d, KOLEO_DISTANCE_FLOOR))
            return -total / len(zn)

        got = float(koleo(K.constant(z1), K.constant(z2)).data)
        assert rel_err(got, branch(z1) + branch(z2)) < 1e-12

    def test_rejects_single_row(self):
        z = K.constant(np.ones((1, 4)))
        with pytest.raises(ValueError):
            koleo(z, z)

    def test_gradient_flows_to_features(self):
        rng = np.random.default_rng(11)
        z1 = K.param(rng.normal(size=(4, 3)))
        z2 = K.param(rng.normal(size=(4, 3)))
        koleo(z1, z2).backward()
        assert z1.grad is not None and np.abs(z1.grad).sum() > 0
        assert z2.grad is not None and np.abs(z2.grad).sum() > 0


class TestGradients:
    def test_teacher_receives_no_gradient(self):
        # Teacher targets pass through a numpy boundary, so even a
        # trainable teacher store accumulates nothing.
        K.set_default_dtype(np.float64)
        spec = tiny_vit()
        cfg = tiny_heads(spec)
        teacher = ParamStore.initialize(spec, cfg, seed=12, dtype=np.float64, trainable=True)
        student = ParamStore.initialize(spec, cfg, seed=13, dtype=np.float64, trainable=True)
        pooled = K.constant(np.random.default_rng(12).random((4, 16)))
        terms = []
        for h in range(cfg.count):
            t_logits = head_forward(teacher, h, pooled)
            p_a = K.constant(teacher_probs(t_logits.data, tau=0.04))
            p_b1 = K.softmax_t(head_forward(student, h, pooled), 0.1)
            p_b2 = K.softmax_t(head_forward(student, h, pooled), 0.1)
            es1, es2 = loss_elastic(p_a, p_b1, p_b2)
            terms.append(HeadTerms(loss_intact(p_a, p_b1), es1, es2))
        loss_total(terms, lam=0.8, gamma=0.0).backward()
        for name, t in teacher.tensors.items():
            assert t.grad is None, f"teacher parameter {name} received gradient"
        assert any(t.grad is not None for t in student.tensors.values())

    def test_losses_match_finite_differences(self):
        # Central differences on the composed objective, student logits
        # and spread features as the free variables.
        K.set_default_dtype(np.float64)
        rng = np.random.default_rng(13)
        x1 = rng.normal(size=(3, 4))
        x2 = rng.normal(size=(3, 4))
        zf = rng.normal(size=(3, 5))
        zf2 = rng.normal(size=(3, 5))
        p_a = K.constant(teacher_probs(rng.normal(size=(3, 4)), tau=0.04))
        # The same-view target is a stop-gradient, so hold it at the
        # unperturbed value while differencing; autodiff sees the same
        # cut, which is what makes the comparison meaningful.
        frozen_b1 = K.constant(K.softmax_t(K.constant(x1), 0.1).data)

        def build():
            t1, t2 = K.param(x1), K.param(x2)
            z1, z2 = K.param(zf), K.param(zf2)
            p_b1 = K.softmax_t(t1, 0.1)
            p_b2 = K.softmax_t(t2, 0.1)
            es1, es2 = loss_elastic(p_a, frozen_b1, p_b2)
            terms = [HeadTerms(loss_intact(p_a, p_b1), es1, es2)]
            return loss_total(terms, 0.8, 0.1, koleo(z1, z2)), (t1, t2, z1, z2)

        loss, params = build()
        loss.backward()
        grads = [p.grad.copy() for p in params]
        arrays = [x1, x2, zf]
        for arr, grad in zip(arrays, grads[:3]):
            for idx in [(0, 0), (1, 2), (2, 3)]:
                fd = central_diff(lambda: float(build()[0].data), arr, idx, h=1e-6)
                # Floor the denominator: differencing noise (~1e-10)
                # swamps pure relative error at near-zero coordinates.
                assert rel_err(grad[idx], fd, floor=1e-4) < 1e-4
