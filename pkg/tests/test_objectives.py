import math

import numpy as np
import pytest

from captionedit import autodiff as ad
from captionedit.data import PAD
from captionedit.objectives import (AdamState, ScstAnnealer, TrainingSchedule, adam_step, combined_loss,
                                    hidden_mse_loss, schedule_at, scst_loss, token_count, xe_loss, zero_grads)


class TestXe:
    def test_uniform_logits(self):
        assert xe_loss(np.zeros((2, 4)), [1, 2]).item() == pytest.approx(2 * math.log(4), rel=1e-15)

    def test_batch_average_and_padding(self):
        logits = np.zeros((2, 3, 4))
        targets = np.array([[1, 2, 3], [1, PAD, PAD]])
        assert xe_loss(logits, targets).item() == pytest.approx(4 * math.log(4) / 2, rel=1e-15)
        assert token_count(targets) == 4

    def test_gradient_is_softmax_minus_onehot(self):
        rng = np.random.default_rng(0)
        z = ad.parameter(rng.normal(size=(1, 5)))
        ad.backward(xe_loss(z, [3]))
        p = np.exp(z.data - z.data.max())
        p /= p.sum()
        np.testing.assert_allclose(z.grad, p - np.eye(5)[3], rtol=1e-12, atol=1e-15)

    def test_validation(self):
        with pytest.raises(ad.ShapeError):
            xe_loss(np.zeros((2, 4)), [1])
        with pytest.raises(ValueError):
            xe_loss(np.zeros((1, 4)), [4])

    def test_finite_difference(self):
        rng = np.random.default_rng(1)
        z = ad.parameter(rng.normal(size=(2, 3, 6)))
        t = np.array([[1, 2, 0], [5, 0, 0]])
        assert ad.finite_diff_check(lambda: xe_loss(z, t), {"z": z}) < 1e-6


class TestMse:
    def test_identity_projection(self):
        h = ad.parameter(np.array([[1.0, 2.0], [0.0, -1.0]]))
        target = np.array([[0.0, 2.0], [1.0, 1.0]])
        loss = hidden_mse_loss(h, target, ad.tensor(np.eye(2)), ad.tensor(np.zeros(2)))
        assert loss.item() == pytest.approx((1 + 0 + 1 + 4) / 4, rel=1e-15)
        ad.backward(loss)
        np.testing.assert_allclose(h.grad, 2 * (h.data - target) / 4, rtol=1e-15)

    def test_target_is_constant(self):
        h = ad.parameter(np.ones((1, 2)))
        target = ad.parameter(np.zeros((1, 2)))
        ad.backward(hidden_mse_loss(h, target, ad.parameter(np.eye(2)), ad.parameter(np.zeros(2))))
        assert target.grad is None or not target.grad.any()

    def test_shape_mismatch(self):
        with pytest.raises(ad.ShapeError):
            hidden_mse_loss(np.ones((1, 2)), np.ones((1, 3)), np.eye(2), np.zeros(2))

    def test_combined(self):
        assert combined_loss(ad.tensor(1.5), ad.tensor(0.25)).item() == 1.75


class TestScst:
    def test_gradient_sign(self):
        lp = ad.parameter(np.array([-2.0, -3.0]))
        ad.backward(scst_loss(lp, [1.0, 0.2], [0.5, 0.5]))
        # better-than-greedy samples are pushed up, worse ones down
        np.testing.assert_allclose(lp.grad, [-0.25, 0.15], rtol=1e-15)

    def test_tied_rewards_give_zero_gradient(self):
        lp = ad.parameter(np.array([-1.0, -4.0, -0.5]))
        ad.backward(scst_loss(lp, [0.3, 0.7, 1.0], [0.3, 0.7, 1.0]))
        assert not lp.grad.any()

    def test_non_finite_reward(self):
        with pytest.raises(ValueError):
            scst_loss(ad.tensor([-1.0]), [math.nan], [0.0])


class TestAdam:
    def test_first_step_moves_by_lr(self):
        p = ad.parameter(np.array([1.0, -2.0, 3.0]))
        p.grad = np.array([0.5, -4.0, 1e-3])
        adam_step({"p": p}, AdamState(lr=0.1))
        # bias-corrected first step is lr * g / (|g| + eps)
        np.testing.assert_allclose(p.data, [0.9, -1.9, 2.9], rtol=0, atol=1e-6)

    def test_skips_parameters_without_gradient(self):
        a, b = ad.parameter(np.ones(2)), ad.parameter(np.ones(2))
        a.grad = np.ones(2)
        st = AdamState(lr=0.5)
        adam_step({"a": a, "b": b}, st)
        assert b.data.tolist() == [1.0, 1.0] and "b" not in st.m and st.step == 1

    def test_rejects_non_finite_gradient(self):
        p = ad.parameter(np.ones(2))
        p.grad = np.array([1.0, math.inf])
        with pytest.raises(ValueError):
            adam_step({"p": p}, AdamState())

    def test_minimises_convex_quadratic(self):
        A = np.array([[3.0, 0.5], [0.5, 1.0]])
        target = np.array([1.0, -2.0])
        x = ad.parameter(np.zeros(2))
        st = AdamState(lr=0.05)
        for _ in range(2000):
            zero_grads({"x": x})
            d = x - ad.tensor(target)
            ad.backward(ad.sum(d * ad.matmul(d, ad.tensor(A))))
            adam_step({"x": x}, st)
        np.testing.assert_allclose(x.data, target, atol=1e-3)

    def test_zero_grads(self):
        p = ad.parameter(np.ones(2))
        p.grad = np.ones(2)
        zero_grads({"p": p})
        assert p.grad is None


class TestSchedules:
    def test_learning_rate_and_sampling(self):
        s = TrainingSchedule(base_lr=5e-4, decay=0.8, decay_every=3, ss_increment=0.05, ss_every=5)
        assert schedule_at(0, s) == (5e-4, 0.0)
        assert schedule_at(2, s)[0] == 5e-4
        assert schedule_at(3, s)[0] == pytest.approx(4e-4, rel=1e-15)
        assert schedule_at(7, s)[0] == pytest.approx(5e-4 * 0.64, rel=1e-15)
        assert schedule_at(5, s)[1] == pytest.approx(0.05)
        assert schedule_at(14, s)[1] == pytest.approx(0.10)

    def test_sampling_capped(self):
        s = TrainingSchedule(ss_increment=0.5, ss_every=1, ss_max=0.75)
        assert schedule_at(10, s)[1] == 0.75

    def test_validation(self):
        with pytest.raises(ValueError):
            schedule_at(-1, TrainingSchedule())
        with pytest.raises(ValueError):
            TrainingSchedule(base_lr=0.0)
        with pytest.raises(ValueError):
            TrainingSchedule(ss_max=1.5)

    def test_scst_annealer(self):
        a = ScstAnnealer(TrainingSchedule(scst_lr=5e-5, scst_anneal=0.5))
        assert a.update(1.0) == 5e-5
        assert a.update(1.2) == 5e-5
        assert a.update(1.1) == 2.5e-5
        assert a.update(1.2) == 1.25e-5
        assert a.update(1.3) == 1.25e-5
