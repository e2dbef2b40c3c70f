import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from captionedit import autodiff as ad
from captionedit.attention import (MaskTape, additive_attention, context_gate, init_additive, init_context_gate,
                                   scma_masks, scma_select, soft_attend, visual_attend)


def _attn(rng, key_dim=4, query_dim=3, attn_dim=5, prefix=""):
    return init_additive(rng, key_dim, query_dim, attn_dim, prefix)


class TestAdditiveAttention:
    def test_single_key(self):
        rng = np.random.default_rng(0)
        w = _attn(rng)
        a = additive_attention(rng.normal(size=3), rng.normal(size=(1, 4)), w)
        np.testing.assert_array_equal(a.data, [1.0])

    def test_identical_keys_uniform(self):
        rng = np.random.default_rng(0)
        w = _attn(rng)
        keys = np.tile(rng.normal(size=4), (5, 1))
        a = additive_attention(rng.normal(size=3), keys, w)
        np.testing.assert_array_equal(a.data, np.full(5, 0.2))

    def test_reference_formula(self):
        rng = np.random.default_rng(1)
        w = _attn(rng)
        q, keys = rng.normal(size=(2, 3)), rng.normal(size=(2, 6, 4))
        scores = np.tanh(keys @ w["W_s"].data + (q @ w["W_h"].data)[:, None, :]) @ w["w_a"].data
        ref = np.exp(scores - scores.max(-1, keepdims=True))
        ref /= ref.sum(-1, keepdims=True)
        np.testing.assert_allclose(additive_attention(q, keys, w).data, ref, rtol=1e-13)

    def test_zero_keys_rejected(self):
        rng = np.random.default_rng(0)
        with pytest.raises(ValueError):
            additive_attention(rng.normal(size=3), np.zeros((0, 4)), _attn(rng))

    def test_mask_zeroes_padding(self):
        rng = np.random.default_rng(0)
        a = additive_attention(rng.normal(size=(2, 3)), rng.normal(size=(2, 4, 4)), _attn(rng),
                               mask=np.array([[True] * 4, [True, True, False, False]]))
        assert a.data[1, 2] == 0.0 and a.data[1, 3] == 0.0
        np.testing.assert_allclose(a.data.sum(-1), 1.0, atol=1e-15)

    def test_gradients(self):
        rng = np.random.default_rng(2)
        w = _attn(rng)
        q, keys = ad.parameter(rng.normal(size=(2, 3)), "q"), ad.parameter(rng.normal(size=(2, 5, 4)), "keys")
        r = rng.normal(size=(2, 5))
        err = ad.finite_diff_check(lambda: ad.sum(additive_attention(q, keys, w) * r), {**w, "q": q, "keys": keys})
        assert err < 1e-6


class TestSoftAttend:
    def test_selection_limit(self):
        values = np.array([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(soft_attend([1.0, 0.0], values).data, values[0])

    def test_identical_values(self):
        v = np.array([0.3, -1.7, 2.2])
        out = soft_attend(np.full(3, 1 / 3), np.tile(v, (3, 1))).data
        np.testing.assert_allclose(out, v, rtol=1e-15)

    def test_weighted_mean(self):
        assert soft_attend([0.25, 0.75], [[0.0], [4.0]]).data[0] == 3.0

    def test_length_mismatch(self):
        with pytest.raises(ad.ShapeError):
            soft_attend([0.5, 0.5], np.zeros((3, 2)))


class TestScmaSelect:
    def test_coefficients(self):
        m_b, m_s = scma_masks(np.array([0.8, 0.2]))
        coeff = np.array([0.8, 0.2]) * m_b + m_s
        np.testing.assert_array_equal(coeff, [1.0, 0.0])
        m_b, m_s = scma_masks(np.array([0.3, 0.7]))
        np.testing.assert_array_equal(np.array([0.3, 0.7]) * m_b + m_s, [0.0, 1.0])

    def test_tie_picks_lowest_index(self):
        mem = np.array([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(scma_select([0.5, 0.5], mem).data, mem[0])
        m_b, _ = scma_masks(np.array([[0.2, 0.4, 0.4]]))
        np.testing.assert_array_equal(m_b, [[0.0, 1.0, 0.0]])

    def test_length_mismatch(self):
        with pytest.raises(ad.ShapeError):
            scma_select([0.5, 0.5], np.zeros((3, 2)))

    @settings(max_examples=300, deadline=None)
    @given(arrays(np.float64, st.integers(1, 9), elements=st.floats(1e-6, 1.0)))
    def test_mask_identity_exact(self, raw):
        alpha = raw / raw.sum()
        m_b, m_s = scma_masks(alpha)
        coeff = alpha * m_b + m_s
        j = int(np.argmax(alpha))
        assert coeff[j] == 1.0
        assert np.all(np.delete(coeff, j) == 0.0)

    def test_forward_equals_indexing(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            n, h = rng.integers(1, 8), rng.integers(1, 6)
            alpha = rng.dirichlet(np.ones(n))
            mem = rng.normal(scale=10.0, size=(n, h))
            assert np.array_equal(scma_select(alpha, mem).data, mem[np.argmax(alpha)])

    def test_batched(self):
        rng = np.random.default_rng(1)
        alpha = rng.dirichlet(np.ones(5), size=3)
        mem = rng.normal(size=(3, 5, 4))
        out = scma_select(alpha, mem).data
        np.testing.assert_array_equal(out, mem[np.arange(3), alpha.argmax(-1)])

    def test_straight_through_gradients(self):
        rng = np.random.default_rng(2)
        alpha = ad.parameter(np.array([0.1, 0.6, 0.3]))
        mem = ad.parameter(rng.normal(size=(3, 4)))
        up = rng.normal(size=4)
        ad.backward(ad.sum(scma_select(alpha, mem) * up))
        np.testing.assert_array_equal(alpha.grad, [0.0, mem.data[1] @ up, 0.0])
        np.testing.assert_array_equal(mem.grad[[0, 2]], 0.0)
        np.testing.assert_array_equal(mem.grad[1], up)

    def test_zero_gradients_against_small_perturbations(self):
        """Non-selected weights and memories: finite differences with eps < gap/4 are zero too."""
        rng = np.random.default_rng(3)
        a0 = np.array([0.15, 0.5, 0.35])
        gap = 0.5 - 0.35
        alpha = ad.parameter(a0.copy(), "alpha")
        mem = ad.parameter(rng.normal(size=(3, 4)), "mem")
        up = rng.normal(size=4)
        tape = MaskTape()

        def f():
            with tape.session():
                return ad.sum(scma_select(alpha, mem) * up)
        rep = ad.gradient_report(f, {"alpha": alpha, "mem": mem}, eps=gap / 8)
        assert rep.max_error < 1e-6 and rep.skipped == 0
        # free perturbation (masks recomputed): output ignores every alpha entry
        for i in range(3):
            hi, lo = a0.copy(), a0.copy()
            hi[i] += gap / 8
            lo[i] -= gap / 8
            assert np.array_equal(scma_select(hi, mem.data).data, scma_select(lo, mem.data).data)

    def test_gradient_through_attention(self):
        rng = np.random.default_rng(4)
        w = _attn(rng)
        q, keys = ad.parameter(rng.normal(size=(2, 3)), "q"), ad.parameter(rng.normal(size=(2, 5, 4)), "keys")
        mem = ad.parameter(rng.normal(size=(2, 5, 3)), "mem")
        r = rng.normal(size=(2, 3))
        tape = MaskTape()

        def f():
            with tape.session():
                return ad.sum(scma_select(additive_attention(q, keys, w), mem) * r)
        rep = ad.gradient_report(f, {**w, "q": q, "keys": keys, "mem": mem})
        assert rep.max_error < 1e-6
        assert tape.flips == rep.skipped

    def test_soft_mode_equals_soft_attend(self):
        rng = np.random.default_rng(5)
        alpha, mem = rng.dirichlet(np.ones(4)), rng.normal(size=(4, 3))
        np.testing.assert_array_equal(soft_attend(alpha, mem).data, (alpha[:, None] * mem).sum(0))


class TestMaskTape:
    def test_replay_and_flip(self):
        tape = MaskTape()
        mem = np.eye(3)
        with tape.session():
            scma_select([0.2, 0.5, 0.3], mem)
        with tape.session():
            out = scma_select([0.2, 0.45, 0.35], mem)
        # the replayed shifting mask still holds 1 - 0.5 from the recording
        np.testing.assert_allclose(out.data, 0.95 * mem[1], rtol=1e-15)
        with pytest.raises(ad.SkipCoordinate):
            with tape.session():
                scma_select([0.5, 0.2, 0.3], mem)
        assert tape.flips == 1

    def test_inactive_outside_session(self):
        tape = MaskTape()
        with tape.session():
            assert MaskTape.current() is tape
        assert MaskTape.current() is None


class TestContextGate:
    def _setup(self, rng):
        w = init_context_gate(rng, 3, 4, 5, "g.")
        return w, rng.normal(size=(2, 3)), rng.normal(size=(2, 4)), rng.normal(size=(2, 5))

    def test_gate_one_keeps_source(self):
        rng = np.random.default_rng(0)
        w, word, h, c = self._setup(rng)
        out = context_gate(word, h, c, w, "g.", gate_override=1.0)
        np.testing.assert_array_equal(out.data, np.tanh(c @ w["g.W_src"].data))

    def test_gate_zero_keeps_target(self):
        rng = np.random.default_rng(0)
        w, word, h, c = self._setup(rng)
        out = context_gate(word, h, c, w, "g.", gate_override=0.0)
        np.testing.assert_array_equal(out.data, np.tanh(np.concatenate([word, h], -1) @ w["g.W_t"].data))

    def test_reference_formula(self):
        rng = np.random.default_rng(1)
        w, word, h, c = self._setup(rng)
        z = 1 / (1 + np.exp(-(np.concatenate([word, h, c], -1) @ w["g.W_Z"].data)))
        ref = z * np.tanh(c @ w["g.W_src"].data) + (1 - z) * np.tanh(np.concatenate([word, h], -1) @ w["g.W_t"].data)
        np.testing.assert_allclose(context_gate(word, h, c, w, "g.").data, ref, rtol=1e-13)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_bounded(self, seed):
        rng = np.random.default_rng(seed)
        w, word, h, c = self._setup(rng)
        out = context_gate(word * 50, h * 50, c * 50, w, "g.")
        assert np.all(np.abs(out.data) <= 1.0)

    def test_dimension_mismatch(self):
        rng = np.random.default_rng(0)
        w, word, h, c = self._setup(rng)
        with pytest.raises(ad.ShapeError):
            context_gate(word, h, c[:, :3], w, "g.")

    def test_gradients(self):
        rng = np.random.default_rng(2)
        w, word, h, c = self._setup(rng)
        word, h, c = ad.parameter(word, "word"), ad.parameter(h, "h"), ad.parameter(c, "c")
        r = rng.normal(size=(2, 4))
        err = ad.finite_diff_check(lambda: ad.sum(context_gate(word, h, c, w, "g.") * r),
                                   {**w, "word": word, "h": h, "c": c})
        assert err < 1e-6


class TestVisualAttend:
    def test_single_feature(self):
        rng = np.random.default_rng(0)
        w = _attn(rng, prefix="vis.")
        v = rng.normal(size=(1, 4))
        np.testing.assert_array_equal(visual_attend(rng.normal(size=3), v, w).data, v[0])

    def test_identical_features(self):
        rng = np.random.default_rng(0)
        w = _attn(rng, prefix="vis.")
        v = np.tile(rng.normal(size=4), (6, 1))
        for _ in range(3):
            np.testing.assert_allclose(visual_attend(rng.normal(size=3), v, w).data, v[0], rtol=1e-14)

    def test_no_features_rejected(self):
        rng = np.random.default_rng(0)
        with pytest.raises(ad.ShapeError):
            visual_attend(rng.normal(size=3), np.zeros((0, 4)), _attn(rng, prefix="vis."))

    def test_gradients(self):
        rng = np.random.default_rng(3)
        w = _attn(rng, prefix="vis.")
        q, v = ad.parameter(rng.normal(size=(2, 3)), "q"), ad.parameter(rng.normal(size=(2, 5, 4)), "v")
        r = rng.normal(size=(2, 4))
        assert ad.finite_diff_check(lambda: ad.sum(visual_attend(q, v, w) * r), {**w, "q": q, "v": v}) < 1e-6
