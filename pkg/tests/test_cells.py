import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from captionedit import autodiff as ad
from captionedit.cells import LstmState, copy_lstm_step, init_copy_lstm, init_lstm, lstm_step, zero_state


def _zero_weights(x_dim, hidden, copy=False):
    w = {}
    for g in "fiCo":
        w[f"W_{g}"] = ad.parameter(np.zeros((hidden + x_dim, hidden)))
        w[f"b_{g}"] = ad.parameter(np.zeros(hidden))
    if copy:
        w["W_n"] = ad.parameter(np.zeros((2 * hidden, hidden)))
    return w


def _state(rng, hidden, batch=None):
    shape = (hidden,) if batch is None else (batch, hidden)
    return LstmState(ad.tensor(rng.uniform(-1, 1, shape)), ad.tensor(rng.uniform(-3, 3, shape)))


class TestLstmStep:
    def test_zero_weights_halve_memory(self):
        c_prev = np.array([1.0, -2.0, 4.0])
        w = _zero_weights(2, 3)
        out = lstm_step(ad.tensor([0.7, -0.1]), LstmState(ad.tensor(np.zeros(3)), ad.tensor(c_prev)), w)
        np.testing.assert_array_equal(out.c.data, 0.5 * c_prev)
        np.testing.assert_array_equal(out.h.data, 0.5 * np.tanh(0.5 * c_prev))

    def test_all_zero(self):
        out = lstm_step(ad.tensor(np.zeros(2)), zero_state(3), _zero_weights(2, 3))
        np.testing.assert_array_equal(out.h.data, np.zeros(3))
        np.testing.assert_array_equal(out.c.data, np.zeros(3))

    def test_matches_reference_equations(self):
        rng = np.random.default_rng(0)
        w = init_lstm(rng, 4, 3)
        x = rng.normal(size=4)
        prev = _state(rng, 3)

        def sig(z):
            return 1 / (1 + np.exp(-z))
        hx = np.concatenate([prev.h.data, x])
        f = sig(hx @ w["W_f"].data + w["b_f"].data)
        i = sig(hx @ w["W_i"].data + w["b_i"].data)
        g = np.tanh(hx @ w["W_C"].data + w["b_C"].data)
        o = sig(hx @ w["W_o"].data + w["b_o"].data)
        c = f * prev.c.data + i * g
        out = lstm_step(x, prev, w)
        np.testing.assert_allclose(out.c.data, c, rtol=1e-13)
        np.testing.assert_allclose(out.h.data, o * np.tanh(c), rtol=1e-13)

    def test_dimension_mismatch(self):
        rng = np.random.default_rng(0)
        w = init_lstm(rng, 4, 3)
        with pytest.raises(ad.ShapeError):
            lstm_step(np.zeros(5), zero_state(3), w)
        with pytest.raises(ad.ShapeError):
            lstm_step(np.zeros(4), zero_state(2), w)

    def test_weight_shapes(self):
        w = init_lstm(np.random.default_rng(0), 4, 3, "enc.")
        for g in "fiCo":
            assert w[f"enc.W_{g}"].shape == (7, 3)
            assert w[f"enc.b_{g}"].shape == (3,)

    def test_gradients(self):
        rng = np.random.default_rng(1)
        w = init_lstm(rng, 4, 3)
        x = ad.parameter(rng.normal(size=(2, 4)), "x")
        prev = LstmState(ad.parameter(rng.uniform(-1, 1, (2, 3)), "h"), ad.parameter(rng.normal(size=(2, 3)), "c"))
        r = rng.normal(size=(2, 6))

        def f():
            s = lstm_step(x, prev, w)
            return ad.sum(ad.concat([s.h, s.c]) * r)
        assert ad.finite_diff_check(f, {**w, "x": x, "h": prev.h, "c": prev.c}) < 1e-6


class TestCopyLstmStep:
    def test_gate_one_copies_memory_exactly(self):
        rng = np.random.default_rng(0)
        w = init_copy_lstm(rng, 4, 3)
        cc = rng.normal(size=3)
        out = copy_lstm_step(rng.normal(size=4), _state(rng, 3), cc, w, gate_override=1.0)
        np.testing.assert_array_equal(out.c.data, cc)

    def test_gate_zero_is_plain_lstm(self):
        rng = np.random.default_rng(0)
        w = init_copy_lstm(rng, 4, 3)
        x, prev = rng.normal(size=4), _state(rng, 3)
        a = copy_lstm_step(x, prev, rng.normal(size=3), w, gate_override=0.0)
        b = lstm_step(x, prev, w)
        np.testing.assert_array_equal(a.h.data, b.h.data)
        np.testing.assert_array_equal(a.c.data, b.c.data)

    def test_half_gate_interpolates(self):
        # zero weights: gates 0.5 and candidate 0, so C_t = 2 and the mix with 4 is 3
        w = _zero_weights(1, 1, copy=True)
        prev = LstmState(ad.tensor([0.0]), ad.tensor([4.0]))
        out = copy_lstm_step([0.0], prev, [4.0], w, gate_override=0.5)
        assert out.c.data[0] == 3.0
        # with W_n = 0 the learned gate is sigmoid(0) = 0.5 as well
        trace = {}
        out = copy_lstm_step([0.0], prev, [4.0], w, trace=trace)
        assert out.c.data[0] == 3.0 and trace["copy_gate"][0] == 0.5

    def test_copied_memory_shape_checked(self):
        rng = np.random.default_rng(0)
        w = init_copy_lstm(rng, 4, 3)
        with pytest.raises(ad.ShapeError):
            copy_lstm_step(np.zeros(4), zero_state(3), np.zeros(2), w)

    def test_w_n_shape(self):
        w = init_copy_lstm(np.random.default_rng(0), 4, 3, "lang.")
        assert w["lang.W_n"].shape == (6, 3)

    def test_gradients_including_copied_memory(self):
        rng = np.random.default_rng(2)
        w = init_copy_lstm(rng, 4, 3)
        x = ad.parameter(rng.normal(size=(2, 4)), "x")
        cc = ad.parameter(rng.normal(size=(2, 3)), "c_copied")
        prev = LstmState(ad.parameter(rng.uniform(-1, 1, (2, 3)), "h"), ad.parameter(rng.normal(size=(2, 3)), "c"))
        r = rng.normal(size=(2, 6))

        def f():
            s = copy_lstm_step(x, prev, cc, w)
            return ad.sum(ad.concat([s.h, s.c]) * r)
        assert ad.finite_diff_check(f, {**w, "x": x, "c_copied": cc, "h": prev.h, "c": prev.c}) < 1e-6

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_mixed_memory_is_convex_and_h_bounded(self, seed):
        rng = np.random.default_rng(seed)
        w = init_copy_lstm(rng, 4, 5)
        for p in w.values():
            p.data = p.data * 4.0
        x, prev, cc = rng.normal(size=(3, 4)), _state(rng, 5, 3), rng.normal(scale=5.0, size=(3, 5))
        c_t = lstm_step(x, prev, w).c.data
        out = copy_lstm_step(x, prev, cc, w)
        lo, hi = np.minimum(c_t, cc), np.maximum(c_t, cc)
        assert np.all(out.c.data >= lo - 1e-12) and np.all(out.c.data <= hi + 1e-12)
        assert np.all(np.abs(out.h.data) <= 1.0)
        assert np.all(np.abs(lstm_step(x, prev, w).h.data) <= 1.0)


class TestReduction:
    def test_hundred_step_rollouts_bitwise(self):
        """Copy gate pinned to 0 reproduces a plain LSTM trajectory bit for bit."""
        rng = np.random.default_rng(7)
        w = init_copy_lstm(rng, 6, 8)
        xs = rng.normal(size=(100, 4, 6))
        copied = rng.normal(size=(100, 4, 8))
        a = b = zero_state(8, 4)
        for t in range(100):
            a = lstm_step(xs[t], a, w)
            b = copy_lstm_step(xs[t], b, copied[t], w, gate_override=0.0)
            assert np.array_equal(a.h.data, b.h.data) and np.array_equal(a.c.data, b.c.data)
