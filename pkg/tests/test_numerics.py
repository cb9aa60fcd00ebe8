import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from fewshot_tsad.errors import DataError, NonFiniteError, ShapeError
from fewshot_tsad.numerics import (
    AdamState,
    LstmCellParams,
    Layout,
    adam_step,
    clip_global_norm,
    finite_difference_check,
    init_lstm_cell,
    linear_backward,
    linear_forward,
    log_softmax,
    lstm_cell_backward,
    lstm_cell_forward,
    lstm_sequence_backward,
    lstm_sequence_forward,
    pack_params,
    read_params,
    softmax,
    unpack_params,
    write_params,
)

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


def _cell_loss(D, H, seed, batch=None):
    """Scalar loss through one cell with fixed random projections of h' and c'."""
    rng = np.random.default_rng(seed)
    p = init_lstm_cell(D, H, rng)
    shape = (D,) if batch is None else (batch, D)
    x = rng.normal(size=shape)
    h = rng.normal(size=shape[:-1] + (H,))
    c = rng.normal(size=shape[:-1] + (H,))
    wh = rng.normal(size=h.shape)
    wc = rng.normal(size=c.shape)
    sizes = [p.W_ih.size, p.W_hh.size, p.b.size]

    def unflat(theta):
        a, b = sizes[0], sizes[0] + sizes[1]
        return LstmCellParams(theta[:a].reshape(p.W_ih.shape), theta[a:b].reshape(p.W_hh.shape), theta[b:])

    def f(theta):
        q = unflat(theta)
        h1, c1, cache = lstm_cell_forward(x, h, c, q)
        loss = float(np.sum(wh * h1) + np.sum(wc * c1 ** 2))
        _, _, _, g = lstm_cell_backward(cache, wh, 2 * wc * c1)
        return loss, np.concatenate([g.W_ih.ravel(), g.W_hh.ravel(), g.b])

    theta = np.concatenate([p.W_ih.ravel(), p.W_hh.ravel(), p.b])
    return f, theta, (x, h, c, p, wh, wc)


class TestLstmCell:
    def test_zero_everything_gives_zero_state(self):
        p = LstmCellParams.zeros(3, 4)
        h, c, _ = lstm_cell_forward(np.array([1.0, -2.0, 3.0]), np.zeros(4), np.zeros(4), p)
        assert np.array_equal(h, np.zeros(4))
        assert np.array_equal(c, np.zeros(4))

    def test_saturated_forget_gate_keeps_cell(self):
        H = 3
        p = LstmCellParams.zeros(2, H)
        p.b[H:2 * H] = 10.0
        c0 = np.ones(H)
        _, c, _ = lstm_cell_forward(np.zeros(2), np.zeros(H), c0, p)
        sig10 = 1.0 / (1.0 + np.exp(-10.0))
        np.testing.assert_allclose(c, sig10 * c0, rtol=1e-14)
        assert np.all(np.abs(c - 0.99995 * c0) < 1e-5)

    def test_backward_matches_finite_differences(self):
        f, theta, _ = _cell_loss(3, 4, seed=11)
        assert finite_difference_check(f, theta) < 1e-6

    def test_batched_backward_matches_finite_differences(self):
        f, theta, _ = _cell_loss(3, 4, seed=5, batch=6)
        assert finite_difference_check(f, theta) < 1e-6

    def test_input_gradients(self):
        _, _, (x, h, c, p, wh, wc) = _cell_loss(3, 4, seed=2)
        h1, c1, cache = lstm_cell_forward(x, h, c, p)
        dx, dh, dc, _ = lstm_cell_backward(cache, wh, 2 * wc * c1)

        def loss(x_, h_, c_):
            a, b, _ = lstm_cell_forward(x_, h_, c_, p)
            return np.sum(wh * a) + np.sum(wc * b ** 2)

        eps = 1e-6
        for arr, grad, pos in ((x, dx, 0), (h, dh, 1), (c, dc, 2)):
            for k in range(arr.size):
                args = [x.copy(), h.copy(), c.copy()]
                args[pos][k] += eps
                up = loss(*args)
                args[pos][k] -= 2 * eps
                down = loss(*args)
                assert grad[k] == pytest.approx((up - down) / (2 * eps), rel=1e-6, abs=1e-9)

    def test_zero_upstream_gradient(self):
        _, _, (x, h, c, p, wh, wc) = _cell_loss(2, 3, seed=3)
        _, _, cache = lstm_cell_forward(x, h, c, p)
        dx, dh, dc, g = lstm_cell_backward(cache, np.zeros(3), np.zeros(3))
        for a in (dx, dh, dc, g.W_ih, g.W_hh, g.b):
            assert not np.any(a)

    def test_unused_recurrent_weight_has_no_gradient(self):
        # zero initial hidden state: W_hh never touches anything in a single step
        p = init_lstm_cell(2, 1, np.random.default_rng(0))
        _, _, cache = lstm_cell_forward(np.zeros(2), np.zeros(1), np.array([0.3]), p)
        _, _, _, g = lstm_cell_backward(cache, np.ones(1), np.ones(1))
        assert np.array_equal(g.W_hh, np.zeros((4, 1)))
        assert np.array_equal(g.W_ih, np.zeros((4, 2)))

    def test_shape_errors(self):
        p = LstmCellParams.zeros(3, 4)
        with pytest.raises(ShapeError):
            lstm_cell_forward(np.zeros(2), np.zeros(4), np.zeros(4), p)
        with pytest.raises(ShapeError):
            lstm_cell_forward(np.zeros(3), np.zeros(5), np.zeros(4), p)
        with pytest.raises(ShapeError):
            LstmCellParams(np.zeros((8, 3)), np.zeros((8, 3)), np.zeros(8))

    def test_non_finite_input(self):
        p = LstmCellParams.zeros(2, 2)
        with pytest.raises(NonFiniteError):
            lstm_cell_forward(np.array([np.nan, 0.0]), np.zeros(2), np.zeros(2), p)

    def test_mismatched_gradient_rejected(self):
        p = LstmCellParams.zeros(2, 2)
        _, _, cache = lstm_cell_forward(np.zeros(2), np.zeros(2), np.zeros(2), p)
        with pytest.raises(ShapeError):
            lstm_cell_backward(cache, np.zeros(3), np.zeros(3))
        with pytest.raises(ShapeError):
            lstm_cell_backward(cache, np.zeros((1, 2)), np.zeros((1, 2)))
        with pytest.raises(TypeError):
            lstm_cell_backward(object(), np.zeros(2), np.zeros(2))

    def test_stale_cache_rejected(self):
        p = LstmCellParams.zeros(2, 2)
        _, _, cache = lstm_cell_forward(np.zeros(2), np.zeros(2), np.zeros(2), p)
        cache.params = LstmCellParams.zeros(3, 2)
        with pytest.raises(ShapeError):
            lstm_cell_backward(cache, np.zeros(2), np.zeros(2))


class TestLstmSequence:
    @pytest.mark.parametrize("T,B,D,H", [(1, 1, 1, 1), (5, 3, 2, 4), (20, 7, 6, 8)])
    def test_matches_repeated_cell(self, T, B, D, H):
        rng = np.random.default_rng(T * 100 + H)
        p = init_lstm_cell(D, H, rng)
        xs = rng.normal(size=(T, B, D)) * 2
        hs, _ = lstm_sequence_forward(xs, p)
        h = np.zeros((B, H))
        c = np.zeros((B, H))
        for t in range(T):
            h, c, _ = lstm_cell_forward(xs[t], h, c, p)
            np.testing.assert_allclose(hs[t], h, rtol=0, atol=1e-13)

    def test_backward_matches_chained_cells(self):
        rng = np.random.default_rng(4)
        T, B, D, H = 6, 3, 2, 5
        p = init_lstm_cell(D, H, rng)
        xs = rng.normal(size=(T, B, D))
        gh = rng.normal(size=(T, B, H))
        _, cache = lstm_sequence_forward(xs, p)
        dxs, g = lstm_sequence_backward(cache, gh)

        h = np.zeros((B, H))
        c = np.zeros((B, H))
        caches = []
        for t in range(T):
            h, c, ca = lstm_cell_forward(xs[t], h, c, p)
            caches.append(ca)
        dh = np.zeros((B, H))
        dc = np.zeros((B, H))
        acc = LstmCellParams.zeros(D, H)
        for t in range(T - 1, -1, -1):
            dx, dh, dc, gt = lstm_cell_backward(caches[t], gh[t] + dh, dc)
            np.testing.assert_allclose(dxs[t], dx, atol=1e-12)
            acc.W_ih += gt.W_ih
            acc.W_hh += gt.W_hh
            acc.b += gt.b
        np.testing.assert_allclose(g.W_ih, acc.W_ih, atol=1e-11)
        np.testing.assert_allclose(g.W_hh, acc.W_hh, atol=1e-11)
        np.testing.assert_allclose(g.b, acc.b, atol=1e-11)

    def test_extreme_preactivations_stay_finite(self):
        p = LstmCellParams.zeros(1, 2)
        p.W_ih[:] = 1.0
        xs = np.full((3, 1, 1), 1e4)
        hs, _ = lstm_sequence_forward(xs, p)
        assert np.all(np.isfinite(hs))
        hs, _ = lstm_sequence_forward(-xs, p)
        assert np.all(np.isfinite(hs))

    def test_bad_shapes(self):
        p = LstmCellParams.zeros(2, 2)
        with pytest.raises(ShapeError):
            lstm_sequence_forward(np.zeros((3, 1, 4)), p)
        _, cache = lstm_sequence_forward(np.zeros((3, 1, 2)), p)
        with pytest.raises(ShapeError):
            lstm_sequence_backward(cache, np.zeros((2, 1, 2)))


class TestLinear:
    def test_identity(self):
        x = np.array([1.5, -2.0, 0.25])
        assert np.array_equal(linear_forward(x, np.eye(3), np.zeros(3)), x)

    def test_zero_weights_give_bias(self):
        b = np.array([0.1, -0.7])
        assert np.array_equal(linear_forward(np.ones(4), np.zeros((2, 4)), b), b)

    def test_finite_differences(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(5, 3))
        w = rng.normal(size=(5, 2))

        def f(theta):
            W, b = theta[:6].reshape(2, 3), theta[6:]
            y = linear_forward(x, W, b)
            _, dW, db = linear_backward(x, W, w)
            return float(np.sum(w * y)), np.concatenate([dW.ravel(), db])

        assert finite_difference_check(f, rng.normal(size=8)) < 1e-6

    def test_input_gradient(self):
        rng = np.random.default_rng(1)
        W = rng.normal(size=(2, 3))
        gy = rng.normal(size=2)
        dx, _, _ = linear_backward(np.zeros(3), W, gy)
        np.testing.assert_allclose(dx, gy @ W)

    def test_dimension_mismatch(self):
        with pytest.raises(ShapeError):
            linear_forward(np.ones(3), np.zeros((2, 4)), np.zeros(2))
        with pytest.raises(ShapeError):
            linear_forward(np.ones(4), np.zeros((2, 4)), np.zeros(3))


class TestSoftmax:
    def test_uniform(self):
        assert np.array_equal(softmax([0.0, 0.0]), [0.5, 0.5])

    def test_large_logits_do_not_overflow(self):
        p = softmax([1000.0, 0.0])
        assert np.all(np.isfinite(p))
        assert p[0] == pytest.approx(1.0)
        assert p[1] == pytest.approx(0.0, abs=1e-300)

    def test_analytic(self):
        np.testing.assert_allclose(softmax([np.log(3.0), 0.0]), [0.75, 0.25], rtol=1e-15)

    @given(hnp.arrays(np.float64, st.integers(1, 8), elements=finite), finite)
    def test_sums_to_one_and_shift_invariant(self, z, shift):
        p = softmax(z)
        assert abs(p.sum() - 1.0) <= 1e-12
        assert np.all((p >= 0) & (p <= 1))
        np.testing.assert_allclose(softmax(z + shift), p, atol=1e-12)

    @given(hnp.arrays(np.float64, st.integers(1, 8), elements=finite))
    def test_log_softmax_consistent(self, z):
        np.testing.assert_allclose(np.exp(log_softmax(z)), softmax(z), atol=1e-12)

    def test_rejects_non_finite(self):
        with pytest.raises(NonFiniteError):
            softmax([np.inf, 0.0])


class TestAdam:
    def test_first_step(self):
        theta = np.zeros(4)
        st_ = AdamState.fresh(4, lr=1e-3)
        adam_step(theta, np.ones(4), st_)
        # m_hat = v_hat = 1 -> step = lr / (1 + eps)
        np.testing.assert_allclose(theta, -1e-3 / (1 + 1e-8), rtol=1e-15)
        assert st_.t == 1

    def test_two_steps_by_hand(self):
        lr, b1, b2, eps, g = 0.01, 0.9, 0.999, 1e-8, 0.3
        theta = np.array([1.0])
        s = AdamState.fresh(1, lr=lr)
        adam_step(theta, np.array([g]), s)
        adam_step(theta, np.array([g]), s)
        m1, v1 = (1 - b1) * g, (1 - b2) * g * g
        x1 = 1.0 - lr * (m1 / (1 - b1)) / (np.sqrt(v1 / (1 - b2)) + eps)
        m2, v2 = b1 * m1 + (1 - b1) * g, b2 * v1 + (1 - b2) * g * g
        x2 = x1 - lr * (m2 / (1 - b1 ** 2)) / (np.sqrt(v2 / (1 - b2 ** 2)) + eps)
        assert abs(theta[0] - x2) < 1e-12

    @given(st.integers(1, 20))
    def test_zero_gradient_is_noop(self, steps):
        theta = np.linspace(-1, 1, 5)
        before = theta.copy()
        s = AdamState.fresh(5)
        for _ in range(steps):
            adam_step(theta, np.zeros(5), s)
        assert np.array_equal(theta, before)
        assert np.all(s.v >= 0)

    def test_length_mismatch(self):
        with pytest.raises(ShapeError):
            adam_step(np.zeros(3), np.zeros(4), AdamState.fresh(3))


def test_clip_global_norm():
    g, n = clip_global_norm(np.array([3.0, 4.0]), 1.0)
    assert n == 5.0
    np.testing.assert_allclose(g, [0.6, 0.8])
    g, n = clip_global_norm(np.array([0.3, 0.4]), 1.0)
    np.testing.assert_array_equal(g, [0.3, 0.4])


class TestFiniteDifference:
    def test_linear_regression_toy(self):
        rng = np.random.default_rng(0)
        X = rng.normal(size=(20, 2))
        y = X @ np.array([1.5, -0.5]) + 0.1 * rng.normal(size=20)

        def f(w):
            r = X @ w - y
            return float(r @ r), 2 * X.T @ r

        assert finite_difference_check(f, np.array([0.2, 0.3])) < 1e-8

    def test_corrupted_gradient_is_flagged(self):
        f, theta, _ = _cell_loss(2, 3, seed=9)
        _, g = f(theta)
        bad = g.copy()
        bad[4] += 0.1
        assert finite_difference_check(f, theta) < 1e-6
        assert finite_difference_check(f, theta, grad=bad) > 1e-2

    def test_non_finite_loss(self):
        with pytest.raises(NonFiniteError):
            finite_difference_check(lambda th: (float("nan"), th), np.zeros(2))


class TestSerialization:
    layout = Layout((("a", (2, 3)), ("b", (4,)), ("c", ())))

    @settings(max_examples=50)
    @given(hnp.arrays(np.float64, 11, elements=st.floats(allow_nan=True, allow_infinity=True)))
    def test_round_trip_bit_exact(self, flat):
        out, layout, meta = unpack_params(pack_params(flat, self.layout, {"k": 1}))
        assert out.tobytes() == flat.astype("<f8").tobytes()
        assert layout == self.layout
        assert meta == {"k": 1}

    def test_views(self):
        flat = np.arange(11.0)
        assert self.layout.size == 11
        np.testing.assert_array_equal(self.layout.view(flat, "a"), np.arange(6.0).reshape(2, 3))
        assert self.layout.view(flat, "c").shape == ()
        assert float(self.layout.view(flat, "c")) == 10.0

    def test_file_round_trip_and_header(self, tmp_path):
        flat = np.random.default_rng(0).normal(size=11)
        write_params(tmp_path / "p.bin", flat, self.layout)
        out, layout, _ = read_params(tmp_path / "p.bin")
        assert out.tobytes() == flat.tobytes()
        blob = (tmp_path / "p.bin").read_bytes()
        assert blob[:8] == b"FSTSAD01"
        assert b'"gate_order": ["i", "f", "g", "o"]' in blob

    def test_corrupt_files(self):
        blob = pack_params(np.zeros(11), self.layout)
        with pytest.raises(DataError):
            unpack_params(b"XXXXXXXX" + blob[8:])
        with pytest.raises(DataError):
            unpack_params(blob[:-8])
        with pytest.raises(ShapeError):
            pack_params(np.zeros(10), self.layout)
