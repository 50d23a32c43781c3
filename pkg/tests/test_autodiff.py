import numpy as np
import pytest

from rlsum import autodiff as ad
from rlsum.autodiff import AdamState, NonFiniteError, ShapeError, Tape


def grads_and_fd(build, arrays, step=1e-3):
    """Analytic gradients of ``build(*tensors)`` versus central differences."""
    params = [ad.parameter(a.copy()) for a in arrays]
    with Tape() as tape:
        loss = build(*params)
    g = ad.backward(tape, loss, params)
    errors = []
    for k, p in enumerate(params):
        def f(x, k=k):
            xs = [q.value for q in params]
            xs[k] = x
            return float(build(*[ad.tensor(v) for v in xs]).value)

        errors.append(ad.finite_difference_check(f, p.value.copy(), g[p], step=step))
    return max(errors)


class TestPrimitiveValues:
    def test_softmax_symmetric(self):
        np.testing.assert_allclose(ad.softmax(ad.tensor([0.0, 0.0])).value, [0.5, 0.5])

    def test_sigmoid_zero(self):
        assert float(ad.sigmoid(ad.tensor(0.0)).value) == 0.5

    def test_concat(self):
        np.testing.assert_array_equal(ad.concat([ad.tensor([1.0, 2.0]), ad.tensor([3.0])]).value, [1, 2, 3])

    def test_log_sigmoid_stable(self):
        z = ad.tensor([-800.0, 0.0, 800.0])
        out = ad.log_sigmoid(z).value
        np.testing.assert_allclose(out, [-800.0, np.log(0.5), 0.0])

    def test_masked_softmax_empty_row_is_zero(self):
        a = ad.tensor(np.ones((2, 3)))
        mask = np.array([[False] * 3, [True, False, True]])
        out = ad.masked_softmax(a, mask).value
        np.testing.assert_array_equal(out[0], 0.0)
        np.testing.assert_allclose(out[1], [0.5, 0.0, 0.5])

    def test_temporal_log_normalizer_matches_loop(self, rng):
        a = rng.normal(size=(6, 4))
        out = ad.temporal_log_normalizer(ad.tensor(a)).value
        assert np.all(out[0] == 0.0)
        for t in range(1, 6):
            np.testing.assert_allclose(out[t], np.log(np.exp(a[:t]).sum(axis=0)), rtol=1e-13)

    def test_bilinear(self, rng):
        a, w, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 5)), rng.normal(size=(2, 5))
        expected = np.array([[a[i] @ w @ b[j] for j in range(2)] for i in range(3)])
        np.testing.assert_allclose(ad.bilinear(ad.tensor(a), ad.tensor(w), ad.tensor(b)).value, expected)


class TestBackward:
    def test_square(self):
        x = ad.parameter(3.0)
        with Tape() as tape:
            loss = x * x
        assert float(ad.backward(tape, loss)[x]) == 6.0

    def test_uniform_cross_entropy(self):
        K = 5
        logits = ad.parameter(np.zeros(K))
        with Tape() as tape:
            loss = -ad.log_softmax(logits)[2]
        g = ad.backward(tape, loss)[logits]
        expected = np.full(K, 1.0 / K)
        expected[2] -= 1.0
        np.testing.assert_allclose(g, expected, atol=1e-15)

    def test_untouched_param_gets_zero(self):
        x, y = ad.parameter([1.0, 2.0]), ad.parameter([[3.0]])
        with Tape() as tape:
            loss = ad.tsum(x * x)
        g = ad.backward(tape, loss, [x, y])
        np.testing.assert_array_equal(g[y], 0.0)

    def test_non_scalar_loss_rejected(self):
        x = ad.parameter([1.0, 2.0])
        with Tape() as tape:
            y = x * 2.0
        with pytest.raises(ShapeError):
            ad.backward(tape, y)

    def test_reused_value_accumulates(self):
        x = ad.parameter(2.0)
        with Tape() as tape:
            loss = x * x * x + x
        assert float(ad.backward(tape, loss)[x]) == pytest.approx(13.0)

    def test_constants_not_recorded(self):
        with Tape() as tape:
            ad.tensor([1.0]) * 2.0
        assert len(tape) == 0

    def test_replay_is_exact(self, rng):
        w = ad.parameter(rng.normal(size=(3, 3)))
        with Tape() as tape:
            ad.tsum(ad.tanh(ad.matmul(w, w)) * 0.5)
        assert all(tape.replay())

    def test_broadcast_add_gradient(self):
        a, b = ad.parameter(np.ones((3, 2))), ad.parameter(np.ones(2))
        with Tape() as tape:
            loss = ad.tsum(a + b)
        g = ad.backward(tape, loss)
        np.testing.assert_array_equal(g[b], [3.0, 3.0])

    def test_shape_errors(self):
        with pytest.raises(ShapeError):
            ad.matmul(ad.tensor(np.ones((2, 3))), ad.tensor(np.ones((2, 3))))
        with pytest.raises(ShapeError):
            ad.tensor(np.ones(3)) + ad.tensor(np.ones(2))

    def test_checked_mode_rejects_nan(self):
        with ad.checked_mode(), np.errstate(invalid="ignore"):
            with pytest.raises(NonFiniteError):
                ad.log(ad.tensor(-1.0))


def _three_layer(x, w1, w2, w3):
    h = ad.tanh(ad.matmul(w1, x))
    h = ad.sigmoid(ad.matmul(w2, h))
    return ad.tsum(ad.log_softmax(ad.matmul(w3, h)) * np.array([0.2, -1.0, 0.5]))


class TestFiniteDifferences:
    def test_random_three_layer_composition(self, rng):
        arrays = [rng.normal(size=4), rng.normal(size=(5, 4)), rng.normal(size=(3, 5)), rng.normal(size=(3, 3))]
        assert grads_and_fd(_three_layer, arrays) < 1e-4

    @pytest.mark.parametrize(
        "build,shapes",
        [
            (lambda a, b: ad.tsum(ad.exp(a) * b), [(3,), (3,)]),
            (lambda a: ad.tsum(ad.log(a * a + 1.0)), [(4,)]),
            (lambda a: ad.tsum(ad.softmax(a, axis=1) * np.arange(6.0).reshape(2, 3)), [(2, 3)]),
            (lambda a: ad.tsum(ad.masked_softmax(a, np.tril(np.ones((3, 3), bool), -1)) * np.arange(9.0).reshape(3, 3)), [(3, 3)]),
            (lambda a: ad.tsum(ad.temporal_log_normalizer(a) * np.arange(12.0).reshape(4, 3)), [(4, 3)]),
            (lambda a, w, b: ad.tsum(ad.tanh(ad.bilinear(a, w, b))), [(3, 4), (4, 2), (5, 2)]),
            (lambda a: ad.tsum(ad.log_sigmoid(a) + ad.log_sigmoid(-a) * 2.0), [(5,)]),
            (lambda a: ad.tsum(ad.reshape(a, (6,)) * np.arange(6.0)), [(2, 3)]),
            (lambda a: ad.tsum(a.T @ np.ones((2, 2))) + ad.tsum(a[(np.array([0, 1]), np.array([2, 0]))]), [(2, 3)]),
            (lambda a, b: ad.tsum(ad.concat([a, b], axis=0) * np.arange(5.0)), [(2,), (3,)]),
            (lambda a: ad.tsum(ad.clamp_min(a, 0.1) * a), [(6,)]),
            (lambda w: ad.tsum(ad.embedding(w, [0, 2, 2]) * np.arange(9.0).reshape(3, 3)), [(4, 3)]),
        ],
    )
    def test_op(self, build, shapes, rng):
        arrays = [rng.normal(size=s) for s in shapes]
        assert grads_and_fd(build, arrays) < 1e-4

    def test_lstm_sequence(self, rng):
        H, T = 3, 5
        arrays = [rng.normal(size=(T, 4 * H)), rng.normal(size=H), rng.normal(size=H), rng.normal(size=(4 * H, H)) * 0.5]
        weights = rng.normal(size=(T, 2 * H))
        assert grads_and_fd(lambda x, h, c, w: ad.tsum(ad.lstm_sequence(x, h, c, w) * weights), arrays) < 1e-4

    def test_fd_helper_square(self):
        err = ad.finite_difference_check(lambda x: float(x[0] ** 2), np.array([3.0]), np.array([6.0]))
        assert err < 1e-6

    def test_fd_helper_constant(self):
        assert ad.finite_difference_check(lambda x: 4.0, np.zeros(3), np.zeros(3)) == 0.0


class TestAdam:
    def test_zero_gradient_leaves_params(self):
        p = {"w": np.array([1.0, -2.0])}
        ad.adam_step(p, {"w": np.zeros(2)}, AdamState(), 0.1)
        np.testing.assert_array_equal(p["w"], [1.0, -2.0])

    def test_first_step_is_signed_lr(self):
        p = {"w": np.array([0.0, 0.0])}
        ad.adam_step(p, {"w": np.array([3.0, -0.01])}, AdamState(eps=1e-16), 0.05)
        np.testing.assert_allclose(p["w"], [-0.05, 0.05], rtol=1e-12)

    def test_closed_form_without_momentum(self):
        p = {"w": np.array([1.0])}
        state = AdamState(beta1=0.0, beta2=0.0)
        g = np.array([0.5])
        for k in (1, 2):
            ad.adam_step(p, {"w": g.copy()}, state, 0.1)
            np.testing.assert_allclose(p["w"], 1.0 - k * 0.1 * 0.5 / (0.5 + 1e-8), rtol=1e-14)

    def test_matches_reference_formula(self, rng):
        w0 = rng.normal(size=3)
        grads = [rng.normal(size=3) for _ in range(4)]
        p = {"w": w0.copy()}
        state = AdamState()
        for g in grads:
            ad.adam_step(p, {"w": g}, state, 0.01)
        m = v = np.zeros(3)
        w = w0.copy()
        for t, g in enumerate(grads, start=1):
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            w = w - 0.01 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
        np.testing.assert_allclose(p["w"], w, rtol=1e-12)

    def test_non_finite_gradient_rejected(self):
        p = {"w": np.array([1.0])}
        with pytest.raises(NonFiniteError):
            ad.adam_step(p, {"w": np.array([np.nan])}, AdamState(), 0.1)
        assert p["w"][0] == 1.0

    def test_clip_by_global_norm(self):
        grads = {"a": np.array([3.0]), "b": np.array([4.0])}
        norm = ad.clip_by_global_norm(grads, 2.0)
        assert norm == 5.0
        np.testing.assert_allclose([grads["a"][0], grads["b"][0]], [1.2, 1.6])
        assert ad.clip_by_global_norm({"a": np.array([1.0])}, 2.0) == 1.0
