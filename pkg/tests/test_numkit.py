import numpy as np
import pytest

from fewloc import numkit
from fewloc.numkit import (
    AdamConfig,
    GradCheckProtocolError,
    NumericsError,
    ParamTensor,
    RngStream,
    ShapeError,
    adam_step,
    batchnorm_backward,
    batchnorm_forward,
    dropout_forward,
    grad_check,
    matmul,
    relu_backward,
    relu_forward,
    softmax,
    softmax_columns,
    softmax_vjp,
)


def naive_matmul(a, b):
    m, k = a.shape
    _, n = b.shape
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for kk in range(k):
                acc += a[i, kk] * b[kk, j]
            out[i, j] = acc
    return out


class TestMatmul:
    def test_identity(self):
        rng = RngStream(0, "mm")
        b = rng.standard_normal((3, 7))
        assert np.array_equal(matmul(np.eye(3), b), b)

    def test_zero(self):
        rng = RngStream(1, "mm")
        a = rng.standard_normal((4, 5))
        assert np.array_equal(matmul(a, np.zeros((5, 2))), np.zeros((4, 2)))

    def test_matches_triple_loop_bitwise(self):
        rng = RngStream(2, "mm")
        a = rng.standard_normal((5, 4))
        b = rng.standard_normal((4, 3))
        assert np.array_equal(matmul(a, b), naive_matmul(a, b))

    def test_identity_associativity_bitwise(self):
        rng = RngStream(3, "mm")
        a = rng.standard_normal((6, 6))
        b = rng.standard_normal((6, 4))
        eye = np.eye(6)
        ab = matmul(a, b)
        assert np.array_equal(matmul(matmul(a, eye), b), ab)
        assert np.array_equal(matmul(a, matmul(eye, b)), ab)

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            matmul(np.zeros((2, 3)), np.zeros((2, 3)))


class TestRelu:
    def test_forward(self):
        assert np.array_equal(relu_forward(np.array([[-1.0, 0.0, 2.0]])), [[0.0, 0.0, 2.0]])

    def test_backward(self):
        out = relu_backward(np.array([[-1.0, 2.0]]), np.array([[5.0, 5.0]]))
        assert np.array_equal(out, [[0.0, 5.0]])

    def test_random_forward_properties(self):
        rng = RngStream(4, "relu")
        x = rng.standard_normal((13, 9))
        y = relu_forward(x)
        assert (y >= 0).all()
        assert np.array_equal(y[x >= 0], x[x >= 0])
        assert (y[x < 0] == 0).all()

    def test_backward_shape_mismatch(self):
        with pytest.raises(ShapeError):
            relu_backward(np.zeros((2, 2)), np.zeros((2, 3)))


class TestDropout:
    def test_rate_zero_is_identity(self):
        rng = RngStream(5, "drop")
        x = rng.standard_normal((6, 6))
        out, mask = dropout_forward(x, 0.0, rng, training=True)
        assert np.array_equal(out, x)
        assert np.array_equal(mask, np.ones_like(x))

    def test_inference_is_identity(self):
        rng = RngStream(6, "drop")
        x = rng.standard_normal((6, 6))
        out, mask = dropout_forward(x, 0.9, rng, training=False)
        assert np.array_equal(out, x)
        assert np.array_equal(mask, np.ones_like(x))

    def test_survivor_statistics(self):
        rng = RngStream(7, "drop")
        x = np.full((500, 200), 3.0)
        out, mask = dropout_forward(x, 0.5, rng, training=True)
        survivors = (mask > 0).mean()
        assert abs(survivors - 0.5) < 0.01
        assert abs(out.mean() - x.mean()) < 0.02 * abs(x.mean())

    def test_expectation_preserved(self):
        # inverted dropout keeps E[output] == E[input] (1e6 entries)
        rng = RngStream(8, "drop")
        x = rng.standard_normal((1000, 1000)) + 2.0
        out, _ = dropout_forward(x, 0.3, rng, training=True)
        assert abs(out.mean() - x.mean()) < 0.02 * abs(x.mean())

    def test_bad_rate(self):
        with pytest.raises(ValueError):
            dropout_forward(np.zeros((2, 2)), 1.0, RngStream(0, "x"), training=True)


class TestBatchNorm:
    def _stats(self, c=4):
        return np.zeros(c), np.ones(c)

    def test_normalizes_columns(self):
        rng = RngStream(9, "bn")
        x = rng.standard_normal((64, 4)) * 8.0 + 1.5
        mean, var = self._stats()
        y, _ = batchnorm_forward(x, np.ones(4), np.zeros(4), mean, var, training=True)
        assert np.abs(y.mean(axis=0)).max() < 1e-9
        assert np.abs(y.var(axis=0) - 1.0).max() < 1e-6

    def test_constant_column_maps_to_shift(self):
        x = np.full((10, 4), 7.0)
        shift = np.array([0.5, -1.0, 0.0, 2.0])
        mean, var = self._stats()
        y, _ = batchnorm_forward(x, np.ones(4), shift, mean, var, training=True)
        assert np.abs(y - shift).max() < 1e-6

    def test_running_stats_update(self):
        rng = RngStream(10, "bn")
        x = rng.standard_normal((32, 4)) + 5.0
        mean, var = self._stats()
        batchnorm_forward(x, np.ones(4), np.zeros(4), mean, var, training=True, update_running=True)
        assert np.allclose(mean, 0.1 * x.mean(axis=0))
        assert np.allclose(var, 0.9 * 1.0 + 0.1 * x.var(axis=0))

    def test_inference_uses_running_stats(self):
        x = np.ones((3, 4))
        mean = np.full(4, 1.0)
        var = np.full(4, 4.0)
        y, _ = batchnorm_forward(x, np.ones(4), np.zeros(4), mean, var, training=False)
        assert np.allclose(y, 0.0, atol=1e-9)

    def test_backward_matches_finite_differences(self):
        rng = RngStream(11, "bn")
        x = rng.standard_normal((9, 4)) * 2.0
        gamma = rng.uniform(0.5, 1.5, 4)
        beta = rng.standard_normal(4)
        r = rng.standard_normal((9, 4))
        mean, var = self._stats()

        def loss(x_, gamma_, beta_):
            y, _ = batchnorm_forward(x_, gamma_, beta_, mean.copy(), var.copy(), training=True)
            return float((y * r).sum())

        y, cache = batchnorm_forward(x, gamma, beta, mean.copy(), var.copy(), training=True)
        dx, dgamma, dbeta = batchnorm_backward(cache, r)
        h = 1e-5
        for arr, grad, which in ((x, dx, 0), (gamma, dgamma, 1), (beta, dbeta, 2)):
            flat = arr.reshape(-1)
            gflat = grad.reshape(-1)
            for i in range(flat.size):
                old = flat[i]
                flat[i] = old + h
                lp = loss(x, gamma, beta)
                flat[i] = old - h
                lm = loss(x, gamma, beta)
                flat[i] = old
                numeric = (lp - lm) / (2 * h)
                assert abs(gflat[i] - numeric) / max(abs(numeric), 1e-6) < 1e-6

    def test_empty_batch_rejected(self):
        mean, var = self._stats()
        with pytest.raises(ShapeError):
            batchnorm_forward(np.zeros((0, 4)), np.ones(4), np.zeros(4), mean, var, training=True)

    def test_column_mismatch_rejected(self):
        mean, var = self._stats()
        with pytest.raises(ShapeError):
            batchnorm_forward(np.zeros((3, 5)), np.ones(4), np.zeros(4), mean, var, training=True)


class TestSoftmax:
    def test_uniform(self):
        assert np.allclose(softmax(np.zeros(3)), [1 / 3] * 3, atol=1e-15)

    def test_stability(self):
        y = softmax(np.array([1000.0, 0.0]))
        assert np.isfinite(y).all()
        assert y[0] > 1 - 1e-12 and y[1] < 1e-12

    def test_sums_to_one(self):
        rng = RngStream(12, "sm")
        for _ in range(50):
            y = softmax(rng.standard_normal(8) * 10)
            assert abs(y.sum() - 1.0) < 1e-12
            assert ((y > 0) & (y < 1)).all()

    def test_shift_invariance(self):
        rng = RngStream(13, "sm")
        x = rng.standard_normal(6)
        assert np.abs(softmax(x) - softmax(x + 123.456)).max() < 1e-12

    def test_empty_rejected(self):
        with pytest.raises(ShapeError):
            softmax(np.array([]))

    def test_columns_variant(self):
        rng = RngStream(14, "sm")
        x = rng.standard_normal((7, 3))
        y = softmax_columns(x)
        assert np.abs(y.sum(axis=0) - 1.0).max() < 1e-12
        for c in range(3):
            assert np.array_equal(y[:, c], softmax(x[:, c]))


class TestAdam:
    def test_zero_gradient_is_noop(self):
        p = ParamTensor("p", np.array([[1.0, -2.0]]))
        cfg = AdamConfig()
        before = p.value.copy()
        adam_step([p], cfg)
        assert np.array_equal(p.value, before)
        assert cfg.step_count == 1

    def test_first_step_is_bias_corrected_unit_step(self):
        p = ParamTensor("p", np.array([[0.0]]))
        p.grad[...] = 1.0
        adam_step([p], AdamConfig(learning_rate=1e-4))
        # first step with g=1: m_hat = v_hat = 1 -> delta = -lr / (1 + eps)
        assert abs(p.value[0, 0] + 1e-4) < 1e-11
        assert np.array_equal(p.grad, np.zeros((1, 1)))

    def test_quadratic_convergence(self):
        p = ParamTensor("x", np.array([[10.0]]))
        cfg = AdamConfig(learning_rate=1e-2)
        for _ in range(2000):
            p.grad[...] = 2.0 * (p.value - 3.0)
            adam_step([p], cfg)
        assert abs(p.value[0, 0] - 3.0) < 1e-2

    def test_weight_decay_moves_parameter(self):
        p = ParamTensor("p", np.array([[4.0]]))
        adam_step([p], AdamConfig(learning_rate=1e-3, weight_decay=0.1))
        assert p.value[0, 0] < 4.0

    def test_nan_gradient_aborts_with_name(self):
        p = ParamTensor("enc/w1", np.zeros((2, 2)))
        p.grad[0, 0] = np.nan
        with pytest.raises(NumericsError, match="enc/w1"):
            adam_step([p], AdamConfig())

    def test_config_validation(self):
        with pytest.raises(ValueError):
            AdamConfig(beta1=1.0)
        with pytest.raises(ValueError):
            AdamConfig(learning_rate=0.0)
        with pytest.raises(ValueError):
            AdamConfig(weight_decay=-0.1)


class TestRngStream:
    def test_same_seed_same_sequence(self):
        a = RngStream(42, "x").standard_normal(10)
        b = RngStream(42, "x").standard_normal(10)
        assert np.array_equal(a, b)

    def test_different_paths_differ(self):
        a = RngStream(42, "x").standard_normal(10)
        b = RngStream(42, "y").standard_normal(10)
        assert not np.array_equal(a, b)

    def test_substream_is_stateless_derivation(self):
        root = RngStream(7, "root")
        root.standard_normal(100)  # consuming the parent must not shift children
        a = root.substream("child").standard_normal(5)
        b = RngStream(7, "root").substream("child").standard_normal(5)
        assert np.array_equal(a, b)


class TestGradCheck:
    def test_linear_loss_is_exact(self):
        rng = RngStream(15, "gc")
        x = rng.standard_normal((1, 6))
        w = ParamTensor("w", rng.standard_normal((1, 6)))

        def loss_fn():
            w.grad += x
            return float((w.value * x).sum())

        err = grad_check(loss_fn, [w], h=1e-3, rng=rng.substream("c"))
        assert err < 1e-10

    def test_corrupted_gradient_detected(self):
        rng = RngStream(16, "gc")
        x = rng.uniform(0.5, 1.5, (1, 6))
        w = ParamTensor("w", rng.standard_normal((1, 6)))

        def loss_fn():
            w.grad += 2.0 * x  # deliberately doubled
            return float((w.value * x).sum())

        err = grad_check(loss_fn, [w], h=1e-3, rng=rng.substream("c"))
        assert abs(err - 1.0) < 1e-6
        assert err > 1e-4

    def test_nondeterministic_loss_rejected(self):
        state = {"n": 0}
        w = ParamTensor("w", np.zeros((1, 1)))

        def loss_fn():
            state["n"] += 1
            return float(state["n"])

        with pytest.raises(GradCheckProtocolError):
            grad_check(loss_fn, [w])

    def test_h_must_be_positive(self):
        with pytest.raises(ValueError):
            grad_check(lambda: 0.0, [], h=0.0)


class TestPrimitiveGradients:
    """Analytic backward vs central differences on random shapes/seeds."""

    def test_relu_dropout_softmax_backwards(self):
        for trial in range(100):
            rng = RngStream(trial, "prim")
            n, m = int(rng.integers(1, 7)), int(rng.integers(1, 7))
            x = rng.standard_normal((n, m)) * 2.0
            up = rng.standard_normal((n, m))
            h = 1e-5

            # relu (skip coordinates within h of the kink)
            ana = relu_backward(x, up)
            for i in range(n):
                for j in range(m):
                    if abs(x[i, j]) < 10 * h:
                        continue
                    old = x[i, j]
                    x[i, j] = old + h
                    lp = (relu_forward(x) * up).sum()
                    x[i, j] = old - h
                    lm = (relu_forward(x) * up).sum()
                    x[i, j] = old
                    numeric = (lp - lm) / (2 * h)
                    assert abs(ana[i, j] - numeric) / max(abs(numeric), 1e-6) < 1e-6

            # dropout with a frozen mask is elementwise linear
            _, mask = dropout_forward(x, 0.4, rng.substream("mask"), training=True)
            assert np.array_equal(relu_backward(np.ones_like(x), up * mask), up * mask)

            # softmax vjp per column
            probs = softmax_columns(x)
            dprobs = rng.standard_normal((n, m))
            ana = softmax_vjp(probs, dprobs)
            for i in range(n):
                for j in range(m):
                    old = x[i, j]
                    x[i, j] = old + h
                    lp = (softmax_columns(x) * dprobs).sum()
                    x[i, j] = old - h
                    lm = (softmax_columns(x) * dprobs).sum()
                    x[i, j] = old
                    numeric = (lp - lm) / (2 * h)
                    assert abs(ana[i, j] - numeric) / max(abs(numeric), 1e-5) < 1e-6
