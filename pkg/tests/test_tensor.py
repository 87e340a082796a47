import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from rtnag import tensor as T
from rtnag.gradcheck import check_primitives
from rtnag.tensor import Tensor


def brute_conv3d(x, k):
    """Direct cross-correlation with zero padding, no vectorization."""
    c_in, D, H, W = x.shape
    c_out = k.shape[0]
    pad = np.pad(x, ((0, 0), (1, 1), (1, 1), (1, 1)))
    out = np.zeros((c_out, D, H, W))
    for o in range(c_out):
        for d in range(D):
            for h in range(H):
                for w in range(W):
                    out[o, d, h, w] = np.sum(pad[:, d:d + 3, h:h + 3, w:w + 3] * k[o])
    return out


class TestArithmetic:
    def test_matmul_example(self):
        out = T.matmul(np.array([[1.0, 2], [3, 4]]), np.array([[5.0], [6]]))
        np.testing.assert_array_equal(out.data, [[17], [39]])

    def test_matmul_identity(self):
        a = np.random.default_rng(0).normal(size=(4, 4))
        np.testing.assert_array_equal(T.matmul(a, np.eye(4)).data, a)

    def test_matmul_shape_error(self):
        with pytest.raises(T.ShapeError):
            T.matmul(np.ones((2, 3)), np.ones((2, 3)))

    def test_matmul_gradient(self):
        rng = np.random.default_rng(1)
        b = rng.normal(size=(4, 2))
        err = T.gradient_check(lambda p: T.tsum(T.matmul(p["a"], b)), {"a": rng.normal(size=(3, 4))})
        assert err < 1e-6

    def test_broadcast_gradient_reduces(self):
        a = T.Tensor(np.ones((3, 4)), requires_grad=True)
        b = T.Tensor(np.ones(4), requires_grad=True)
        g = T.backward(T.tsum(a * b))
        assert g[b.id].shape == (4,)
        np.testing.assert_array_equal(g[b.id], [3, 3, 3, 3])

    def test_numpy_left_operand_defers(self):
        t = T.Tensor(np.ones(3), requires_grad=True)
        out = np.array([1.0, 2.0, 3.0]) * t
        assert isinstance(out, Tensor)


class TestElementwise:
    def test_values(self):
        assert T.softplus(0.0).data == pytest.approx(np.log(2), abs=1e-15)
        assert T.tanh(0.0).data == 0.0
        assert T.sigmoid(0.0).data == 0.5

    def test_softplus_large_input_stable(self):
        assert T.softplus(800.0).data == pytest.approx(800.0)
        assert np.isfinite(T.softplus(-800.0).data)

    def test_log_rejects_nonpositive_with_index(self):
        with pytest.raises(ValueError, match=r"\(1, 0\)"):
            T.log(np.array([[1.0, 2.0], [-1.0, 3.0]]))

    def test_dispatch(self):
        x = np.array([0.3, -0.2])
        for kind in ("relu", "tanh", "sigmoid", "softplus", "exp"):
            np.testing.assert_array_equal(T.elementwise(kind, x).data,
                                          getattr(T, kind)(x).data)
        with pytest.raises(ValueError):
            T.elementwise("cosh", x)


class TestSoftmax:
    @settings(max_examples=200, deadline=None)
    @given(arrays(np.float64, (3, 5), elements=st.floats(-50, 50)))
    def test_rows_sum_to_one(self, x):
        s = T.softmax_rows(x).data
        np.testing.assert_allclose(s.sum(axis=-1), 1.0, atol=1e-12)

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError):
            T.softmax_rows(np.array([1.0, np.inf]))


class TestCholesky:
    def test_example(self):
        L = T.cholesky_factor(np.array([[4.0, 2], [2, 5]])).data
        np.testing.assert_allclose(L, [[2, 0], [1, 2]], atol=1e-15)

    def test_identity(self):
        np.testing.assert_array_equal(T.cholesky_factor(np.eye(3)).data, np.eye(3))

    def test_reconstructs_factor(self):
        rng = np.random.default_rng(2)
        for _ in range(200):
            n = rng.integers(1, 7)
            L = np.tril(rng.normal(size=(n, n)), -1) + np.diag(rng.uniform(0.1, 10, n))
            np.testing.assert_allclose(T.cholesky_factor(L @ L.T).data, L, atol=1e-9, rtol=0)

    def test_not_positive_definite_reports_pivot(self):
        a = np.diag([1.0, 2.0, -1.0])
        with pytest.raises(T.NotPositiveDefiniteError, match="pivot 2"):
            T.cholesky_factor(a)

    def test_gradient_of_sum(self):
        rng = np.random.default_rng(3)
        a = rng.normal(size=(4, 4))
        spd = a @ a.T + 4 * np.eye(4)
        assert T.gradient_check(lambda p: T.tsum(T.cholesky_factor(p["a"])), {"a": spd}) < 1e-5


class TestCovariance:
    def test_constant_rows_give_ridge(self):
        out = T.covariance_rows(np.full((3, 5), 2.0), 1e-4).data
        np.testing.assert_allclose(out, 1e-4 * np.eye(3), atol=1e-18)

    def test_scalar_example(self):
        np.testing.assert_allclose(T.covariance_rows(np.array([[1.0, -1.0]]), 0.01).data, [[1.01]])

    def test_eigenvalues_at_least_ridge(self):
        rng = np.random.default_rng(4)
        for _ in range(100):
            x = rng.normal(size=(5, rng.integers(1, 8)))
            ev = np.linalg.eigvalsh(T.covariance_rows(x, 1e-3).data)
            assert ev.min() >= 1e-3 - 1e-12

    def test_matches_numpy(self):
        x = np.random.default_rng(5).normal(size=(4, 9))
        np.testing.assert_allclose(T.covariance_rows(x, 0.0).data, np.cov(x, bias=True), atol=1e-14)


class TestConvPool:
    def test_identity_kernel(self):
        x = np.random.default_rng(6).normal(size=(1, 4, 4, 4))
        k = np.zeros((1, 1, 3, 3, 3))
        k[0, 0, 1, 1, 1] = 1.0
        np.testing.assert_array_equal(T.conv3d(x, k).data, x)

    def test_constant_input_interior_count(self):
        c_in = 2
        out = T.conv3d(np.ones((c_in, 4, 4, 4)), np.ones((1, c_in, 3, 3, 3))).data
        assert out[0, 1, 1, 1] == 27 * c_in
        assert out[0, 0, 0, 0] == 8 * c_in

    def test_matches_brute_force(self):
        rng = np.random.default_rng(7)
        x, k = rng.normal(size=(2, 3, 4, 2)), rng.normal(size=(3, 2, 3, 3, 3))
        np.testing.assert_allclose(T.conv3d(x, k).data, brute_conv3d(x, k), atol=1e-12)

    def test_bad_kernel_rejected(self):
        with pytest.raises(T.ShapeError):
            T.conv3d(np.ones((1, 4, 4, 4)), np.ones((1, 1, 5, 5, 5)))

    def test_maxpool_examples(self):
        np.testing.assert_array_equal(T.maxpool3d(np.full((1, 4, 4, 4), 3.0)).data,
                                      np.full((1, 2, 2, 2), 3.0))
        block = np.zeros((1, 2, 2, 2))
        block[0, 1, 0, 1] = 7.0
        np.testing.assert_array_equal(T.maxpool3d(block).data, [[[[7.0]]]])

    def test_maxpool_odd_rejected(self):
        with pytest.raises(T.ShapeError):
            T.maxpool3d(np.ones((1, 3, 4, 4)))

    def test_maxpool_tie_goes_to_first(self):
        x = T.Tensor(np.ones((1, 2, 2, 2)), requires_grad=True)
        g = T.backward(T.tsum(T.maxpool3d(x)))[x.id]
        assert g[0, 0, 0, 0] == 1.0 and g.sum() == 1.0

    def test_maxpool_gradient(self):
        x = np.random.default_rng(8).normal(size=(1, 4, 4, 4))
        assert T.gradient_check(lambda p: T.tsum(T.maxpool3d(p["x"]) ** 2), {"x": x}) < 1e-6

    def test_conv1d_identity_kernel(self):
        m = np.random.default_rng(9).normal(size=7)
        k = np.zeros((3, 1, 3))
        k[:, 0, 1] = 1.0
        np.testing.assert_array_equal(T.conv1d_same(m, k).data, np.tile(m, (3, 1)))

    def test_conv1d_needs_width_three(self):
        with pytest.raises(T.ShapeError):
            T.conv1d_same(np.ones(2), np.ones((2, 1, 3)))


class TestTape:
    def test_sum_gradient_is_ones(self):
        p = T.Tensor(np.random.default_rng(0).normal(size=(3, 2)), requires_grad=True)
        np.testing.assert_array_equal(T.backward(T.tsum(p))[p.id], np.ones((3, 2)))

    def test_quadratic_gradient_is_p(self):
        v = np.random.default_rng(1).normal(size=5)
        p = T.Tensor(v, requires_grad=True)
        np.testing.assert_allclose(T.backward(T.tsum(p * p) * 0.5)[p.id], v, atol=1e-15)

    def test_fan_out_accumulates(self):
        p = T.Tensor(np.array(2.0), requires_grad=True)
        assert T.backward(p * p + p * 3.0)[p.id] == pytest.approx(7.0)

    def test_non_scalar_root_rejected(self):
        with pytest.raises(ValueError):
            T.backward(T.Tensor(np.ones(3), requires_grad=True) * 2.0)

    def test_deterministic(self):
        rng = np.random.default_rng(2)
        a, b = rng.normal(size=(4, 4)), rng.normal(size=(4, 4))
        f = lambda: T.tsum(T.tanh(T.matmul(a, b)) * T.softplus(a)).data  # noqa: E731
        assert f().tobytes() == f().tobytes()


class TestGradientCheck:
    def test_linear_is_exact(self):
        w = np.random.default_rng(0).normal(size=6)
        assert T.gradient_check(lambda p: T.tsum(p["x"] * w), {"x": np.ones(6)}) < 1e-10

    def test_softplus_composition(self):
        x = np.random.default_rng(1).normal(size=5)
        f = lambda p: T.tsum(T.softplus(T.softplus(p["x"]) * 2.0 - 1.0))  # noqa: E731
        assert T.gradient_check(f, {"x": x}) < 1e-6

    def test_rejects_nonpositive_step(self):
        with pytest.raises(ValueError):
            T.gradient_check(lambda p: T.tsum(p["x"]), {"x": np.ones(2)}, h=0.0)

    def test_corrupted_backward_detected(self, monkeypatch):
        def bad_tanh(x):
            x = T.as_tensor(x)
            y = np.tanh(x.data)
            return T._node(y, "tanh", (x,), lambda g: (g * (1 - y),))  # wrong derivative
        monkeypatch.setattr(T, "tanh", bad_tanh)
        x = np.random.default_rng(2).normal(size=4)
        assert T.gradient_check(lambda p: T.tsum(T.tanh(p["x"])), {"x": x}) > 1e-2


@pytest.mark.parametrize("result", check_primitives(trials=10), ids=lambda r: r.name)
def test_every_primitive_passes_gradient_check(result):
    assert result.ok, f"{result.name}: {result.error:.2e}"
