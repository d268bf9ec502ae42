import numpy as np
import pytest

from pcrobust import numcore as nc
from pcrobust.errors import ShapeMismatchError, TooFewRowsError


class TestAffine:
    def test_identity_weights(self):
        layer = nc.AffineLayer(np.eye(3), np.zeros(3))
        x = np.random.default_rng(0).normal(size=(4, 3))
        y, _ = nc.affine_forward(layer, x)
        np.testing.assert_array_equal(y, x)

    def test_scalar_chain_rule(self):
        layer = nc.AffineLayer(np.array([[3.0]]), np.array([1.0]))
        y, cache = nc.affine_forward(layer, np.array([[2.0]]))
        assert y[0, 0] == 7.0
        dx, dw, db = nc.affine_backward(cache, np.array([[1.0]]))
        assert dx[0, 0] == 3.0 and dw[0, 0] == 2.0 and db[0] == 1.0

    def test_shape_mismatch(self):
        layer = nc.AffineLayer(np.eye(3), np.zeros(3))
        with pytest.raises(ShapeMismatchError):
            nc.affine_forward(layer, np.zeros((2, 4)))

    def test_backward_matches_finite_differences(self):
        rng = np.random.default_rng(1)
        layer = nc.affine_init(3, 2, rng, np.float64)
        x = rng.normal(size=(4, 3))
        dy = rng.normal(size=(4, 2))
        _, cache = nc.affine_forward(layer, x)
        dx, dw, db = nc.affine_backward(cache, dy)
        fd = nc.finite_diff_grad(
            lambda xv: float((nc.affine_forward(layer, xv)[0] * dy).sum()), x)
        assert nc.rel_error(dx, fd) < 1e-3

    def test_init_bounds_and_zero_bias(self):
        rng = np.random.default_rng(2)
        layer = nc.affine_init(10, 20, rng)
        bound = np.sqrt(6.0 / 30)
        assert np.abs(layer.weight).max() <= bound
        assert np.all(layer.bias == 0)
        assert layer.weight.dtype == np.float32


class TestBatchNorm:
    def test_infer_constant_column_zero_output(self):
        layer = nc.batchnorm_init(1, np.float64)
        layer.running_mean[:] = 5.0
        layer.running_var[:] = 0.0
        x = np.full((4, 1), 5.0)
        y, _ = nc.batchnorm_forward(layer, x, train=False)
        np.testing.assert_allclose(y, 0.0, atol=1e-9)

    def test_two_row_train_normalization(self):
        layer = nc.batchnorm_init(1, np.float64)
        y, _ = nc.batchnorm_forward(layer, np.array([[0.0], [2.0]]), train=True)
        # population variance: mean 1, var 1 -> normalized to -1, 1
        np.testing.assert_allclose(y, [[-1.0], [1.0]], rtol=1e-4)

    def test_train_stats_properties(self):
        rng = np.random.default_rng(3)
        layer = nc.batchnorm_init(5, np.float64)
        x = rng.normal(loc=2.0, scale=3.0, size=(40, 5))
        y, _ = nc.batchnorm_forward(layer, x, train=True)
        assert np.abs(y.mean(axis=0)).max() < 1e-5
        assert np.abs(y.var(axis=0) - 1.0).max() < 1e-4

    def test_running_stats_update(self):
        layer = nc.batchnorm_init(1, np.float64)
        x = np.array([[0.0], [2.0]])
        nc.batchnorm_forward(layer, x, train=True)
        np.testing.assert_allclose(layer.running_mean, [0.1])        # 0.9*0 + 0.1*1
        np.testing.assert_allclose(layer.running_var, [1.0])         # 0.9*1 + 0.1*1

    def test_too_few_rows(self):
        layer = nc.batchnorm_init(2)
        with pytest.raises(TooFewRowsError):
            nc.batchnorm_forward(layer, np.zeros((1, 2), dtype=np.float32), train=True)

    def test_backward_matches_finite_differences(self):
        rng = np.random.default_rng(4)
        layer = nc.batchnorm_init(3, np.float64)
        layer.gamma[:] = rng.normal(size=3)
        layer.beta[:] = rng.normal(size=3)
        x = rng.normal(size=(6, 3))
        dy = rng.normal(size=(6, 3))

        def run(xv):
            stash = layer.running_mean.copy(), layer.running_var.copy()
            out, _ = nc.batchnorm_forward(layer, xv, train=True)
            layer.running_mean[:], layer.running_var[:] = stash
            return float((out * dy).sum())

        stash = layer.running_mean.copy(), layer.running_var.copy()
        _, cache = nc.batchnorm_forward(layer, x, train=True)
        layer.running_mean[:], layer.running_var[:] = stash
        dx, dgamma, dbeta = nc.batchnorm_backward(cache, dy)
        assert nc.rel_error(dx, nc.finite_diff_grad(run, x)) < 1e-3

    def test_grouped_normalization_per_block(self):
        layer = nc.batchnorm_init(1, np.float64)
        x = np.array([[0.0], [2.0], [10.0], [30.0]])
        y, _ = nc.batchnorm_forward(layer, x, train=True, groups=2)
        np.testing.assert_allclose(y, [[-1.0], [1.0], [-1.0], [1.0]], rtol=1e-4)


class TestSorting:
    def test_descending_with_permutation(self):
        F = np.array([[1.0], [3.0], [2.0]])
        Fs, perm = nc.column_sort_desc(F)
        np.testing.assert_array_equal(Fs[:, 0], [3, 2, 1])
        np.testing.assert_array_equal(perm[:, 0], [1, 2, 0])

    def test_already_sorted_identity_perm(self):
        F = np.array([[3.0], [2.0], [1.0]])
        _, perm = nc.column_sort_desc(F)
        np.testing.assert_array_equal(perm[:, 0], [0, 1, 2])

    def test_stable_tie_break(self):
        F = np.array([[5.0], [5.0]])
        _, perm = nc.column_sort_desc(F)
        np.testing.assert_array_equal(perm[:, 0], [0, 1])

    def test_reconstruction_bit_exact(self):
        F = np.random.default_rng(5).normal(size=(20, 7)).astype(np.float32)
        Fs, perm = nc.column_sort_desc(F)
        back = np.empty_like(F)
        np.put_along_axis(back, perm, Fs, axis=0)
        np.testing.assert_array_equal(back, F)

    def test_scatter_identity_perm(self):
        d = np.random.default_rng(6).normal(size=(4, 2))
        perm = np.tile(np.arange(4)[:, None], (1, 2))
        np.testing.assert_array_equal(nc.scatter_grad_by_perm(d, perm), d)

    def test_scatter_inverse_permutation(self):
        dF_sorted = np.array([[10.0], [20.0], [30.0]])
        perm = np.array([[1], [2], [0]])
        out = nc.scatter_grad_by_perm(dF_sorted, perm)
        np.testing.assert_array_equal(out[:, 0], [30, 10, 20])

    def test_scatter_shape_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            nc.scatter_grad_by_perm(np.zeros((2, 2)), np.zeros((3, 2), dtype=np.intp))


class TestResample:
    def test_linear_midpoint(self):
        np.testing.assert_allclose(nc.resample_column(np.array([0.0, 1.0]), 3),
                                   [0.0, 0.5, 1.0])

    def test_same_length_identity(self):
        v = np.random.default_rng(7).normal(size=9)
        np.testing.assert_allclose(nc.resample_column(v, 9), v, atol=1e-12)

    def test_single_input_broadcasts(self):
        np.testing.assert_allclose(nc.resample_column(np.array([4.0]), 5), np.full(5, 4.0))

    def test_endpoints_preserved(self):
        v = np.random.default_rng(8).normal(size=11)
        out = nc.resample_column(v, 4)
        assert out[0] == v[0] and abs(out[-1] - v[-1]) < 1e-12

    def test_monotone_preserved(self):
        rng = np.random.default_rng(9)
        for _ in range(20):
            n, m = rng.integers(1, 30), rng.integers(1, 30)
            v = np.sort(rng.normal(size=n))
            out = nc.resample_column(v, m)
            assert np.all(np.diff(out) >= -1e-12)

    def test_rows_backward_is_adjoint(self):
        rng = np.random.default_rng(10)
        F = rng.normal(size=(5, 3))
        out, cache = nc.resample_rows(F, 8)
        dout = rng.normal(size=out.shape)
        dF = nc.resample_rows_backward(cache, dout)
        # <R F, dout> == <F, R^T dout>
        assert abs((out * dout).sum() - (F * dF).sum()) < 1e-10


class TestFiniteDiff:
    def test_quadratic(self):
        g = nc.finite_diff_grad(lambda x: float((x ** 2).sum()), np.array([3.0]))
        assert abs(g[0] - 6.0) < 1e-5

    def test_sum_gives_ones(self):
        g = nc.finite_diff_grad(lambda x: float(x.sum()), np.zeros((2, 3)))
        np.testing.assert_allclose(g, 1.0, atol=1e-9)

    def test_max_gives_one_hot(self):
        x = np.array([0.1, 0.9, 0.4])
        g = nc.finite_diff_grad(lambda v: float(v.max()), x)
        np.testing.assert_allclose(g, [0, 1, 0], atol=1e-9)


class TestActivations:
    @pytest.mark.parametrize("fwd,bwd", [
        (nc.relu_forward, nc.relu_backward),
        (nc.elu_forward, nc.elu_backward),
        (nc.tanh_forward, nc.tanh_backward),
        (nc.sigmoid_forward, nc.sigmoid_backward),
    ])
    def test_backward_matches_fd(self, fwd, bwd):
        rng = np.random.default_rng(11)
        x = rng.normal(size=(4, 3)) + 0.05   # keep away from relu kink at 0
        dy = rng.normal(size=(4, 3))
        _, cache = fwd(x)
        dx = bwd(cache, dy)
        fd = nc.finite_diff_grad(lambda v: float((fwd(v)[0] * dy).sum()), x, h=1e-5)
        assert nc.rel_error(dx, fd) < 1e-3
