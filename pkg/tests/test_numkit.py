import numpy as np
import pytest
from scipy import sparse

from lsec import numkit as nk
from lsec.errors import ContractError, ShapeError

from conftest import finite_diff, rel_err


def random_csr(rng, rows, cols, density=0.4):
    mask = rng.random((rows, cols)) < density
    dense = np.where(mask, rng.standard_normal((rows, cols)), 0.0)
    return sparse.csr_array(dense), dense


class TestSpmm:
    def test_identity(self, rng):
        d = rng.standard_normal((5, 3))
        eye = sparse.csr_array(sparse.eye(5))
        out, _ = nk.spmm(eye, d)
        np.testing.assert_array_equal(out, d)

    def test_matches_dense_oracle(self, rng):
        s, dense = random_csr(rng, 5, 5)
        d = rng.standard_normal((5, 3))
        out, _ = nk.spmm(s, d)
        np.testing.assert_allclose(out, dense @ d, atol=1e-12)

    def test_backward_finite_difference(self, rng):
        s, _ = random_csr(rng, 6, 4)
        d = rng.standard_normal((4, 3))
        g = rng.standard_normal((6, 3))

        def loss():
            out, _ = nk.spmm(s, d)
            return float((out * g).sum())

        _, back = nk.spmm(s, d)
        grad = back(g)
        for i in range(d.size):
            assert rel_err(grad.ravel()[i], finite_diff(loss, d, i)) < 1e-6

    def test_shape_mismatch(self, rng):
        s, _ = random_csr(rng, 3, 4)
        with pytest.raises(ShapeError):
            nk.spmm(s, rng.standard_normal((5, 2)))


class TestAffine:
    def test_identity(self):
        x = np.arange(6.0).reshape(2, 3)
        w = nk.ParamTensor("w", np.eye(3))
        b = nk.ParamTensor("b", np.zeros((1, 3)))
        y, _ = nk.affine(x, w, b)
        np.testing.assert_array_equal(y, x)

    def test_scalar_hand_case(self):
        # x=2, w=3, b=1 -> 7; g=1 -> w.grad=2, b.grad=1, gx=3
        x = np.array([[2.0]])
        w = nk.ParamTensor("w", np.array([[3.0]]))
        b = nk.ParamTensor("b", np.array([[1.0]]))
        y, back = nk.affine(x, w, b)
        assert y[0, 0] == 7.0
        gx = back(np.array([[1.0]]))
        assert w.grad[0, 0] == 2.0
        assert b.grad[0, 0] == 1.0
        assert gx[0, 0] == 3.0

    def test_gradient_check(self, rng):
        x = rng.standard_normal((4, 6))
        w = nk.ParamTensor("w", rng.standard_normal((6, 2)))
        b = nk.ParamTensor("b", rng.standard_normal((1, 2)))
        g = rng.standard_normal((4, 2))

        def loss():
            y, _ = nk.affine(x, w, b)
            return float((y * g).sum())

        _, back = nk.affine(x, w, b)
        gx = back(g)
        for arr, grad in ((w.value, w.grad), (b.value, b.grad), (x, gx)):
            for i in range(arr.size):
                assert rel_err(grad.ravel()[i], finite_diff(loss, arr, i)) < 1e-6


class TestActivation:
    def test_relu_values_and_subgradient(self):
        y, back = nk.activation(np.array([[-1.0, 0.0, 2.0]]), "relu")
        np.testing.assert_array_equal(y, [[0.0, 0.0, 2.0]])
        g = back(np.ones((1, 3)))
        np.testing.assert_array_equal(g, [[0.0, 0.0, 1.0]])  # subgradient at 0 is 0

    def test_sigmoid_half_at_zero(self):
        y, _ = nk.activation(np.array([[0.0]]), "sigmoid")
        assert y[0, 0] == 0.5

    def test_sigmoid_stable_at_extremes(self):
        y, back = nk.activation(np.array([[50.0, -50.0]]), "sigmoid")
        assert np.all(np.isfinite(y))
        g = back(np.ones((1, 2)))
        assert abs(g[0, 0]) < 1e-20

    def test_leaky_relu(self):
        y, back = nk.activation(np.array([[-2.0, 3.0]]), "leaky_relu")
        np.testing.assert_allclose(y, [[-0.02, 3.0]])
        g = back(np.ones((1, 2)))
        np.testing.assert_allclose(g, [[0.01, 1.0]])

    @pytest.mark.parametrize("kind", ["relu", "leaky_relu", "sigmoid"])
    def test_gradient_check(self, kind, rng):
        # offset away from 0 so the kink cannot straddle the FD stencil
        x = rng.standard_normal((5, 4)) + np.sign(rng.standard_normal((5, 4))) * 1e-3
        g = rng.standard_normal((5, 4))

        def loss():
            y, _ = nk.activation(x, kind)
            return float((y * g).sum())

        _, back = nk.activation(x, kind)
        grad = back(g)
        for i in range(x.size):
            assert rel_err(grad.ravel()[i], finite_diff(loss, x, i)) < 1e-4


class TestBce:
    def test_logit_zero_label_one(self):
        loss, _ = nk.bce_with_logits(np.array([0.0]), np.array([1.0]))
        assert abs(loss - np.log(2.0)) < 1e-12

    def test_large_logit_stable(self):
        loss, _ = nk.bce_with_logits(np.array([50.0]), np.array([1.0]))
        assert np.isfinite(loss) and loss < 1e-20

    def test_no_overflow_over_range(self):
        z = np.linspace(-500.0, 500.0, 101)
        loss, back = nk.bce_with_logits(z, np.ones_like(z))
        assert np.isfinite(loss)
        assert np.all(np.isfinite(back(1.0)))

    def test_label_validation(self):
        with pytest.raises(ContractError):
            nk.bce_with_logits(np.array([0.0]), np.array([0.5]))

    def test_gradient_check(self, rng):
        z = rng.standard_normal(40)
        y = (rng.random(40) < 0.5).astype(float)

        def loss():
            return nk.bce_with_logits(z, y)[0]

        _, back = nk.bce_with_logits(z, y)
        grad = back(1.0)
        for i in range(z.size):
            assert rel_err(grad[i], finite_diff(loss, z, i)) < 1e-6


class TestAdam:
    def test_zero_gradient_is_fixed_point(self):
        p = nk.ParamTensor("p", np.array([[1.0, -2.0]]))
        nk.adam_step([p], lr=1e-3)
        np.testing.assert_array_equal(p.value, [[1.0, -2.0]])

    def test_first_step_magnitude(self):
        p = nk.ParamTensor("p", np.zeros((1, 1)))
        p.grad[:] = 1.0
        nk.adam_step([p], lr=1e-3)
        # m_hat = g, v_hat = g^2 on the first step -> |delta| = lr/(1 + eps)
        assert abs(abs(p.value[0, 0]) - 1e-3 / (1 + 1e-8)) < 1e-12
        assert p.step_count == 1
        assert np.all(p.grad == 0.0)

    def test_constant_gradient_no_blowup(self):
        p = nk.ParamTensor("p", np.zeros((1, 1)))
        p.grad[:] = 1.0
        nk.adam_step([p], lr=1e-3)
        d1 = abs(p.value[0, 0])
        before = p.value[0, 0]
        p.grad[:] = 1.0
        nk.adam_step([p], lr=1e-3)
        d2 = abs(p.value[0, 0] - before)
        assert d2 <= d1 * 1.01


class TestGlorot:
    def test_bound(self):
        m = nk.glorot_init(100, 100, 0)
        limit = np.sqrt(6.0 / 200.0)
        assert np.all(np.abs(m) <= limit)

    def test_deterministic(self):
        np.testing.assert_array_equal(nk.glorot_init(7, 5, 42), nk.glorot_init(7, 5, 42))

    def test_empirical_mean_near_zero(self):
        m = nk.glorot_init(100, 100, 1)
        assert abs(m.mean()) < 0.01


class TestScatterAddRows:
    @pytest.mark.parametrize("n", [10, 5000])
    def test_matches_add_at(self, n, rng):
        target = rng.standard_normal((40, 8))
        expect = target.copy()
        rows = rng.integers(0, 40, size=n)
        vals = rng.standard_normal((n, 8))
        np.add.at(expect, rows, vals)
        nk.scatter_add_rows(target, rows, vals)
        np.testing.assert_allclose(target, expect, atol=1e-10)
