import numpy as np
import pytest

from illab.numeric import (
    finite_difference_gradient,
    glorot_uniform_init,
    make_rng,
    negative_init,
    sgd_step,
)


class TestGlorotInit:
    def test_bound_64x784(self):
        w = glorot_uniform_init(64, 784, make_rng(0))
        bound = np.sqrt(6.0 / 848.0)
        assert w.shape == (64, 784)
        assert np.all(np.abs(w) <= bound)
        # the draw should actually fill the range
        assert np.max(np.abs(w)) > 0.9 * bound

    def test_1x1_range(self):
        for seed in range(20):
            w = glorot_uniform_init(1, 1, make_rng(seed))
            assert abs(w[0, 0]) <= np.sqrt(3.0)

    def test_deterministic(self):
        a = glorot_uniform_init(7, 5, make_rng(42))
        b = glorot_uniform_init(7, 5, make_rng(42))
        assert np.array_equal(a, b)

    def test_rejects_empty(self):
        with pytest.raises(ValueError):
            glorot_uniform_init(0, 3, make_rng(0))


class TestNegativeInit:
    def test_all_negative(self):
        w = negative_init(6, 9, make_rng(3))
        assert np.max(w) < 0.0

    def test_2x2_range(self):
        w = negative_init(2, 2, make_rng(11))
        bound = np.sqrt(6.0) / 2.0
        assert np.all(w >= -bound) and np.all(w < 0.0)

    def test_deterministic(self):
        assert np.array_equal(negative_init(4, 4, make_rng(5)), negative_init(4, 4, make_rng(5)))


class TestSgdStep:
    def test_arithmetic(self):
        out = sgd_step(np.array([1.0, 1.0]), np.array([2.0, -2.0]), 0.5)
        assert np.array_equal(out, np.array([0.0, 2.0]))

    def test_zero_gradient(self):
        theta = np.arange(6.0).reshape(2, 3)
        assert np.array_equal(sgd_step(theta, np.zeros((2, 3)), 0.3), theta)

    def test_paper_learning_rate(self):
        # lr = 1/8 exactly representable, so the update is exact arithmetic
        out = sgd_step(np.array([1.0]), np.array([8.0]), 0.125)
        assert out[0] == 0.0

    def test_linearity(self, rng):
        theta = rng.standard_normal((3, 4))
        g1 = rng.standard_normal((3, 4))
        g2 = rng.standard_normal((3, 4))
        once = sgd_step(theta, g1 + g2, 0.7)
        twice = sgd_step(sgd_step(theta, g1, 0.7), g2, 0.7)
        assert np.allclose(once, twice, atol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            sgd_step(np.zeros((2, 2)), np.zeros((2, 3)), 0.1)


class TestFiniteDifference:
    def test_quadratic_norm(self):
        theta = np.array([[3.0, -1.0]])
        grad = finite_difference_gradient(lambda t: 0.5 * np.sum(t * t), theta)
        assert np.allclose(grad, theta, atol=1e-8)

    def test_constant(self):
        grad = finite_difference_gradient(lambda t: 4.2, np.ones((2, 3)))
        assert np.allclose(grad, 0.0)

    def test_product(self):
        theta = np.array([2.0, 5.0])
        grad = finite_difference_gradient(lambda t: t[0] * t[1], theta)
        assert np.allclose(grad, [5.0, 2.0], atol=1e-8)

    def test_quadratic_accuracy_scales_h2(self, rng):
        # central differences are exact on quadratics up to roundoff
        A = rng.standard_normal((4, 4))
        A = A @ A.T + np.eye(4)
        b = rng.standard_normal(4)
        theta = rng.standard_normal(4)
        for h in (1e-3, 1e-4, 1e-5):
            grad = finite_difference_gradient(lambda t: 0.5 * t @ A @ t + b @ t, theta, h=h)
            assert np.max(np.abs(grad - (A @ theta + b))) < 100.0 * h * h

    def test_nonfinite_raises(self):
        with pytest.raises(FloatingPointError):
            finite_difference_gradient(lambda t: np.inf, np.ones(2))

    def test_does_not_mutate_input(self):
        theta = np.array([1.0, 2.0])
        finite_difference_gradient(lambda t: np.sum(t), theta)
        assert np.array_equal(theta, [1.0, 2.0])


def test_rng_streams_are_independent():
    r1, r2 = make_rng(1), make_rng(2)
    assert not np.array_equal(r1.uniform(size=8), r2.uniform(size=8))
