import numpy as np
import pytest

from wudi.errors import DegenerateVectorError, DimensionError, SingularMatrixError
from wudi.tensorops import cosine, frobenius_norm_sq, matmul, solve_spd


def naive_matmul(a, b):
    """Triple-loop oracle."""
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            acc = 0.0
            for k in range(a.shape[1]):
                acc += a[i, k] * b[k, j]
            out[i, j] = acc
    return out


class TestMatmul:
    def test_identity(self):
        m = np.array([[1.5, -2.0], [0.25, 7.0]])
        assert np.array_equal(matmul(np.eye(2), m), m)

    def test_annihilation_by_zero_row(self):
        a = np.array([[1.0, 0.0], [0.0, 0.0]])
        b = np.array([[0.0], [1.0]])
        assert np.array_equal(matmul(a, b), np.array([[0.0], [0.0]]))

    def test_against_naive_oracle(self):
        rng = np.random.default_rng(0)
        a = rng.standard_normal((3, 4))
        b = rng.standard_normal((4, 2))
        got = matmul(a, b)
        want = naive_matmul(a, b)
        assert np.max(np.abs(got - want)) <= 1e-12 * np.max(np.abs(want))

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(DimensionError) as e:
            matmul(np.zeros((2, 3)), np.zeros((2, 3)))
        assert "2x3" in str(e.value)

    def test_associativity(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            a = rng.standard_normal((3, 5))
            b = rng.standard_normal((5, 4))
            c = rng.standard_normal((4, 6))
            left = matmul(matmul(a, b), c)
            right = matmul(a, matmul(b, c))
            assert np.allclose(left, right, rtol=1e-9, atol=1e-12)


class TestFrobeniusNormSq:
    def test_zero_matrix(self):
        assert frobenius_norm_sq(np.zeros((3, 4))) == 0.0

    def test_three_four_five(self):
        assert frobenius_norm_sq(np.array([[3.0, 4.0]])) == 25.0

    def test_against_elementwise_oracle(self):
        rng = np.random.default_rng(2)
        a = rng.standard_normal((5, 5))
        want = sum(a[i, j] ** 2 for i in range(5) for j in range(5))
        assert abs(frobenius_norm_sq(a) - want) <= 1e-12 * want

    def test_equals_trace_of_gram(self):
        rng = np.random.default_rng(3)
        for _ in range(10):
            a = rng.standard_normal((4, 7))
            want = np.trace(matmul(a, a.T))
            assert abs(frobenius_norm_sq(a) - want) <= 1e-10 * abs(want)


class TestSolveSpd:
    def test_identity_system(self):
        m = np.array([[2.0, -1.0, 0.5], [0.0, 3.0, 1.0]])
        assert np.allclose(solve_spd(np.eye(3), m), m, rtol=0, atol=1e-14)

    def test_hand_inverse(self):
        # a^-1 = [[1, -1], [-1, 3]], so [2, 1] @ a^-1 = [1, 1]
        a = np.array([[1.5, 0.5], [0.5, 0.5]])
        b = np.array([[2.0, 1.0]])
        assert np.allclose(solve_spd(a, b), [[1.0, 1.0]], atol=1e-12)

    def test_rank_deficient_reports_pivot(self):
        a = np.array([[2.0, 0.0], [0.0, 0.0]])
        with pytest.raises(SingularMatrixError) as e:
            solve_spd(a, np.array([[1.0, 1.0]]))
        assert e.value.pivot == 1

    def test_asymmetric_rejected(self):
        a = np.array([[1.0, 0.5], [0.0, 1.0]])
        with pytest.raises(DimensionError):
            solve_spd(a, np.eye(2))

    def test_non_square_rejected(self):
        with pytest.raises(DimensionError):
            solve_spd(np.zeros((2, 3)), np.zeros((1, 2)))

    def test_residual_bound_on_random_spd(self):
        rng = np.random.default_rng(4)
        for _ in range(25):
            n = int(rng.integers(2, 9))
            m = rng.standard_normal((n, n))
            a = m.T @ m + np.eye(n)
            b = rng.standard_normal((int(rng.integers(1, 5)), n))
            x = solve_spd(a, b)
            resid = np.sqrt(frobenius_norm_sq(matmul(x, a) - b))
            assert resid <= 1e-8 * (1.0 + np.sqrt(frobenius_norm_sq(b)))


class TestCosine:
    def test_parallel(self):
        v = np.array([0.3, -2.0, 1.0])
        assert cosine(v, v) == pytest.approx(1.0, abs=1e-15)

    def test_orthogonal(self):
        assert cosine(np.array([1.0, 0.0]), np.array([0.0, 1.0])) == 0.0

    def test_45_degrees(self):
        got = cosine(np.array([1.0, 1.0]), np.array([1.0, 0.0]))
        assert got == pytest.approx(0.7071067811865475, abs=1e-12)

    def test_zero_norm_rejected(self):
        with pytest.raises(DegenerateVectorError):
            cosine(np.zeros(3), np.ones(3))

    def test_clamped_to_unit_interval(self):
        v = np.full(50, 0.1)
        assert cosine(v, 3.0 * v) <= 1.0
