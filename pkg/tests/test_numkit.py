import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from nllfr import numkit
from nllfr.errors import DimensionError, InsufficientDataError, RankError


def taylor_expm(M, terms=30):
    out = np.eye(M.shape[0])
    term = np.eye(M.shape[0])
    for k in range(1, terms):
        term = term @ M / k
        out = out + term
    return out


def naive_dft(x):
    N = len(x)
    n = np.arange(N)
    return np.array([np.sum(x * np.exp(-2j * np.pi * k * n / N)) for k in range(N)])


class TestMatexp:
    def test_zero_gives_identity(self):
        np.testing.assert_array_equal(numkit.matexp(np.zeros((2, 2))), np.eye(2))

    def test_diagonal(self):
        np.testing.assert_allclose(numkit.matexp(np.diag([0.3, -1.2])), np.diag(np.exp([0.3, -1.2])),
                                   rtol=1e-14)

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_taylor_series(self, seed):
        rng = np.random.default_rng(seed)
        M = rng.standard_normal((4, 4))
        M /= np.linalg.norm(M, 2)
        E = numkit.matexp(M)
        assert np.max(np.abs(E - taylor_expm(M))) / np.max(np.abs(E)) <= 1e-12

    @given(arrays(np.float64, (3, 3), elements=st.floats(-5 / 3, 5 / 3)))
    @settings(max_examples=50, deadline=None)
    def test_inverse_is_exp_of_negative(self, M):
        np.testing.assert_allclose(numkit.matexp(M) @ numkit.matexp(-M), np.eye(3), atol=1e-10)

    def test_non_square_rejected(self):
        with pytest.raises(DimensionError):
            numkit.matexp(np.zeros((2, 3)))


class TestSolve:
    def test_identity(self, rng):
        B = rng.standard_normal((3, 2))
        np.testing.assert_allclose(numkit.solve(np.eye(3), B), B)

    def test_diagonal(self):
        X = numkit.solve(np.array([[2.0, 0.0], [0.0, 4.0]]), np.array([[1.0], [1.0]]))
        np.testing.assert_allclose(X, [[0.5], [0.25]])

    @pytest.mark.parametrize("seed", range(5))
    def test_residual(self, seed):
        rng = np.random.default_rng(seed)
        A = rng.standard_normal((10, 10)) + 10 * np.eye(10)
        B = rng.standard_normal((10, 3))
        X = numkit.solve(A, B)
        assert np.linalg.norm(A @ X - B) / np.linalg.norm(B) <= 1e-10

    def test_singular_names_pivot(self):
        with pytest.raises(RankError) as ei:
            numkit.solve(np.array([[1.0, 2.0], [2.0, 4.0]]), np.ones(2))
        assert ei.value.pivot is not None


class TestLstsq:
    def test_square_equals_solve(self, rng):
        A = rng.standard_normal((4, 4)) + 4 * np.eye(4)
        b = rng.standard_normal(4)
        np.testing.assert_allclose(numkit.lstsq(A, b), numkit.solve(A, b), rtol=1e-10)

    def test_exact_line(self):
        x = np.linspace(-1, 1, 9)[:, None]
        np.testing.assert_allclose(numkit.lstsq(x, 2 * x[:, 0]), [2.0], rtol=1e-14)

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_normal_equations(self, seed):
        rng = np.random.default_rng(seed)
        A = rng.standard_normal((50, 3))
        b = rng.standard_normal(50)
        x = numkit.lstsq(A, b)
        np.testing.assert_allclose(x, np.linalg.solve(A.T @ A, A.T @ b), rtol=1e-10)
        assert np.linalg.norm(A.T @ (A @ x - b)) / np.linalg.norm(A.T @ b) <= 1e-10

    def test_rank_deficient(self, rng):
        a = rng.standard_normal(20)
        with pytest.raises(RankError):
            numkit.lstsq(np.column_stack([a, 2 * a]), rng.standard_normal(20))


class TestDft:
    def test_constant(self):
        np.testing.assert_allclose(numkit.dft(np.full(4, 3.0)), [12, 0, 0, 0], atol=1e-15)

    def test_single_tone(self):
        N = 16
        X = numkit.dft(np.cos(2 * np.pi * np.arange(N) / N))
        expect = np.zeros(N)
        expect[[1, N - 1]] = N / 2
        np.testing.assert_allclose(X, expect, atol=1e-12)

    @pytest.mark.parametrize("seed", range(3))
    def test_matches_naive_sum(self, seed):
        x = np.random.default_rng(seed).standard_normal(64)
        X = numkit.dft(x)
        ref = naive_dft(x)
        assert np.max(np.abs(X - ref)) / np.max(np.abs(ref)) <= 1e-12

    @given(arrays(np.float64, st.integers(1, 128), elements=st.floats(-1e3, 1e3)))
    @settings(max_examples=50, deadline=None)
    def test_round_trip_and_parseval(self, x):
        X = numkit.dft(x)
        np.testing.assert_allclose(numkit.idft(X).real, x, atol=1e-12 * (1 + np.max(np.abs(x))))
        e = np.sum(x ** 2)
        assert abs(e - np.sum(np.abs(X) ** 2) / len(x)) <= 1e-10 * max(e, 1.0)


class TestResampleSpline:
    def test_factor_one(self, rng):
        x = rng.standard_normal(10)
        np.testing.assert_array_equal(numkit.resample_spline(x, 1), x)

    def test_linear_ramp(self):
        x = np.arange(8, dtype=float)
        out = numkit.resample_spline(x, 4)
        np.testing.assert_allclose(out, np.arange(29) / 4, atol=1e-12)

    def test_sine(self):
        n = 32
        t = np.arange(n) / n
        out = numkit.resample_spline(np.sin(2 * np.pi * t), 8)
        tf = np.arange(len(out)) / (8 * n)
        assert np.max(np.abs(out - np.sin(2 * np.pi * tf))) < 1e-3

    def test_periodic_keeps_knots_and_length(self, rng):
        x = rng.standard_normal((40, 2))
        out = numkit.resample_spline(x, 5, periodic=True)
        assert out.shape == (200, 2)
        np.testing.assert_array_equal(out[::5], x)

    def test_too_short(self):
        with pytest.raises(InsufficientDataError):
            numkit.resample_spline(np.ones(3), 2)

    def test_bad_factor(self):
        with pytest.raises(ValueError):
            numkit.resample_spline(np.ones(8), 0)


class TestRng:
    def test_same_seed_same_stream(self):
        a = numkit.make_rng(42).standard_normal(5)
        b = numkit.make_rng(42).standard_normal(5)
        np.testing.assert_array_equal(a, b)

    def test_algorithm_tag(self):
        assert numkit.RNG_ALGORITHM == "PCG64"
        assert isinstance(numkit.make_rng(1).bit_generator, np.random.PCG64)
