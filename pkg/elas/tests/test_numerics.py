"""
Tests for dense linear algebra and initialization.
"""

import numpy as np
import pytest

from elas.core.exceptions import NumericError, ShapeError
from elas.schemas.train import Precision
from elas.services import numerics as numerics_module
from elas.services.numerics import (
    as_matrix,
    matmul,
    relative_frobenius_error,
    svd,
    xavier_init,
)


class TestMatmul:
    """Test the checked matrix product."""

    def test_matches_hand_product(self):
        """Integer-valued inputs give an exact product."""
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        b = np.array([[5.0, 6.0], [7.0, 8.0]])
        assert np.array_equal(matmul(a, b), np.array([[19.0, 22.0], [43.0, 50.0]]))

    def test_integer_valued_random_product_is_exact(self, rng):
        """Small integers are exact in float32, so the result matches int64 math."""
        a = rng.integers(-9, 10, size=(17, 23))
        b = rng.integers(-9, 10, size=(23, 11))
        result = matmul(a.astype(np.float32), b.astype(np.float32))
        assert np.array_equal(result, (a @ b).astype(np.float32))

    def test_dimension_mismatch(self):
        """Inner dimensions must agree."""
        with pytest.raises(ShapeError):
            matmul(np.ones((2, 3)), np.ones((2, 3)))

    def test_rejects_vectors(self):
        """Only 2-D operands are accepted."""
        with pytest.raises(ShapeError):
            matmul(np.ones(3), np.ones((3, 1)))

    @pytest.mark.parametrize("dtype, tolerance", [(np.float32, 1e-4), (np.float64, 1e-10)])
    def test_associative(self, rng, dtype, tolerance):
        """(AB)C and A(BC) agree to the precision of the dtype."""
        shapes = [(16, 24), (24, 8), (8, 12)]
        a, b, c = (rng.standard_normal(shape).astype(dtype) for shape in shapes)
        left = matmul(matmul(a, b), c)
        right = matmul(a, matmul(b, c))
        assert relative_frobenius_error(left, right) < tolerance


class TestSvd:
    """Test the thin SVD wrapper."""

    def test_reconstruction(self, rng):
        """U diag(S) Vt reproduces the input."""
        m = rng.standard_normal((12, 7))
        result = svd(m)
        assert relative_frobenius_error(result.reconstruct(), m) < 1e-10

    def test_singular_values_sorted_and_nonnegative(self, rng):
        """S is non-increasing and >= 0."""
        s = svd(rng.standard_normal((9, 9))).S
        assert np.all(s >= 0)
        assert np.all(np.diff(s) <= 0)

    def test_truncate(self, rng):
        """Truncation keeps the leading triplets."""
        result = svd(rng.standard_normal((8, 6))).truncate(3)
        assert result.U.shape == (8, 3)
        assert result.S.shape == (3,)
        assert result.Vt.shape == (3, 6)

    def test_rank_one(self):
        """An outer product has exactly one nonzero singular value."""
        u = np.arange(1.0, 5.0)[:, None]
        v = np.arange(1.0, 4.0)[None, :]
        s = svd(u @ v).S
        assert s[0] == pytest.approx(np.linalg.norm(u) * np.linalg.norm(v))
        assert np.all(s[1:] < 1e-10)

    def test_non_finite_input(self):
        """NaN input fails with diagnostics instead of garbage factors."""
        m = np.eye(3)
        m[1, 1] = np.nan
        with pytest.raises(NumericError) as excinfo:
            svd(m)
        assert excinfo.value.diagnostics["non_finite"] == 1

    @pytest.mark.parametrize(
        "shape", [(1, 1), (5, 3), (3, 5), (17, 17), (64, 40), (40, 64), (64, 64)]
    )
    def test_random_matrices_reconstruct_with_orthonormal_factors(self, shape):
        """U has orthonormal columns and Vt orthonormal rows for every shape."""
        m = np.random.default_rng(sum(shape)).standard_normal(shape)
        result = svd(m)
        k = min(shape)
        assert relative_frobenius_error(result.reconstruct(), m) < 1e-10
        assert np.allclose(result.U.T @ result.U, np.eye(k), atol=1e-5)
        assert np.allclose(result.Vt @ result.Vt.T, np.eye(k), atol=1e-5)

    def test_non_convergence_reports_lapack_message(self, monkeypatch):
        """The LAPACK error text travels in the diagnostics."""

        def failing_svd(m):
            raise np.linalg.LinAlgError("SVD did not converge")

        monkeypatch.setattr(numerics_module, "_lapack_svd", failing_svd)
        with pytest.raises(NumericError) as excinfo:
            svd(np.eye(3))
        assert excinfo.value.diagnostics["lapack"] == "SVD did not converge"
        assert excinfo.value.diagnostics["dtype"] == "float64"


class TestXavierInit:
    """Test seeded Xavier initialization."""

    def test_bounds(self):
        """All entries lie inside +-sqrt(6 / (rows + cols))."""
        w = xavier_init(64, 32, seed=3)
        bound = np.sqrt(6.0 / 96)
        assert w.dtype == np.float32
        assert np.all(np.abs(w) <= bound)

    def test_deterministic(self):
        """Same seed, same matrix; different seed, different matrix."""
        assert np.array_equal(xavier_init(5, 4, seed=11), xavier_init(5, 4, seed=11))
        assert not np.array_equal(xavier_init(5, 4, seed=11), xavier_init(5, 4, seed=12))

    def test_precision(self):
        """float64 precision is honored."""
        assert xavier_init(3, 3, seed=0, precision=Precision.FLOAT64).dtype == np.float64

    def test_rejects_empty_shape(self):
        """Rows and columns must be positive."""
        with pytest.raises(ShapeError):
            xavier_init(0, 3, seed=0)

    def test_variance(self):
        """A million draws have variance 2 / (rows + cols) within 5%."""
        w = xavier_init(1000, 1000, seed=5, precision=Precision.FLOAT64)
        assert float(np.var(w)) == pytest.approx(2.0 / 2000, rel=0.05)


class TestHelpers:
    """Test small numeric helpers."""

    def test_as_matrix_requires_2d(self):
        """Vectors are not matrices."""
        with pytest.raises(ShapeError):
            as_matrix([1.0, 2.0])

    def test_relative_error_of_zero_reference(self):
        """A zero reference falls back to the absolute norm."""
        assert relative_frobenius_error(np.ones((2, 2)), np.zeros((2, 2))) == pytest.approx(2.0)
