"""
Dense linear algebra and seeded initialization used by every other module.

Matrices are plain 2-D row-major numpy arrays. Float32 is the training dtype;
float64 exists for finite-difference checks and as the SVD fallback.
"""

import logging
from dataclasses import dataclass
from typing import Union

import numpy as np
import numpy.typing as npt

from ..core.exceptions import NumericError, ShapeError
from ..schemas.train import Precision

logger = logging.getLogger(__name__)

Matrix = npt.NDArray[np.floating]


def resolve_dtype(precision: Union[Precision, str, np.dtype, type]) -> np.dtype:
    """Map a precision tag or dtype-like to a numpy float dtype."""
    if isinstance(precision, Precision):
        return precision.dtype
    dtype = np.dtype(precision)
    if dtype not in (np.float32, np.float64):
        raise ShapeError(f"Unsupported dtype {dtype}; use float32 or float64")
    return dtype


def as_matrix(
    data: npt.ArrayLike, dtype: Union[Precision, str, np.dtype, None] = None
) -> Matrix:
    """
    Coerce to a contiguous 2-D float matrix.

    Raises:
        ShapeError: If the input is not 2-D
    """
    array = np.asarray(data)
    if array.ndim != 2:
        raise ShapeError(f"Expected a 2-D matrix, got shape {array.shape}")
    if dtype is not None:
        target = resolve_dtype(dtype)
    elif array.dtype in (np.float32, np.float64):
        target = array.dtype
    else:
        target = np.dtype(np.float32)
    return np.ascontiguousarray(array, dtype=target)


def require_finite(m: np.ndarray, name: str = "matrix") -> None:
    """Raise NumericError if any entry is NaN or Inf."""
    if not np.all(np.isfinite(m)):
        bad = int(np.size(m) - np.count_nonzero(np.isfinite(m)))
        raise NumericError(
            f"{name} has {bad} non-finite entries", {"name": name, "non_finite": bad}
        )


def matmul(a: Matrix, b: Matrix) -> Matrix:
    """
    Matrix product a @ b.

    Raises:
        ShapeError: If a.cols != b.rows or either operand is not 2-D
    """
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(
            f"matmul dimension mismatch: {a.shape} x {b.shape}"
        )
    return np.matmul(a, b)


def relative_frobenius_error(approx: np.ndarray, reference: np.ndarray) -> float:
    """||approx - reference||_F / ||reference||_F, computed in float64."""
    ref = np.asarray(reference, dtype=np.float64)
    diff = np.asarray(approx, dtype=np.float64) - ref
    denom = np.linalg.norm(ref)
    if denom == 0.0:
        return float(np.linalg.norm(diff))
    return float(np.linalg.norm(diff) / denom)


@dataclass(frozen=True)
class SvdResult:
    """Thin SVD m = U diag(S) Vt with S non-increasing."""
    U: Matrix
    S: np.ndarray
    Vt: Matrix

    @property
    def rank(self) -> int:
        return int(self.S.shape[0])

    def truncate(self, k: int) -> "SvdResult":
        """Keep the top-k singular triplets."""
        if k < 0:
            raise ShapeError(f"truncation rank must be >= 0, got {k}")
        k = min(k, self.rank)
        return SvdResult(U=self.U[:, :k], S=self.S[:k], Vt=self.Vt[:k, :])

    def reconstruct(self) -> Matrix:
        return (self.U * self.S) @ self.Vt


def _lapack_svd(m: np.ndarray) -> SvdResult:
    u, s, vt = np.linalg.svd(m, full_matrices=False)
    return SvdResult(U=u, S=s, Vt=vt)


def svd(m: Matrix) -> SvdResult:
    """
    Thin singular value decomposition via LAPACK.

    Runs in the input dtype; on non-convergence retries once in float64.

    Raises:
        NumericError: Non-finite input, or no convergence in float64
    """
    if m.ndim != 2:
        raise ShapeError(f"svd expects a 2-D matrix, got shape {m.shape}")
    require_finite(m, "svd input")

    try:
        result = _lapack_svd(m)
    except np.linalg.LinAlgError as e:
        if m.dtype == np.float64:
            raise NumericError(
                "SVD did not converge",
                {"shape": m.shape, "dtype": str(m.dtype), "lapack": str(e)},
            ) from e
        logger.warning(f"SVD did not converge in {m.dtype} for shape {m.shape}; retrying in float64")
        try:
            result = _lapack_svd(m.astype(np.float64))
        except np.linalg.LinAlgError as e64:
            raise NumericError(
                "SVD did not converge in float64 fallback",
                {"shape": m.shape, "dtype": "float64", "lapack": str(e64)},
            ) from e64

    # LAPACK can return tiny negative zeros
    return SvdResult(U=result.U, S=np.maximum(result.S, 0.0), Vt=result.Vt)


def xavier_init(
    rows: int,
    cols: int,
    seed: Union[int, np.random.SeedSequence],
    precision: Union[Precision, str, np.dtype] = Precision.FLOAT32,
) -> Matrix:
    """
    Xavier/Glorot uniform matrix on [-sqrt(6/(rows+cols)), +sqrt(6/(rows+cols))].

    Args:
        rows: Output rows (>= 1)
        cols: Output columns (>= 1)
        seed: Seed or SeedSequence; same seed gives identical output
        precision: Result dtype

    Returns:
        Seeded uniform matrix
    """
    if rows < 1 or cols < 1:
        raise ShapeError(f"xavier_init needs rows, cols >= 1, got ({rows}, {cols})")
    bound = np.sqrt(6.0 / (rows + cols))
    rng = np.random.default_rng(seed)
    values = rng.uniform(-bound, bound, size=(rows, cols))

    # Rounding to float32 must not step outside the bound
    dtype = resolve_dtype(precision)
    limit = dtype.type(bound)
    if limit > bound:
        limit = np.nextafter(limit, dtype.type(0))
    return np.clip(values.astype(dtype), -limit, limit)
