"""
2:4 structured sparsification of activations.

Every row is split into aligned, non-overlapping groups of 4 consecutive
elements; a 2:4 matrix has at most 2 nonzeros per group. This module provides
the magnitude top-2 sparsifier, the two soft-threshold variants, the packed
storage format, a software sparse x dense product and the straight-through
backward rule.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from functools import partial
from typing import List, Optional, Tuple

import numpy as np
import numpy.typing as npt

from ..core.exceptions import ConfigurationError, FormatError, PatternError, ShapeError
from ..schemas.train import SparsifierKind
from .numerics import Matrix

logger = logging.getLogger(__name__)

GROUP = 4
KEEP = 2
META_BITS = 2

# Upper bound on gathered elements held at once by spmm
SPMM_BLOCK_ELEMENTS = 1 << 22

Mask24 = npt.NDArray[np.bool_]

_PACKED_HEADER_BYTES = 16
_PACKED_VALUE_DTYPES = {4: np.dtype(np.float32), 8: np.dtype(np.float64)}


@dataclass(frozen=True)
class ScaleCalibration:
    """Least-squares scale fitted on a calibration batch."""
    beta: float
    degenerate: bool = False


@dataclass(frozen=True)
class SparsifierVariant:
    """
    Sparsifier strategy plus its parameters.

    ``scale`` is the per-layer beta used by soft_activation; soft_weights
    refits its scale on every call and ignores it. A soft_activation variant
    built with a ``calibration_batch`` and no ``scale`` fits its scale on it.
    """
    kind: SparsifierKind = SparsifierKind.NAIVE
    scale: Optional[float] = None
    calibration_batch: Optional[Matrix] = field(default=None, compare=False, repr=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", SparsifierKind(self.kind))
        if self.scale is not None and not (np.isfinite(self.scale) and self.scale > 0):
            raise ConfigurationError(f"Sparsifier scale must be finite and > 0, got {self.scale}")
        if self.calibration_batch is not None and self.kind != SparsifierKind.SOFT_ACTIVATION:
            raise ConfigurationError("Only soft_activation takes a calibration batch")
        if self.calibration_batch is not None and self.scale is None:
            calibration = calibrate_soft_scale(self.calibration_batch)
            object.__setattr__(self, "scale", calibration.beta)

    @property
    def calibrated(self) -> bool:
        return self.scale is not None

    def with_calibration(self, batch: Matrix) -> "SparsifierVariant":
        """
        Fit the per-layer scale on a batch of activations.

        Returns:
            Calibrated copy of this variant
        """
        if self.kind != SparsifierKind.SOFT_ACTIVATION:
            raise ConfigurationError(f"{self.kind.value} does not use calibration")
        return replace(self, scale=None, calibration_batch=batch)


def _grouped(z: Matrix) -> np.ndarray:
    """View z as (rows, cols/4, 4)."""
    if z.ndim != 2:
        raise ShapeError(f"Expected a 2-D matrix, got shape {z.shape}")
    rows, cols = z.shape
    if cols % GROUP:
        raise ShapeError(f"Column count {cols} is not a multiple of {GROUP}")
    return z.reshape(rows, cols // GROUP, GROUP)


def group_nonzero_counts(z: Matrix) -> np.ndarray:
    """Number of nonzeros in every group, shape (rows, cols/4)."""
    return np.count_nonzero(_grouped(z), axis=-1)


def first_pattern_violation(z: Matrix) -> Optional[Tuple[int, int]]:
    """(row, group) of the first group with more than 2 nonzeros, else None."""
    offenders = np.argwhere(group_nonzero_counts(z) > KEEP)
    if offenders.size == 0:
        return None
    row, group = offenders[0]
    return int(row), int(group)


def check_pattern(z: Matrix) -> bool:
    """True when every aligned group of 4 holds at most 2 nonzeros."""
    return first_pattern_violation(z) is None


def mask_top2(z: Matrix) -> Mask24:
    """
    Mark the two largest-magnitude entries of every group.

    Ties go to the lower index, so an all-zero group marks positions 0 and 1.

    Raises:
        ShapeError: If z.cols is not a multiple of 4
    """
    magnitudes = np.abs(_grouped(z))
    order = np.argsort(-magnitudes, axis=-1, kind="stable")
    mask = np.zeros(magnitudes.shape, dtype=bool)
    np.put_along_axis(mask, order[..., :KEEP], True, axis=-1)
    return mask.reshape(z.shape)


def sparsify_naive(z: Matrix) -> Matrix:
    """mask_top2(z) applied to z; kept entries are preserved exactly."""
    return np.where(mask_top2(z), z, z.dtype.type(0))


def soft_threshold(z: Matrix) -> Matrix:
    """
    Shrink every group by its third-largest magnitude.

    out = sign(z) * max(|z| - m3, 0), which leaves at most two nonzeros per group.
    """
    groups = _grouped(z)
    magnitudes = np.abs(groups)
    theta = np.sort(magnitudes, axis=-1)[..., GROUP - KEEP - 1 : GROUP - KEEP]
    out = np.sign(groups) * np.maximum(magnitudes - theta, 0)
    return out.reshape(z.shape).astype(z.dtype, copy=False)


def least_squares_scale(shrunk: Matrix, z: Matrix) -> ScaleCalibration:
    """
    beta minimizing ||z - beta * shrunk||_F, i.e. <shrunk, z> / <shrunk, shrunk>.

    All-zero ``shrunk`` (or a non-positive fit) falls back to beta = 1.
    """
    s = shrunk.astype(np.float64, copy=False).ravel()
    denom = float(np.dot(s, s))
    if denom == 0.0:
        return ScaleCalibration(beta=1.0, degenerate=True)
    beta = float(np.dot(s, z.astype(np.float64, copy=False).ravel())) / denom
    if not np.isfinite(beta) or beta <= 0.0:
        return ScaleCalibration(beta=1.0, degenerate=True)
    return ScaleCalibration(beta=beta)


def _require_kind(variant: SparsifierVariant, kind: SparsifierKind) -> None:
    if variant.kind != kind:
        raise ConfigurationError(
            f"Expected a {kind.value} sparsifier, got {variant.kind.value}"
        )


def sparsify_soft_weights(z: Matrix, variant: SparsifierVariant) -> Matrix:
    """Soft threshold, then rescale by the per-tensor least-squares beta."""
    _require_kind(variant, SparsifierKind.SOFT_WEIGHTS)
    shrunk = soft_threshold(z)
    beta = least_squares_scale(shrunk, z).beta
    return (shrunk * beta).astype(z.dtype, copy=False)


def calibrate_soft_scale(calibration_batch: Matrix) -> ScaleCalibration:
    """
    Fit the soft_activation scale on a batch of activations.

    Raises:
        ShapeError: Empty batch or columns not a multiple of 4
    """
    if calibration_batch.size == 0:
        raise ShapeError("Calibration batch is empty")
    calibration = least_squares_scale(soft_threshold(calibration_batch), calibration_batch)
    if calibration.degenerate:
        logger.warning("Soft-threshold calibration is degenerate; using beta = 1")
    return calibration


def sparsify_soft_activation(z: Matrix, variant: SparsifierVariant) -> Matrix:
    """
    Soft threshold scaled by the calibrated per-layer beta.

    Raises:
        ConfigurationError: If the variant has not been calibrated
    """
    _require_kind(variant, SparsifierKind.SOFT_ACTIVATION)
    if variant.scale is None:
        raise ConfigurationError("soft_activation sparsifier used before calibration")
    return (soft_threshold(z) * variant.scale).astype(z.dtype, copy=False)


def sparsify(z: Matrix, variant: Optional[SparsifierVariant] = None) -> Matrix:
    """Dispatch to the sparsifier named by ``variant`` (naive when None)."""
    if variant is None or variant.kind == SparsifierKind.NAIVE:
        return sparsify_naive(z)
    if variant.kind == SparsifierKind.SOFT_WEIGHTS:
        return sparsify_soft_weights(z, variant)
    return sparsify_soft_activation(z, variant)


def sparsify_parallel(
    z: Matrix, variant: Optional[SparsifierVariant] = None, threads: int = 1
) -> Matrix:
    """
    Row-chunked sparsify on a thread pool; output equals ``sparsify``.

    soft_weights is thresholded per chunk and scaled once over the whole tensor.
    """
    if threads <= 1:
        return sparsify(z, variant)
    _grouped(z)

    bounds = np.linspace(0, z.shape[0], threads + 1).astype(int)
    chunks = [z[start:stop] for start, stop in zip(bounds[:-1], bounds[1:])]
    per_tensor = variant is not None and variant.kind == SparsifierKind.SOFT_WEIGHTS
    kernel = soft_threshold if per_tensor else partial(sparsify, variant=variant)

    with ThreadPoolExecutor(max_workers=threads) as pool:
        parts: List[Matrix] = list(pool.map(kernel, chunks))
    out = np.concatenate(parts, axis=0)

    if per_tensor:
        out = (out * least_squares_scale(out, z).beta).astype(z.dtype, copy=False)
    return out


@dataclass(frozen=True)
class Packed24Tensor:
    """
    2:4-compressed matrix: two kept values per group plus their positions.

    ``values`` and ``meta`` have shape (rows, cols/2); meta holds the position
    (0-3) of each kept value inside its group, ascending within the group.
    """
    rows: int
    cols: int
    values: np.ndarray
    meta: np.ndarray

    def __post_init__(self) -> None:
        if self.cols % GROUP:
            raise FormatError(f"Packed column count {self.cols} is not a multiple of {GROUP}")
        expected = (self.rows, self.cols // KEEP)
        if self.values.shape != expected or self.meta.shape != expected:
            raise FormatError(
                f"Packed arrays must have shape {expected}, got values "
                f"{self.values.shape} and meta {self.meta.shape}"
            )

    @property
    def shape(self) -> Tuple[int, int]:
        return self.rows, self.cols

    @property
    def groups(self) -> int:
        return self.cols // GROUP

    @property
    def dtype(self) -> np.dtype:
        return self.values.dtype

    def column_index(self) -> np.ndarray:
        """Dense column of every kept value, shape (rows, cols/2)."""
        base = (np.arange(self.groups, dtype=np.int64) * GROUP)[None, :, None]
        positions = self.meta.reshape(self.rows, self.groups, KEEP).astype(np.int64)
        return (base + positions).reshape(self.rows, self.cols // KEEP)

    def nbytes_packed(self, bytes_per_value: int = 2) -> float:
        """Storage with ``bytes_per_value`` values and 2-bit metadata per kept entry."""
        kept = self.rows * self.cols // KEEP
        return kept * bytes_per_value + kept * META_BITS / 8

    def to_bytes(self) -> bytes:
        """
        Little-endian rows u64, cols u64, the raw float32 or float64 values,
        then one meta byte per value. The value width follows from the length.

        Raises:
            FormatError: Values are not float32 or float64
        """
        dtype = np.dtype(self.values.dtype)
        if dtype.itemsize not in _PACKED_VALUE_DTYPES or dtype.kind != "f":
            raise FormatError(f"Packed values must be float32 or float64, got {dtype}")
        header = np.array([self.rows, self.cols], dtype="<u8").tobytes()
        values = np.ascontiguousarray(self.values, dtype=dtype.newbyteorder("<")).tobytes()
        meta = np.ascontiguousarray(self.meta, dtype=np.uint8).tobytes()
        return header + values + meta

    @classmethod
    def from_bytes(cls, data: bytes) -> "Packed24Tensor":
        """
        Inverse of ``to_bytes``; values keep their stored width.

        Raises:
            FormatError: Truncated or oversized payload
        """
        if len(data) < _PACKED_HEADER_BYTES:
            raise FormatError("Packed tensor header is truncated")
        rows, cols = (int(v) for v in np.frombuffer(data[:_PACKED_HEADER_BYTES], dtype="<u8"))
        if cols % GROUP:
            raise FormatError(f"Packed column count {cols} is not a multiple of {GROUP}")
        kept = rows * cols // KEEP
        body = len(data) - _PACKED_HEADER_BYTES
        width = body // kept - 1 if kept and body % kept == 0 else 4
        if width not in _PACKED_VALUE_DTYPES or body != kept * (width + 1):
            raise FormatError(
                f"Packed payload is {len(data)} bytes, expected "
                f"{_PACKED_HEADER_BYTES + kept * 5} (float32) or "
                f"{_PACKED_HEADER_BYTES + kept * 9} (float64)"
            )
        dtype = _PACKED_VALUE_DTYPES[width]
        values = np.frombuffer(
            data, dtype=dtype.newbyteorder("<"), count=kept, offset=_PACKED_HEADER_BYTES
        )
        meta = np.frombuffer(
            data, dtype=np.uint8, count=kept, offset=_PACKED_HEADER_BYTES + kept * width
        )
        return cls(
            rows=rows,
            cols=cols,
            values=values.astype(dtype).reshape(rows, cols // KEEP),
            meta=meta.copy().reshape(rows, cols // KEEP),
        )


def pack(z_sparse: Matrix) -> Packed24Tensor:
    """
    Compress a 2:4 matrix.

    Groups with fewer than two nonzeros are filled with their lowest-index
    zero positions, so every group stores exactly two (position, value) pairs.

    Raises:
        PatternError: First (row, group) holding more than 2 nonzeros
    """
    groups = _grouped(z_sparse)
    counts = np.count_nonzero(groups, axis=-1)
    offenders = np.argwhere(counts > KEEP)
    if offenders.size:
        row, group = (int(v) for v in offenders[0])
        raise PatternError(row, group, int(counts[row, group]))

    rows, cols = z_sparse.shape
    positions = np.arange(GROUP)
    priority = np.where(groups != 0, positions, positions + GROUP)
    slots = np.sort(np.argsort(priority, axis=-1, kind="stable")[..., :KEEP], axis=-1)
    values = np.take_along_axis(groups, slots, axis=-1)

    return Packed24Tensor(
        rows=rows,
        cols=cols,
        values=values.reshape(rows, cols // KEEP),
        meta=slots.astype(np.uint8).reshape(rows, cols // KEEP),
    )


def unpack(p: Packed24Tensor) -> Matrix:
    """
    Expand a packed tensor to dense, zeros at unmarked positions.

    Raises:
        FormatError: Position codes out of range, duplicated or unordered
    """
    meta = p.meta.reshape(p.rows, p.groups, KEEP).astype(np.int64)
    if meta.size and (meta.max() >= GROUP or np.any(meta[..., 0] >= meta[..., 1])):
        bad = np.argwhere((meta >= GROUP).any(axis=-1) | (meta[..., 0] >= meta[..., 1]))
        row, group = (int(v) for v in bad[0])
        raise FormatError(
            f"Malformed packed metadata at row {row}, group {group}: "
            f"{meta[row, group].tolist()}"
        )
    out = np.zeros((p.rows, p.groups, GROUP), dtype=p.values.dtype)
    np.put_along_axis(out, meta, p.values.reshape(p.rows, p.groups, KEEP), axis=-1)
    return out.reshape(p.rows, p.cols)


def spmm(p: Packed24Tensor, w: Matrix) -> Matrix:
    """
    Packed 2:4 matrix times dense matrix, reading only packed values and meta.

    Software stand-in for a sparse tensor-core GEMM: every output row is the
    sum over kept entries of value * w[column].

    Raises:
        ShapeError: If p.cols != w.rows
    """
    if w.ndim != 2 or p.cols != w.shape[0]:
        raise ShapeError(f"spmm dimension mismatch: {p.shape} x {w.shape}")

    kept = p.cols // KEEP
    n = w.shape[1]
    out = np.empty((p.rows, n), dtype=np.result_type(p.values, w))
    columns = p.column_index()
    block = max(1, SPMM_BLOCK_ELEMENTS // max(1, kept * n))
    for start in range(0, p.rows, block):
        stop = min(start + block, p.rows)
        gathered = w[columns[start:stop]]
        out[start:stop] = np.einsum("rk,rkn->rn", p.values[start:stop], gathered)
    return out


def ste_backward(grad_out: Matrix) -> Matrix:
    """Straight-through estimator: the sparsifier is the identity for gradients."""
    return grad_out
