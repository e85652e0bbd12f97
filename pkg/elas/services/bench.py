"""
Microbenchmarks for the 2:4 kernels and a natural-sparsity probe.

Every timed kernel is checked against an independent reference: outputs are
hashed with BLAKE2b and the report carries both checksums.
"""

import hashlib
import logging
import time
from itertools import combinations
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from ..core.config import BenchSettings
from ..core.exceptions import ConfigurationError
from ..schemas.bench import BenchReport
from ..schemas.train import SparsifierKind, TrainConfig
from .corpus import Corpus
from .model import model_forward
from .numerics import Matrix
from .sparsity import (
    GROUP,
    KEEP,
    SparsifierVariant,
    least_squares_scale,
    pack,
    sparsify_naive,
    sparsify_parallel,
    spmm,
    unpack,
)
from .trainer import Trainer

logger = logging.getLogger(__name__)

PAIRS = np.array(list(combinations(range(GROUP), KEEP)))


def parse_shape(shape: str) -> Tuple[int, ...]:
    """'256x1024' -> (256, 1024)."""
    try:
        dims = tuple(int(part) for part in shape.lower().split("x"))
    except ValueError as e:
        raise ConfigurationError(f"Shape must look like MxN, got {shape!r}") from e
    if len(dims) not in (2, 3) or min(dims) < 1:
        raise ConfigurationError(f"Shape must have 2 or 3 positive dims, got {shape!r}")
    return dims


def checksum(array: np.ndarray) -> str:
    """BLAKE2b of the array bytes with -0.0 folded into 0.0."""
    canonical = np.ascontiguousarray(array + array.dtype.type(0))
    digest = hashlib.blake2b(digest_size=16)
    digest.update(str(canonical.shape).encode())
    digest.update(canonical.tobytes())
    return digest.hexdigest()


def time_kernel(fn: Callable[[], np.ndarray], repetitions: int) -> Tuple[float, np.ndarray]:
    """
    Median wall time in ns over ``repetitions`` calls after one warm-up call.

    Returns:
        (median_ns, output of the last call)
    """
    out = fn()
    samples = []
    for _ in range(repetitions):
        started = time.perf_counter_ns()
        out = fn()
        samples.append(time.perf_counter_ns() - started)
    return float(np.median(samples)), out


def oracle_mask(z: Matrix) -> np.ndarray:
    """
    Brute-force keep-set: per group, the first (lexicographic) of the six
    position pairs with the largest energy z_i^2 + z_j^2.
    """
    rows, cols = z.shape
    groups = z.astype(np.float64).reshape(rows, cols // GROUP, GROUP)
    energies = (groups[..., PAIRS[:, 0]] ** 2) + (groups[..., PAIRS[:, 1]] ** 2)
    best = PAIRS[np.argmax(energies, axis=-1)]
    mask = np.zeros(groups.shape, dtype=bool)
    np.put_along_axis(mask, best, True, axis=-1)
    return mask.reshape(z.shape)


def oracle_sparsify(z: Matrix, kind: SparsifierKind) -> Matrix:
    """Reference outputs; the soft variants scale by the least-squares fit on z."""
    if kind == SparsifierKind.NAIVE:
        return np.where(oracle_mask(z), z, z.dtype.type(0))
    rows, cols = z.shape
    groups = z.reshape(rows, cols // GROUP, GROUP)
    magnitudes = np.abs(groups)
    theta = np.sort(magnitudes, axis=-1)[..., 1:2]
    shrunk = np.where(magnitudes > theta, np.sign(groups) * (magnitudes - theta), 0)
    shrunk = shrunk.reshape(z.shape).astype(z.dtype)
    return (shrunk * least_squares_scale(shrunk, z).beta).astype(z.dtype)


def _variant_for(kind: SparsifierKind, z: Matrix) -> SparsifierVariant:
    if kind == SparsifierKind.SOFT_ACTIVATION:
        return SparsifierVariant(kind=kind).with_calibration(z)
    return SparsifierVariant(kind=kind)


def bench_sparsify(
    shapes: Sequence[str],
    variants: Sequence[Union[SparsifierKind, str]] = (SparsifierKind.NAIVE,),
    repetitions: Optional[int] = None,
    threads: int = 1,
    seed: int = 0,
) -> List[BenchReport]:
    """One report per (shape, variant); soft_activation is calibrated on the input."""
    repetitions = repetitions or BenchSettings().repetitions
    reports = []
    for shape in shapes:
        dims = parse_shape(shape)
        z = np.random.default_rng(seed).standard_normal(dims[:2]).astype(np.float32)
        for kind in (SparsifierKind(v) for v in variants):
            variant = _variant_for(kind, z)
            median_ns, out = time_kernel(lambda: sparsify_parallel(z, variant, threads), repetitions)
            reports.append(
                BenchReport(
                    op="sparsify",
                    shape=shape,
                    variant=kind.value,
                    threads=threads,
                    repetitions=repetitions,
                    median_ns=median_ns,
                    throughput=z.size / (median_ns / 1e9) if median_ns else 0.0,
                    checksum=checksum(out),
                    oracle_checksum=checksum(oracle_sparsify(z, kind)),
                )
            )
    return reports


def _integer_matrix(rng: np.random.Generator, shape: Tuple[int, int]) -> Matrix:
    # Small integers keep every product and sum exact in float32
    return rng.integers(-8, 9, size=shape).astype(np.float32)


def bench_spmm(
    shapes: Sequence[str], repetitions: Optional[int] = None, seed: int = 0
) -> List[BenchReport]:
    """
    Packed 2:4 x dense against the dense product of the masked matrix.

    Shapes are 'MxK' (square right operand) or 'MxKxN'. Inputs are small
    integers, so both products are exact and their checksums must agree.
    """
    repetitions = repetitions or BenchSettings().repetitions
    reports = []
    for shape in shapes:
        dims = parse_shape(shape)
        m, k = dims[0], dims[1]
        n = dims[2] if len(dims) == 3 else k
        rng = np.random.default_rng(seed)
        a = sparsify_naive(_integer_matrix(rng, (m, k)))
        w = _integer_matrix(rng, (k, n))
        packed = pack(a)
        median_ns, out = time_kernel(lambda: spmm(packed, w), repetitions)
        dense_ns, reference = time_kernel(lambda: a @ w, repetitions)
        reports.append(
            BenchReport(
                op="spmm",
                shape=f"{m}x{k}x{n}",
                repetitions=repetitions,
                median_ns=median_ns,
                throughput=m * k * n / (median_ns / 1e9) if median_ns else 0.0,
                checksum=checksum(out),
                oracle_checksum=checksum(reference),
                baseline_median_ns=dense_ns,
            )
        )
    return reports


def bench_pack(
    shapes: Sequence[str], repetitions: Optional[int] = None, seed: int = 0
) -> List[BenchReport]:
    """pack + unpack round trip; the output must equal the sparsified input."""
    repetitions = repetitions or BenchSettings().repetitions
    reports = []
    for shape in shapes:
        dims = parse_shape(shape)
        z = sparsify_naive(np.random.default_rng(seed).standard_normal(dims[:2]).astype(np.float32))
        median_ns, out = time_kernel(lambda: unpack(pack(z)), repetitions)
        reports.append(
            BenchReport(
                op="pack",
                shape=shape,
                repetitions=repetitions,
                median_ns=median_ns,
                throughput=z.size / (median_ns / 1e9) if median_ns else 0.0,
                checksum=checksum(out),
                oracle_checksum=checksum(z),
            )
        )
    return reports


def reports_frame(reports: Sequence[BenchReport]) -> pd.DataFrame:
    frame = pd.DataFrame([r.model_dump() for r in reports])
    if not frame.empty:
        frame["matches_oracle"] = [r.matches_oracle for r in reports]
    return frame


def probe_natural_sparsity(
    config: TrainConfig,
    steps: int,
    every: int = 1,
    corpus: Optional[Corpus] = None,
) -> pd.DataFrame:
    """
    Fraction of exact zeros in post-ReLU^2 FFN activations while training.

    Trains ``steps`` steps of ``config`` (dense warmup rules apply) and, every
    ``every`` steps and at step 0, measures each layer on the first eval batch
    with dense activations.

    Returns:
        Columns step, layer_0 .. layer_{n-1}, mean
    """
    if steps < 0 or every < 1:
        raise ConfigurationError(f"Need steps >= 0 and every >= 1, got {steps}, {every}")
    corpus = corpus or Corpus.from_file(config.corpus_path, config.eval_fraction)
    probe_config = config.with_overrides(total_steps=max(steps, config.warmup_steps))
    trainer = Trainer(probe_config, corpus)
    inputs, _ = next(corpus.eval_batches(config.batch_size, config.seq_len, 1))

    rows: List[Dict[str, float]] = []

    def measure(step: int) -> None:
        layers = model_forward(trainer.model, inputs, sparsity_on=False).layer_sparsity
        row: Dict[str, float] = {"step": step}
        row.update({f"layer_{i}": fraction for i, fraction in enumerate(layers)})
        row["mean"] = float(np.mean(layers))
        rows.append(row)

    measure(0)
    for step in range(steps):
        trainer.train_step(step)
        if (step + 1) % every == 0:
            measure(step + 1)
    frame = pd.DataFrame(rows)
    frame["step"] = frame["step"].astype(int)
    logger.info(f"Natural sparsity after {steps} steps: {rows[-1]['mean']:.3f}")
    return frame
