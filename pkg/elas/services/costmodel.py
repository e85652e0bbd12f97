"""
Analytical FFN activation-memory and multiply-add model.

Memory accounting: two saved FFN intermediates (pre- and post-activation)
per layer, 16-bit elements, decimal GB. A 2:4-packed tensor keeps half the
values plus 2 bits of position per kept value, i.e. 9/16 of the dense bytes.
"""

import logging
from fractions import Fraction
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import pandas as pd

from ..core.config import CostModelSettings
from ..core.exceptions import ConfigurationError
from ..schemas.costmodel import MODEL_PRESETS, FlopEstimate, MemoryEstimate, ModelPreset

logger = logging.getLogger(__name__)

GB = 10**9
PACKED_RATIO = Fraction(9, 16)
TABLE_BATCHES = [1, 2, 4, 8, 16, 32, 64, 128]

# Published FFN activation memory (GB) of the 1B preset at sequence length 2048
PUBLISHED_DENSE_GB = [1.42, 2.84, 5.68, 11.36, 22.71, 45.43, 90.85, 181.71]
PUBLISHED_SPARSE_GB = [0.80, 1.59, 3.18, 6.36, 12.72, 25.44, 50.88, 101.76]

# Published measured FFN speedups by sequence length; hardware-specific
PUBLISHED_SPEEDUP_SEQS = [512, 2048, 4096, 8192, 16384, 32768, 65536]
PUBLISHED_SPEEDUPS: Dict[str, List[float]] = {
    "60m": [0.50, 1.57, 1.75, 1.50, 1.55, 1.59, 1.55],
    "130m": [0.75, 1.56, 1.80, 1.52, 1.51, 1.53, 1.52],
    "350m": [1.29, 1.87, 1.86, 1.82, 1.85, 1.88, 1.88],
    "1b": [2.05, 2.47, 2.48, 2.55, 2.63, 2.73, 2.75],
}

FLOAT_FORMAT = "%.4f"


def get_preset(name: Union[str, ModelPreset]) -> ModelPreset:
    if isinstance(name, ModelPreset):
        return name
    key = name.lower()
    if key not in MODEL_PRESETS:
        raise ConfigurationError(f"Unknown model preset {name!r}; choose from {sorted(MODEL_PRESETS)}")
    return MODEL_PRESETS[key]


def runnable_ffn_width(intermediate: int) -> int:
    """Smallest multiple of 4 >= intermediate, so 2:4 groups tile the FFN."""
    return -(-intermediate // 4) * 4


def ffn_activation_memory(
    preset: Union[str, ModelPreset],
    batch: int,
    seq_len: int,
    sparse: bool = False,
    settings: Optional[CostModelSettings] = None,
) -> MemoryEstimate:
    """
    FFN activation memory for one training step.

    dense bytes = intermediates x batch x seq x intermediate x layers x bytes,
    sparse bytes = dense x 9/16.
    """
    if batch < 1 or seq_len < 1:
        raise ConfigurationError(f"batch and seq_len must be positive, got {batch}, {seq_len}")
    settings = settings or CostModelSettings()
    shape = get_preset(preset)
    dense_bytes = (
        settings.saved_intermediates
        * batch
        * seq_len
        * shape.intermediate
        * shape.layers
        * settings.bytes_per_element
    )
    sparse_bytes = dense_bytes * PACKED_RATIO
    return MemoryEstimate(
        dense_gb=dense_bytes / GB,
        sparse_gb=float(sparse_bytes / GB),
        ratio=float(PACKED_RATIO),
        sparse=sparse,
    )


def spmm_flop_model(
    preset: Union[str, ModelPreset], seq_len: int, rank: Optional[int] = None
) -> FlopEstimate:
    """
    Multiply-adds of one FFN forward over ``seq_len`` tokens.

    Only the GEMM consuming the sparse activation is halved; the up projection
    stays dense, so the whole-FFN bound is below 2x. With ``rank`` the
    projections are counted as factored pairs.
    """
    shape = get_preset(preset)
    hidden, inter = shape.hidden, shape.intermediate
    if rank is None:
        up = float(seq_len * hidden * inter)
        sparse_gemm = float(seq_len * inter * hidden)
        other_down = 0.0
    else:
        if not 1 <= rank <= min(hidden, inter):
            raise ConfigurationError(f"rank must be in [1, {min(hidden, inter)}], got {rank}")
        up = float(seq_len * rank * (hidden + inter))
        sparse_gemm = float(seq_len * inter * rank)
        other_down = float(seq_len * rank * hidden)

    down_dense = sparse_gemm + other_down
    down_sparse = sparse_gemm / 2 + other_down
    measured = None
    if shape.name in PUBLISHED_SPEEDUPS and seq_len in PUBLISHED_SPEEDUP_SEQS:
        measured = PUBLISHED_SPEEDUPS[shape.name][PUBLISHED_SPEEDUP_SEQS.index(seq_len)]
    return FlopEstimate(
        preset=shape.name,
        seq_len=seq_len,
        rank=rank,
        up_macs=up,
        down_dense_macs=down_dense,
        down_sparse_macs=down_sparse,
        sparse_gemm_ratio=(sparse_gemm / 2) / sparse_gemm,
        ffn_ideal_speedup=(up + down_dense) / (up + down_sparse),
        measured_speedup=measured,
    )


def memory_table(
    preset: Union[str, ModelPreset] = "1b",
    seq_len: int = 2048,
    batches: Sequence[int] = TABLE_BATCHES,
) -> pd.DataFrame:
    """Dense (LORO) and packed (ELAS) rows, one column per batch size."""
    dense = [ffn_activation_memory(preset, b, seq_len).dense_gb for b in batches]
    sparse = [ffn_activation_memory(preset, b, seq_len, sparse=True).sparse_gb for b in batches]
    table = pd.DataFrame([dense, sparse], index=["LORO", "ELAS"], columns=[str(b) for b in batches])
    table.index.name = "method"
    return table


def memory_vs_published(
    preset: Union[str, ModelPreset] = "1b", seq_len: int = 2048
) -> pd.DataFrame:
    """Modelled vs published memory for the published batch sizes, with relative errors."""
    rows = []
    for batch, dense_ref, sparse_ref in zip(TABLE_BATCHES, PUBLISHED_DENSE_GB, PUBLISHED_SPARSE_GB):
        estimate = ffn_activation_memory(preset, batch, seq_len)
        rows.append(
            {
                "batch": batch,
                "dense_gb": estimate.dense_gb,
                "published_dense_gb": dense_ref,
                "dense_rel_err": abs(estimate.dense_gb - dense_ref) / dense_ref,
                "sparse_gb": estimate.sparse_gb,
                "published_sparse_gb": sparse_ref,
                "sparse_rel_err": abs(estimate.sparse_gb - sparse_ref) / sparse_ref,
                "ratio": estimate.sparse_gb / estimate.dense_gb,
                "published_ratio": sparse_ref / dense_ref,
            }
        )
    return pd.DataFrame(rows)


def speedup_table(
    presets: Sequence[str] = tuple(PUBLISHED_SPEEDUPS), rank: Optional[int] = None
) -> pd.DataFrame:
    """Ideal whole-FFN speedup next to the published measurement, per preset and length."""
    rows = []
    for name in presets:
        for seq_len in PUBLISHED_SPEEDUP_SEQS:
            estimate = spmm_flop_model(name, seq_len, rank)
            rows.append(
                {
                    "preset": estimate.preset,
                    "seq_len": seq_len,
                    "sparse_gemm_ratio": estimate.sparse_gemm_ratio,
                    "ideal_ffn_speedup": estimate.ffn_ideal_speedup,
                    "published_speedup": estimate.measured_speedup,
                }
            )
    return pd.DataFrame(rows)


def write_table(table: pd.DataFrame, path: Union[str, Path]) -> Path:
    """
    Write a table as CSV, or as aligned text when the suffix is not .csv.

    Both forms use the same number formatting.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    keep_index = table.index.name is not None
    if path.suffix == ".csv":
        table.to_csv(path, index=keep_index, float_format=FLOAT_FORMAT, na_rep="NaN")
    else:
        text = table.to_string(
            index=keep_index, float_format=lambda v: FLOAT_FORMAT % v, na_rep="NaN"
        )
        path.write_text(text + "\n", encoding="utf-8")
    return path


def emit_tables(
    out_dir: Union[str, Path],
    formats: Sequence[str] = ("csv", "text"),
    preset: str = "1b",
    seq_len: int = 2048,
    batches: Sequence[int] = TABLE_BATCHES,
) -> List[Path]:
    """
    Regenerate the memory, memory-vs-published and speedup tables.

    Returns:
        Paths written, in a stable order
    """
    suffixes = {"csv": ".csv", "text": ".txt"}
    unknown = [f for f in formats if f not in suffixes]
    if unknown:
        raise ConfigurationError(f"Unknown table formats {unknown}; use csv or text")

    tables = {
        "ffn_memory": memory_table(preset, seq_len, batches),
        "ffn_memory_vs_published": memory_vs_published(preset, seq_len),
        "ffn_speedup": speedup_table(),
    }
    written = []
    for name, table in tables.items():
        for fmt in formats:
            written.append(write_table(table, Path(out_dir) / f"{name}{suffixes[fmt]}"))
    logger.info(f"Wrote {len(written)} cost-model tables to {out_dir}")
    return written
