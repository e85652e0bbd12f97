"""
Checkpoint files: named little-endian tensor records with a CRC32 trailer.

Layout::

    b"ELAS" | u32 version | u32 record count
    per record: u32 name length | UTF-8 name | u8 dtype tag | u32 ndim
                | u64 dims[ndim] | payload
    u32 CRC32 of every preceding byte

A checkpoint holds model parameters, optimizer moments and counters,
calibrated sparsifier scales, the step counter, the seed, the metrics rows
written so far and the training config as JSON.
"""

import logging
import os
import struct
import tempfile
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Mapping, Sequence, Tuple, Union

import numpy as np
from pydantic import ValidationError

from ..core.exceptions import CheckpointError
from ..schemas.train import METRICS_COLUMNS, MetricsRow, TrainConfig
from .model import TinyTransformer, build_model
from .optimizer import OptimizerState

logger = logging.getLogger(__name__)

MAGIC = b"ELAS"
VERSION = 1

DTYPE_TAGS: Dict[int, np.dtype] = {
    0: np.dtype("<f4"),
    1: np.dtype("<f8"),
    2: np.dtype("<i8"),
    3: np.dtype("u1"),
}
_TAG_OF = {(dtype.kind, dtype.itemsize): tag for tag, dtype in DTYPE_TAGS.items()}

CONFIG_RECORD = "config.json"
STEP_RECORD = "train.step"
SEED_RECORD = "rng.seed"
METRICS_RECORD = "metrics.rows"


def _encode_record(name: str, array: np.ndarray) -> bytes:
    tag = _TAG_OF.get((array.dtype.kind, array.dtype.itemsize))
    if tag is None:
        raise CheckpointError(f"Unsupported dtype {array.dtype} for record {name!r}")
    dtype = DTYPE_TAGS[tag]
    encoded_name = name.encode("utf-8")
    header = struct.pack("<I", len(encoded_name)) + encoded_name
    header += struct.pack("<BI", tag, array.ndim)
    header += struct.pack(f"<{array.ndim}Q", *array.shape)
    return header + np.ascontiguousarray(array, dtype=dtype).tobytes()


def write_records(path: Union[str, Path], records: Mapping[str, np.ndarray]) -> Path:
    """
    Atomically write named arrays to ``path``.

    The file appears under its final name only once complete.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    body = MAGIC + struct.pack("<II", VERSION, len(records))
    body += b"".join(_encode_record(name, records[name]) for name in records)
    body += struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)

    fd, tmp_name = tempfile.mkstemp(prefix=path.name, suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(body)
        os.replace(tmp_name, path)
    except OSError:
        Path(tmp_name).unlink(missing_ok=True)
        raise
    return path


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def take(self, n: int) -> bytes:
        if self.offset + n > len(self.data):
            raise CheckpointError(
                f"Checkpoint truncated: need {n} bytes at offset {self.offset}"
            )
        chunk = self.data[self.offset: self.offset + n]
        self.offset += n
        return chunk

    def unpack(self, fmt: str) -> Tuple[int, ...]:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_records(path: Union[str, Path]) -> Dict[str, np.ndarray]:
    """
    Read and verify a checkpoint file.

    Raises:
        CheckpointError: Missing file, bad magic or version, CRC mismatch,
            truncation or trailing bytes
    """
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"Checkpoint not found: {path}")
    data = path.read_bytes()
    if len(data) < len(MAGIC) + 12:
        raise CheckpointError(f"Checkpoint {path} is too short ({len(data)} bytes)")
    if data[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path} is not an ELAS checkpoint (bad magic)")

    body, trailer = data[:-4], data[-4:]
    (stored_crc,) = struct.unpack("<I", trailer)
    if zlib.crc32(body) & 0xFFFFFFFF != stored_crc:
        raise CheckpointError(f"Checkpoint {path} failed its CRC32 check")

    reader = _Reader(body)
    reader.take(len(MAGIC))
    version, count = reader.unpack("<II")
    if version != VERSION:
        raise CheckpointError(f"Unsupported checkpoint version {version}; expected {VERSION}")

    records: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = reader.unpack("<I")
        try:
            name = reader.take(name_len).decode("utf-8")
        except UnicodeDecodeError as e:
            raise CheckpointError(f"Record name is not UTF-8: {e}") from e
        tag, ndim = reader.unpack("<BI")
        if tag not in DTYPE_TAGS:
            raise CheckpointError(f"Unknown dtype tag {tag} for record {name!r}")
        shape = reader.unpack(f"<{ndim}Q")
        dtype = DTYPE_TAGS[tag]
        size = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        records[name] = np.frombuffer(reader.take(size), dtype=dtype).reshape(shape).copy()
    if reader.offset != len(body):
        raise CheckpointError(f"Checkpoint {path} has {len(body) - reader.offset} trailing bytes")
    return records


@dataclass
class Checkpoint:
    """Decoded training state."""
    config: TrainConfig
    step: int
    seed: int
    params: Dict[str, np.ndarray]
    optimizer: Dict[str, np.ndarray]
    scales: Dict[int, float] = field(default_factory=dict)
    metrics: List[MetricsRow] = field(default_factory=list)


def _metrics_array(metrics: Sequence[MetricsRow]) -> np.ndarray:
    rows = [[float(getattr(row, col)) for col in METRICS_COLUMNS] for row in metrics]
    return np.array(rows, dtype=np.float64).reshape(len(rows), len(METRICS_COLUMNS))


def save_checkpoint(
    path: Union[str, Path],
    model: TinyTransformer,
    optimizer: OptimizerState,
    config: TrainConfig,
    step: int,
    metrics: Sequence[MetricsRow] = (),
) -> Path:
    """Write the full training state to ``path``."""
    records: Dict[str, np.ndarray] = {
        CONFIG_RECORD: np.frombuffer(config.model_dump_json().encode("utf-8"), dtype=np.uint8),
        STEP_RECORD: np.array([step], dtype=np.int64),
        SEED_RECORD: np.array([config.seed], dtype=np.int64),
        METRICS_RECORD: _metrics_array(metrics),
    }
    for name, param in model.parameters().items():
        records[f"param.{name}"] = param
    for i, ffn in enumerate(model.ffns()):
        if ffn.sparsifier.scale is not None:
            records[f"sparsifier.{i}.scale"] = np.array([ffn.sparsifier.scale], dtype=np.float64)
    records.update(optimizer.to_records())

    written = write_records(path, records)
    logger.info(f"Saved checkpoint at step {step} to {written}")
    return written


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    """
    Load and decode a checkpoint without touching any live state.

    Raises:
        CheckpointError: Unreadable file or missing/invalid records
    """
    records = read_records(path)
    for required in (CONFIG_RECORD, STEP_RECORD, SEED_RECORD, METRICS_RECORD):
        if required not in records:
            raise CheckpointError(f"Checkpoint is missing record {required!r}")
    try:
        config = TrainConfig.model_validate_json(records[CONFIG_RECORD].tobytes().decode("utf-8"))
    except (ValidationError, UnicodeDecodeError) as e:
        raise CheckpointError(f"Checkpoint config is invalid: {e}") from e

    table = records[METRICS_RECORD]
    if table.ndim != 2 or table.shape[1] != len(METRICS_COLUMNS):
        raise CheckpointError(f"Metrics record has shape {table.shape}")
    metrics = [
        MetricsRow(**{col: (int(v) if col == "step" else float(v)) for col, v in zip(METRICS_COLUMNS, row)})
        for row in table
    ]

    scales = {
        int(name.split(".")[1]): float(value[0])
        for name, value in records.items()
        if name.startswith("sparsifier.") and name.endswith(".scale")
    }
    return Checkpoint(
        config=config,
        step=int(records[STEP_RECORD][0]),
        seed=int(records[SEED_RECORD][0]),
        params={k[len("param."):]: v for k, v in records.items() if k.startswith("param.")},
        optimizer={k: v for k, v in records.items() if k.startswith("optim.")},
        scales=scales,
        metrics=metrics,
    )


def apply_checkpoint(
    checkpoint: Checkpoint, model: TinyTransformer, optimizer: OptimizerState
) -> None:
    """
    Copy checkpoint state into a live model and optimizer.

    Every parameter name, shape and dtype is validated before anything is
    written, so a mismatch leaves both objects untouched.

    Raises:
        CheckpointError: Parameter set or shapes differ from the model's
    """
    params = model.parameters()
    missing = sorted(set(params) - set(checkpoint.params))
    extra = sorted(set(checkpoint.params) - set(params))
    if missing or extra:
        raise CheckpointError(f"Parameter mismatch: missing {missing}, unexpected {extra}")
    for name, param in params.items():
        stored = checkpoint.params[name]
        if stored.shape != param.shape or stored.dtype != param.dtype:
            raise CheckpointError(
                f"{name}: checkpoint has {stored.dtype}{stored.shape}, "
                f"model has {param.dtype}{param.shape}"
            )
    if any(i >= len(model.blocks) for i in checkpoint.scales):
        raise CheckpointError("Sparsifier scale recorded for a layer the model does not have")

    staged = OptimizerState(
        beta1=optimizer.beta1,
        beta2=optimizer.beta2,
        eps=optimizer.eps,
        weight_decay=optimizer.weight_decay,
        refresh_every=optimizer.refresh_every,
    )
    staged.load_records(checkpoint.optimizer)
    for name, moment in staged.m.items():
        if name not in params or moment.shape != params[name].shape:
            raise CheckpointError(f"Optimizer state for {name} does not match the model")

    for name, param in params.items():
        param[...] = checkpoint.params[name]
    for i, scale in checkpoint.scales.items():
        ffn = model.blocks[i].ffn
        ffn.sparsifier = replace(ffn.sparsifier, scale=scale)
    optimizer.step, optimizer.m, optimizer.v, optimizer.t = (
        staged.step,
        staged.m,
        staged.v,
        staged.t,
    )


def restore(checkpoint: Checkpoint) -> Tuple[TinyTransformer, OptimizerState]:
    """Build a fresh model and optimizer holding the checkpointed state."""
    model = build_model(checkpoint.config)
    optimizer = OptimizerState.from_config(checkpoint.config)
    apply_checkpoint(checkpoint, model, optimizer)
    return model, optimizer
