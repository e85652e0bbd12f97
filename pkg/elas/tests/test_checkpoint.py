"""
Tests for checkpoint files.
"""

import struct
import zlib
from dataclasses import replace

import numpy as np
import pytest

from elas.core.exceptions import CheckpointError
from elas.schemas.train import MetricsRow
from elas.services.checkpoint import (
    MAGIC,
    apply_checkpoint,
    load_checkpoint,
    read_records,
    restore,
    save_checkpoint,
    write_records,
)
from elas.services.model import build_model, model_backward, model_forward
from elas.services.optimizer import OptimizerState, step_approx


@pytest.fixture
def trained(rng, tiny_config):
    """A model and optimizer after one update."""
    model = build_model(tiny_config)
    optimizer = OptimizerState.from_config(tiny_config)
    tokens = rng.integers(0, tiny_config.vocab_size, size=(2, tiny_config.seq_len))
    grads = model_backward(model, model_forward(model, tokens).saved)
    step_approx(optimizer, model.parameters(), grads, lr=1e-3)
    return model, optimizer


def _row(step: int) -> MetricsRow:
    return MetricsRow.from_eval(
        step=step, lr=1e-3, train_loss=5.0, eval_loss=5.5, ffn_sparsity=0.5, ms_per_step=0.0
    )


class TestRecords:
    """Test the raw record container."""

    def test_round_trip(self, tmp_path):
        """Names, dtypes, shapes and values survive."""
        records = {
            "a": np.arange(6, dtype=np.float32).reshape(2, 3),
            "b": np.array([7], dtype=np.int64),
            "c": np.frombuffer(b"hello", dtype=np.uint8),
            "d": np.zeros((0, 7)),
        }
        loaded = read_records(write_records(tmp_path / "x.elas", records))
        assert list(loaded) == list(records)
        for name, array in records.items():
            assert loaded[name].dtype == array.dtype
            assert np.array_equal(loaded[name], array)

    def test_no_temporary_files_left(self, tmp_path):
        """Only the final file remains after a write."""
        write_records(tmp_path / "x.elas", {"a": np.ones(3)})
        assert [p.name for p in tmp_path.iterdir()] == ["x.elas"]

    def test_bad_magic(self, tmp_path):
        """Files from elsewhere are rejected."""
        path = tmp_path / "x.elas"
        path.write_bytes(b"NOPE" + bytes(20))
        with pytest.raises(CheckpointError, match="magic"):
            read_records(path)

    def test_flipped_byte_fails_crc(self, tmp_path):
        """Any corruption is caught by the CRC32 trailer."""
        path = write_records(tmp_path / "x.elas", {"a": np.ones(8)})
        data = bytearray(path.read_bytes())
        data[20] ^= 0xFF
        path.write_bytes(bytes(data))
        with pytest.raises(CheckpointError, match="CRC32"):
            read_records(path)

    def test_truncated(self, tmp_path):
        """A cut-short file is rejected."""
        path = write_records(tmp_path / "x.elas", {"a": np.ones(8)})
        path.write_bytes(path.read_bytes()[:-10])
        with pytest.raises(CheckpointError):
            read_records(path)

    def test_unsupported_version(self, tmp_path):
        """Versions other than the current one are refused."""
        body = MAGIC + struct.pack("<II", 99, 0)
        path = tmp_path / "x.elas"
        path.write_bytes(body + struct.pack("<I", zlib.crc32(body)))
        with pytest.raises(CheckpointError, match="version"):
            read_records(path)

    def test_missing_file(self, tmp_path):
        """Absent checkpoints are a checkpoint error."""
        with pytest.raises(CheckpointError):
            read_records(tmp_path / "absent.elas")

    def test_unsupported_dtype(self, tmp_path):
        """Only the tagged dtypes can be written."""
        with pytest.raises(CheckpointError):
            write_records(tmp_path / "x.elas", {"a": np.ones(2, dtype=np.complex64)})


class TestTrainingState:
    """Test saving and restoring model and optimizer state."""

    def test_round_trip_is_bit_exact(self, tmp_path, tiny_config, trained):
        """Parameters, moments, counters, config and metrics come back unchanged."""
        model, optimizer = trained
        path = save_checkpoint(
            tmp_path / "ckpt.elas", model, optimizer, tiny_config, step=1, metrics=[_row(0)]
        )
        checkpoint = load_checkpoint(path)
        assert checkpoint.config == tiny_config
        assert checkpoint.step == 1
        assert checkpoint.seed == tiny_config.seed
        assert checkpoint.metrics == [_row(0)]

        restored_model, restored_optimizer = restore(checkpoint)
        for name, param in model.parameters().items():
            assert np.array_equal(restored_model.parameters()[name], param)
        assert restored_optimizer.step == optimizer.step
        assert restored_optimizer.t == optimizer.t
        for name in optimizer.m:
            assert np.array_equal(restored_optimizer.m[name], optimizer.m[name])
            assert np.array_equal(restored_optimizer.v[name], optimizer.v[name])

    def test_sparsifier_scale_restored(self, tmp_path, tiny_config, trained):
        """Calibrated soft_activation scales are part of the state."""
        model, optimizer = trained
        ffn = model.blocks[1].ffn
        ffn.sparsifier = replace(ffn.sparsifier, scale=1.25)
        path = save_checkpoint(tmp_path / "ckpt.elas", model, optimizer, tiny_config, step=1)
        restored, _ = restore(load_checkpoint(path))
        assert restored.blocks[1].ffn.sparsifier.scale == 1.25
        assert restored.blocks[0].ffn.sparsifier.scale is None

    def test_corrupt_file_leaves_live_state(self, tmp_path, tiny_config, trained):
        """A corrupt checkpoint raises before anything is mutated."""
        model, optimizer = trained
        path = save_checkpoint(tmp_path / "ckpt.elas", model, optimizer, tiny_config, step=1)
        data = bytearray(path.read_bytes())
        data[len(data) // 2] ^= 0x01
        path.write_bytes(bytes(data))

        live = build_model(tiny_config)
        before = {name: p.copy() for name, p in live.parameters().items()}
        with pytest.raises(CheckpointError):
            apply_checkpoint(load_checkpoint(path), live, OptimizerState())
        assert all(np.array_equal(live.parameters()[n], before[n]) for n in before)

    def test_shape_mismatch_leaves_live_state(self, tmp_path, tiny_config, trained):
        """A checkpoint for another architecture is refused without mutation."""
        model, optimizer = trained
        path = save_checkpoint(tmp_path / "ckpt.elas", model, optimizer, tiny_config, step=1)
        other = build_model(tiny_config.with_overrides(r_mlp=2))
        other_optimizer = OptimizerState()
        before = {name: p.copy() for name, p in other.parameters().items()}
        with pytest.raises(CheckpointError):
            apply_checkpoint(load_checkpoint(path), other, other_optimizer)
        assert all(np.array_equal(other.parameters()[n], before[n]) for n in before)
        assert other_optimizer.step == 0

    def test_restored_model_computes_same_loss(self, rng, tmp_path, tiny_config, trained):
        """Forward passes agree exactly after a restore."""
        model, optimizer = trained
        path = save_checkpoint(tmp_path / "ckpt.elas", model, optimizer, tiny_config, step=1)
        restored, _ = restore(load_checkpoint(path))
        tokens = rng.integers(0, tiny_config.vocab_size, size=(2, tiny_config.seq_len))
        assert model_forward(restored, tokens).loss == model_forward(model, tokens).loss
