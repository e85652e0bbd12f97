"""
Tests for the activation-memory and multiply-add cost model.
"""

import pandas as pd
import pytest

from elas.core.exceptions import ConfigurationError
from elas.services.costmodel import (
    PUBLISHED_DENSE_GB,
    PUBLISHED_SPARSE_GB,
    TABLE_BATCHES,
    emit_tables,
    ffn_activation_memory,
    get_preset,
    memory_table,
    memory_vs_published,
    runnable_ffn_width,
    speedup_table,
    spmm_flop_model,
    write_table,
)


class TestMemory:
    """Test FFN activation memory."""

    def test_one_billion_batch_one(self):
        """2 x 2048 x 5461 x 32 layers x 2 bytes."""
        estimate = ffn_activation_memory("1b", batch=1, seq_len=2048)
        assert estimate.dense_gb == pytest.approx(1.431568384)
        assert estimate.sparse_gb == pytest.approx(1.431568384 * 9 / 16)

    def test_within_published_figures(self):
        """All sixteen published cells are matched to 1.5%."""
        table = memory_vs_published()
        assert len(table) == len(PUBLISHED_DENSE_GB) == len(PUBLISHED_SPARSE_GB)
        assert (table["dense_rel_err"] < 0.015).all()
        assert (table["sparse_rel_err"] < 0.015).all()

    def test_ratio_is_nine_sixteenths(self):
        """Packed over dense is exactly 9/16 for every batch."""
        for batch in TABLE_BATCHES:
            estimate = ffn_activation_memory("1b", batch, 2048)
            assert estimate.ratio == 0.5625
            assert estimate.sparse_gb / estimate.dense_gb == pytest.approx(0.5625)

    def test_linear_in_batch(self):
        """Doubling the batch doubles the memory."""
        one = ffn_activation_memory("350m", 3, 1024).dense_gb
        two = ffn_activation_memory("350m", 6, 1024).dense_gb
        assert two == pytest.approx(2 * one)

    def test_gb_follows_requested_side(self):
        """The sparse flag selects which figure ``gb`` reports."""
        sparse = ffn_activation_memory("60m", 1, 256, sparse=True)
        assert sparse.gb == sparse.sparse_gb < sparse.dense_gb

    def test_rejects_empty_batch(self):
        """Batch and length must be positive."""
        with pytest.raises(ConfigurationError):
            ffn_activation_memory("1b", 0, 2048)

    def test_unknown_preset(self):
        """Only listed presets are known."""
        with pytest.raises(ConfigurationError):
            get_preset("7b")


class TestFlops:
    """Test the multiply-add model."""

    @pytest.mark.parametrize("preset", ["60m", "130m", "350m", "1b"])
    def test_sparse_gemm_halved_but_ffn_below_two(self, preset):
        """Only the activation GEMM halves, so the FFN bound is under 2x."""
        estimate = spmm_flop_model(preset, 2048)
        assert estimate.sparse_gemm_ratio == 0.5
        assert 1.0 < estimate.ffn_ideal_speedup < 2.0

    def test_full_rank_bound(self):
        """Equal up and down GEMMs give exactly 4/3."""
        assert spmm_flop_model("1b", 2048).ffn_ideal_speedup == pytest.approx(4 / 3)

    def test_low_rank_bound(self):
        """Factored projections shrink the sparse share further."""
        full = spmm_flop_model("1b", 2048).ffn_ideal_speedup
        factored = spmm_flop_model("1b", 2048, rank=256).ffn_ideal_speedup
        assert 1.0 < factored < full

    def test_published_measurement_attached(self):
        """Measured speedups ride along for listed lengths only."""
        assert spmm_flop_model("1b", 2048).measured_speedup == 2.47
        assert spmm_flop_model("1b", 1000).measured_speedup is None

    def test_rank_out_of_range(self):
        """Rank must fit the layer."""
        with pytest.raises(ConfigurationError):
            spmm_flop_model("60m", 512, rank=600)


class TestTables:
    """Test table generation and output."""

    def test_memory_table_shape(self):
        """Two method rows and eight batch columns."""
        table = memory_table()
        assert table.index.tolist() == ["LORO", "ELAS"]
        assert table.columns.tolist() == [str(b) for b in TABLE_BATCHES]
        assert table.loc["ELAS", "1"] == pytest.approx(table.loc["LORO", "1"] * 9 / 16)

    def test_speedup_table_covers_presets(self):
        """Seven lengths for each of the four presets."""
        table = speedup_table()
        assert len(table) == 28
        assert (table["ideal_ffn_speedup"] < 2.0).all()

    def test_emit_is_byte_identical_on_rerun(self, tmp_path):
        """Regenerating tables reproduces the same files."""
        first = emit_tables(tmp_path / "a")
        second = emit_tables(tmp_path / "b")
        assert [p.name for p in first] == [p.name for p in second]
        assert len(first) == 6
        for a, b in zip(first, second):
            assert a.read_bytes() == b.read_bytes()

    def test_csv_and_text_agree(self, tmp_path):
        """Both formats carry the same numbers."""
        table = memory_table()
        csv_path = write_table(table, tmp_path / "memory.csv")
        text_path = write_table(table, tmp_path / "memory.txt")
        csv = pd.read_csv(csv_path, index_col="method")
        assert csv.loc["LORO", "1"] == pytest.approx(1.4316)
        text = text_path.read_text(encoding="utf-8")
        for value in csv.to_numpy().ravel():
            assert f"{value:.4f}" in text

    def test_unknown_format(self, tmp_path):
        """Formats are csv or text."""
        with pytest.raises(ConfigurationError):
            emit_tables(tmp_path, formats=("xlsx",))


class TestPresets:
    """Test preset helpers."""

    def test_runnable_width_rounds_up(self):
        """5461 is not a multiple of 4; training would use 5464."""
        assert runnable_ffn_width(5461) == 5464
        assert runnable_ffn_width(2048) == 2048

    def test_presets_listed(self):
        """The four configurations from the cost tables."""
        assert get_preset("1B").hidden == 2048
        assert get_preset("60m").layers == 8
