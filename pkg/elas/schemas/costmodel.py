"""
Pydantic schemas for the activation-memory and FLOP cost model.
"""

from typing import Optional

from pydantic import BaseModel, ConfigDict, Field


class ModelPreset(BaseModel):
    """LLaMA-style model size, as listed in the published configuration table."""

    name: str = Field(..., description="Preset key, e.g. '1b'")
    hidden: int = Field(..., ge=1)
    intermediate: int = Field(..., ge=1)
    heads: int = Field(..., ge=1)
    layers: int = Field(..., ge=1)
    training_tokens: float = Field(..., gt=0)

    model_config = ConfigDict(extra="forbid", frozen=True)


class MemoryEstimate(BaseModel):
    """FFN activation memory in decimal GB (10^9 bytes)."""

    dense_gb: float
    sparse_gb: float
    ratio: float
    sparse: bool = Field(False, description="Which side the caller asked for")

    model_config = ConfigDict(extra="forbid", frozen=True)

    @property
    def gb(self) -> float:
        return self.sparse_gb if self.sparse else self.dense_gb


class FlopEstimate(BaseModel):
    """Multiply-add counts of one FFN forward over a sequence."""

    preset: str
    seq_len: int
    rank: Optional[int] = None
    up_macs: float
    down_dense_macs: float
    down_sparse_macs: float
    sparse_gemm_ratio: float = Field(..., description="Sparsified GEMM, sparse/dense")
    ffn_ideal_speedup: float = Field(..., description="Whole FFN, dense/sparse")
    measured_speedup: Optional[float] = Field(
        None, description="Published hardware measurement, context only"
    )

    model_config = ConfigDict(extra="forbid", frozen=True)


MODEL_PRESETS = {
    preset.name: preset
    for preset in (
        ModelPreset(
            name="60m", hidden=512, intermediate=1376, heads=8, layers=8,
            training_tokens=1.3e9,
        ),
        ModelPreset(
            name="130m", hidden=768, intermediate=2048, heads=12, layers=12,
            training_tokens=2.6e9,
        ),
        ModelPreset(
            name="350m", hidden=1024, intermediate=2736, heads=16, layers=24,
            training_tokens=6.4e9,
        ),
        ModelPreset(
            name="1b", hidden=2048, intermediate=5461, heads=24, layers=32,
            training_tokens=13.1e9,
        ),
    )
}
