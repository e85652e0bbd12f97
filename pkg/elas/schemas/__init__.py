"""
Pydantic schemas for configuration, metrics, presets and reports.
"""

from .bench import BenchReport
from .costmodel import MODEL_PRESETS, FlopEstimate, MemoryEstimate, ModelPreset
from .train import (
    METRICS_COLUMNS,
    MetricsRow,
    Precision,
    SparsifierKind,
    TrainConfig,
    perplexity,
    preset_overrides,
)

__all__ = [
    "BenchReport",
    "FlopEstimate",
    "MemoryEstimate",
    "MODEL_PRESETS",
    "ModelPreset",
    "METRICS_COLUMNS",
    "MetricsRow",
    "Precision",
    "SparsifierKind",
    "TrainConfig",
    "perplexity",
    "preset_overrides",
]
