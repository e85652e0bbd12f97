"""
Pydantic schemas for training configuration and metrics.
"""

import math
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from ..core.exceptions import ConfigurationError


class Precision(str, Enum):
    """Floating point mode for parameters and activations."""
    FLOAT32 = "float32"
    FLOAT64 = "float64"

    @property
    def dtype(self) -> np.dtype:
        return np.dtype(self.value)


class SparsifierKind(str, Enum):
    """2:4 activation sparsifier strategies."""
    NAIVE = "naive"
    SOFT_WEIGHTS = "soft_weights"
    SOFT_ACTIVATION = "soft_activation"


class TrainConfig(BaseModel):
    """
    Complete configuration of one training run.

    Model shapes follow the tokens-as-columns convention used by the model:
    activations are (features x tokens).
    """

    # Model dimensions
    d_model: int = Field(64, ge=2, description="Hidden size")
    d_ff: int = Field(256, ge=4, description="FFN intermediate size")
    n_heads: int = Field(4, ge=1, description="Attention heads")
    n_layers: int = Field(2, ge=1, description="Transformer blocks")
    vocab_size: int = Field(256, ge=1, description="Vocabulary size (bytes)")
    seq_len: int = Field(64, ge=2, description="Maximum sequence length")
    r_attn: int = Field(16, ge=1, description="Rank of attention projections")
    r_mlp: int = Field(16, ge=1, description="Rank of FFN projections")
    precision: Precision = Field(Precision.FLOAT32, description="Training dtype")

    # Schedule
    warmup_steps: int = Field(200, ge=0, description="Dense warmup steps (N_warmup)")
    total_steps: int = Field(2000, ge=0, description="Total steps (N_total)")
    refresh_every: int = Field(500, ge=1, description="Exact refresh period")
    batch_size: int = Field(8, ge=1, description="Sequences per step")

    # Optimizer
    base_lr: float = Field(3e-3, gt=0, description="Peak learning rate")
    min_lr: float = Field(3e-4, ge=0, description="Cosine floor")
    lr_warmup_fraction: float = Field(0.1, ge=0.0, le=1.0)
    beta1: float = Field(0.9, ge=0.0, lt=1.0)
    beta2: float = Field(0.999, ge=0.0, lt=1.0)
    eps: float = Field(1e-8, gt=0)
    weight_decay: float = Field(0.0, ge=0.0)
    grad_clip: Optional[float] = Field(1.0, gt=0, description="Global norm clip")

    # Sparsity
    sparsifier: Optional[SparsifierKind] = Field(
        SparsifierKind.NAIVE, description="None trains the dense LORO baseline"
    )

    # Data and outputs
    seed: int = Field(0, ge=0)
    corpus_path: Optional[Path] = Field(None, description="None uses the bundled corpus")
    eval_fraction: float = Field(0.1, gt=0.0, lt=1.0)
    eval_interval: int = Field(100, ge=1)
    eval_batches: int = Field(4, ge=1)
    output_dir: Path = Field(Path("runs/default"))
    metrics_path: Optional[Path] = None
    checkpoint_path: Optional[Path] = None
    checkpoint_every: Optional[int] = Field(None, ge=1)
    record_timing: bool = Field(False, description="Write measured ms_per_step instead of 0")

    model_config = ConfigDict(extra="forbid", frozen=True)

    @model_validator(mode="after")
    def validate_shapes(self) -> "TrainConfig":
        """Cross-field invariants."""
        if self.warmup_steps > self.total_steps:
            raise ValueError(
                f"warmup_steps ({self.warmup_steps}) exceeds total_steps "
                f"({self.total_steps})"
            )
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.r_attn > self.d_model:
            raise ValueError("r_attn must not exceed d_model")
        if self.r_mlp > min(self.d_model, self.d_ff):
            raise ValueError("r_mlp must not exceed min(d_model, d_ff)")
        if self.sparsifier is not None and self.d_ff % 4:
            raise ValueError("d_ff must be a multiple of 4 when a sparsifier is active")
        if self.min_lr > self.base_lr:
            raise ValueError("min_lr must not exceed base_lr")
        return self

    @property
    def uses_sparsity(self) -> bool:
        return self.sparsifier is not None and self.warmup_steps < self.total_steps

    @property
    def resolved_metrics_path(self) -> Path:
        return self.metrics_path or self.output_dir / "metrics.csv"

    @property
    def resolved_checkpoint_path(self) -> Path:
        return self.checkpoint_path or self.output_dir / "checkpoint.elas"

    def with_overrides(self, **updates: Any) -> "TrainConfig":
        """Validated copy with some fields replaced."""
        data = self.model_dump()
        data.update(updates)
        try:
            return TrainConfig(**data)
        except ValidationError as e:
            raise ConfigurationError(f"Invalid training config: {e}") from e


class MetricsRow(BaseModel):
    """One evaluation row of the metrics CSV; field order is the header."""

    step: int
    lr: float
    train_loss: float
    eval_loss: float
    eval_ppl: float
    ffn_sparsity: float
    ms_per_step: float

    model_config = ConfigDict(extra="forbid")

    @classmethod
    def from_eval(
        cls,
        step: int,
        lr: float,
        train_loss: float,
        eval_loss: float,
        ffn_sparsity: float,
        ms_per_step: float,
    ) -> "MetricsRow":
        """Build a row with perplexity derived from the eval loss."""
        return cls(
            step=step,
            lr=lr,
            train_loss=train_loss,
            eval_loss=eval_loss,
            eval_ppl=perplexity(eval_loss),
            ffn_sparsity=ffn_sparsity,
            ms_per_step=ms_per_step,
        )

    @property
    def diverged(self) -> bool:
        return not math.isfinite(self.eval_ppl)


METRICS_COLUMNS = list(MetricsRow.model_fields)


def perplexity(loss: float) -> float:
    """exp(loss); NaN stays NaN and overflow gives inf."""
    if math.isnan(loss):
        return float("nan")
    try:
        return math.exp(loss)
    except OverflowError:
        return float("inf")


def preset_overrides() -> Dict[str, Dict[str, Any]]:
    """Named training presets as field overrides on TrainConfig defaults."""
    return {
        "desk": {},
        "tiny": {
            "d_model": 16,
            "d_ff": 32,
            "n_heads": 2,
            "n_layers": 2,
            "r_attn": 4,
            "r_mlp": 4,
            "seq_len": 8,
            "batch_size": 2,
            "total_steps": 40,
            "warmup_steps": 10,
            "refresh_every": 20,
            "eval_interval": 10,
            "eval_batches": 2,
        },
    }
