"""
Numerical services for low-rank, 2:4-sparse transformer training.

- numerics: matmul, SVD, seeded Xavier initialization
- sparsity: 2:4 sparsifiers, packed storage, spmm, straight-through backward
- lowrank / model: factored layers, sparse ReLU^2 FFN, tiny causal transformer
- optimizer: AdamW steps, exact refresh, learning-rate schedule
- trainer / ablation: training loop, checkpoints, warmup and sparsifier sweeps
- costmodel / bench: activation-memory model and kernel microbenchmarks
"""

from .ablation import run_sparsifier_ablation, run_warmup_ablation
from .checkpoint import load_checkpoint, save_checkpoint
from .corpus import Corpus, Split
from .costmodel import emit_tables, ffn_activation_memory, spmm_flop_model
from .lowrank import LowRankLinear, SparseFfn, ffn_backward, ffn_forward, lr_backward, lr_forward
from .model import TinyTransformer, build_model, model_backward, model_forward
from .optimizer import LrSchedule, OptimizerState, lr_at, step_approx, step_exact_refresh
from .sparsity import (
    Packed24Tensor,
    SparsifierVariant,
    calibrate_soft_scale,
    mask_top2,
    pack,
    sparsify,
    spmm,
    unpack,
)
from .trainer import RunStatus, TrainingResult, evaluate, run_training

__all__ = [
    "run_sparsifier_ablation",
    "run_warmup_ablation",
    "load_checkpoint",
    "save_checkpoint",
    "Corpus",
    "Split",
    "emit_tables",
    "ffn_activation_memory",
    "spmm_flop_model",
    "LowRankLinear",
    "SparseFfn",
    "ffn_backward",
    "ffn_forward",
    "lr_backward",
    "lr_forward",
    "TinyTransformer",
    "build_model",
    "model_backward",
    "model_forward",
    "LrSchedule",
    "OptimizerState",
    "lr_at",
    "step_approx",
    "step_exact_refresh",
    "Packed24Tensor",
    "SparsifierVariant",
    "calibrate_soft_scale",
    "mask_top2",
    "pack",
    "sparsify",
    "spmm",
    "unpack",
    "RunStatus",
    "TrainingResult",
    "evaluate",
    "run_training",
]
