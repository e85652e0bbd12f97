"""
Training loop: dense warmup, then 2:4-sparse FFN activations, with AdamW
steps, periodic exact refresh, evaluation rows and resumable checkpoints.
"""

import logging
import math
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import List, Optional, Sequence, Union

import numpy as np
import pandas as pd

from ..core.exceptions import ConfigurationError, NumericError
from ..schemas.train import METRICS_COLUMNS, MetricsRow, SparsifierKind, TrainConfig, perplexity
from .checkpoint import load_checkpoint, restore, save_checkpoint
from .corpus import Corpus, Split
from .model import TinyTransformer, build_model, collect_ffn_activations, model_backward, model_forward
from .optimizer import LrSchedule, OptimizerState, clip_gradients, lr_at, refresh_all, step_approx

logger = logging.getLogger(__name__)

# Fields that may differ between a checkpoint and the config resuming from it
_RESUME_FREE_FIELDS = {
    "output_dir",
    "metrics_path",
    "checkpoint_path",
    "checkpoint_every",
    "record_timing",
}


def periodic_checkpoint_path(config: TrainConfig, step: int) -> Path:
    """Where the checkpoint taken after ``step`` updates goes when checkpoint_every is set."""
    return config.output_dir / f"checkpoint-{step:06d}.elas"


class RunStatus(str, Enum):
    COMPLETED = "completed"
    DIVERGED = "diverged"


@dataclass
class EvalResult:
    """Mean token cross-entropy over a split."""
    loss: float
    perplexity: float
    ffn_sparsity: float
    tokens: int


@dataclass
class TrainingResult:
    """Outcome of ``run_training``."""
    status: RunStatus
    config: TrainConfig
    metrics: List[MetricsRow]
    model: TinyTransformer
    optimizer: OptimizerState
    steps_run: int
    metrics_path: Path
    checkpoint_path: Optional[Path] = None
    first_sparse_step: Optional[int] = None
    refreshes: int = 0
    saved_ffn_bytes: List[float] = field(default_factory=list)

    @property
    def final(self) -> MetricsRow:
        return self.metrics[-1]

    @property
    def diverged(self) -> bool:
        return self.status == RunStatus.DIVERGED


def evaluate(
    model: TinyTransformer,
    corpus: Corpus,
    batch_size: int,
    seq_len: int,
    max_batches: Optional[int] = None,
    sparsity_on: bool = False,
    split: Union[Split, str] = Split.EVAL,
) -> EvalResult:
    """
    Token-weighted mean cross-entropy over contiguous windows of a split.

    Raises:
        ConfigurationError: If max_batches is below 1
        EmptySplitError: If the split cannot hold one window
    """
    if max_batches is not None and max_batches < 1:
        raise ConfigurationError(f"max_batches must be at least 1, got {max_batches}")
    total_loss = 0.0
    total_tokens = 0
    sparsity: List[float] = []
    for inputs, targets in corpus.eval_batches(batch_size, seq_len, max_batches, split):
        result = model_forward(model, inputs, sparsity_on=sparsity_on, targets=targets)
        total_loss += result.loss * targets.size
        total_tokens += targets.size
        sparsity.append(result.ffn_sparsity)
    loss = total_loss / total_tokens
    return EvalResult(
        loss=loss,
        perplexity=perplexity(loss),
        ffn_sparsity=float(np.mean(sparsity)),
        tokens=total_tokens,
    )


def write_metrics(rows: Sequence[MetricsRow], path: Union[str, Path]) -> Path:
    """Write metrics rows as CSV; non-finite values are written as NaN/inf."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame([row.model_dump() for row in rows], columns=METRICS_COLUMNS)
    frame.to_csv(path, index=False, na_rep="NaN")
    return path


def read_metrics(path: Union[str, Path]) -> pd.DataFrame:
    return pd.read_csv(path)


def _check_resume_config(config: TrainConfig, stored: TrainConfig) -> None:
    ours = config.model_dump(exclude=_RESUME_FREE_FIELDS)
    theirs = stored.model_dump(exclude=_RESUME_FREE_FIELDS)
    changed = sorted(key for key in ours if ours[key] != theirs[key])
    if changed:
        raise ConfigurationError(
            f"Cannot resume: config differs from the checkpoint in {', '.join(changed)}"
        )


def _calibrate(model: TinyTransformer, inputs: np.ndarray) -> None:
    activations = collect_ffn_activations(model, inputs)
    for i, (ffn, batch) in enumerate(zip(model.ffns(), activations)):
        ffn.sparsifier = ffn.sparsifier.with_calibration(batch)
        logger.info(f"Calibrated soft_activation scale for layer {i}: {ffn.sparsifier.scale:.6g}")


def _needs_calibration(model: TinyTransformer, config: TrainConfig) -> bool:
    return config.sparsifier == SparsifierKind.SOFT_ACTIVATION and not all(
        ffn.sparsifier.calibrated for ffn in model.ffns()
    )


class Trainer:
    """Mutable state of one training run."""

    def __init__(self, config: TrainConfig, corpus: Corpus):
        self.config = config
        self.corpus = corpus
        self.schedule = LrSchedule.from_config(config)
        self.model = build_model(config)
        self.optimizer = OptimizerState.from_config(config)
        self.metrics: List[MetricsRow] = []
        self.start_step = 0
        self.first_sparse_step: Optional[int] = None
        self.refreshes = 0
        self.saved_ffn_bytes: List[float] = []
        self.elapsed_ms = 0.0
        self.timed_steps = 0
        self.last_sparsity = 0.0

    def resume(self, path: Union[str, Path]) -> None:
        checkpoint = load_checkpoint(path)
        _check_resume_config(self.config, checkpoint.config)
        self.model, self.optimizer = restore(checkpoint)
        self.start_step = checkpoint.step
        self.metrics = list(checkpoint.metrics)
        logger.info(f"Resumed from {path} at step {checkpoint.step}")

    def sparse_at(self, step: int) -> bool:
        return self.config.sparsifier is not None and step >= self.config.warmup_steps

    def eval_row(self, step: int, train_loss: float) -> MetricsRow:
        # Evaluation mirrors the path the last training step took
        sparse_eval = step > 0 and self.sparse_at(step - 1)
        result = evaluate(
            self.model,
            self.corpus,
            self.config.batch_size,
            self.config.seq_len,
            self.config.eval_batches,
            sparsity_on=sparse_eval,
        )
        ms = self.elapsed_ms / self.timed_steps if self.timed_steps else 0.0
        self.elapsed_ms, self.timed_steps = 0.0, 0
        row = MetricsRow.from_eval(
            step=step,
            lr=lr_at(self.schedule, step, self.config.total_steps),
            train_loss=train_loss,
            eval_loss=result.loss,
            ffn_sparsity=result.ffn_sparsity,
            ms_per_step=ms if self.config.record_timing else 0.0,
        )
        logger.info(
            f"step {step}: train_loss={train_loss:.4f} eval_loss={row.eval_loss:.4f} "
            f"ppl={row.eval_ppl:.3f} sparsity={row.ffn_sparsity:.3f}"
        )
        return row

    def diverged_row(self, step: int, lr: float, sparsity: float) -> MetricsRow:
        nan = float("nan")
        return MetricsRow(
            step=step,
            lr=lr,
            train_loss=nan,
            eval_loss=nan,
            eval_ppl=nan,
            ffn_sparsity=sparsity,
            ms_per_step=0.0,
        )

    def train_step(self, step: int) -> float:
        """
        One optimizer step.

        Raises:
            NumericError: Loss or gradients are not finite
        """
        config = self.config
        inputs, targets = self.corpus.train_batch(step, config.batch_size, config.seq_len, config.seed)
        sparse = self.sparse_at(step)
        if sparse and _needs_calibration(self.model, config):
            _calibrate(self.model, inputs)

        calls_before = self.model.sparsify_calls
        result = model_forward(self.model, inputs, sparsity_on=sparse, targets=targets)
        if self.first_sparse_step is None and self.model.sparsify_calls > calls_before:
            self.first_sparse_step = step
        if not math.isfinite(result.loss):
            raise NumericError(f"Loss is {result.loss} at step {step}", {"step": step})
        self.last_sparsity = result.ffn_sparsity
        if step in (0, config.warmup_steps):
            self.saved_ffn_bytes.append(result.saved.ffn_nbytes())

        if step == 0:
            self.metrics.append(self.eval_row(0, result.loss))

        grads = model_backward(self.model, result.saved)
        if config.grad_clip is not None:
            clip_gradients(grads, config.grad_clip)
        lr = lr_at(self.schedule, step, config.total_steps)
        step_approx(self.optimizer, self.model.parameters(), grads, lr)

        if (step + 1) % config.refresh_every == 0:
            self.refreshes += refresh_all(self.optimizer, self.model.low_rank_layers())
        logger.debug(f"step {step}: loss={result.loss:.5f} lr={lr:.3e}")
        return result.loss

    def run(self) -> TrainingResult:
        config = self.config
        metrics_path = config.resolved_metrics_path
        checkpoint_path: Optional[Path] = None
        logger.info(
            f"Training {config.n_layers}x{config.d_model} model for {config.total_steps} steps "
            f"(warmup {config.warmup_steps}, sparsifier "
            f"{config.sparsifier.value if config.sparsifier else 'none'})"
        )

        if config.total_steps == 0 and not self.metrics:
            self.metrics.append(self.eval_row(0, float("nan")))

        for step in range(self.start_step, config.total_steps):
            started = time.perf_counter()
            try:
                loss = self.train_step(step)
            except NumericError as e:
                logger.warning(f"Run diverged at step {step}: {e}")
                lr = lr_at(self.schedule, step, config.total_steps)
                self.metrics.append(self.diverged_row(step, lr, self.last_sparsity))
                write_metrics(self.metrics, metrics_path)
                return self._result(RunStatus.DIVERGED, step, metrics_path, checkpoint_path)
            self.elapsed_ms += (time.perf_counter() - started) * 1000.0
            self.timed_steps += 1

            done = step + 1
            if done % config.eval_interval == 0 or done == config.total_steps:
                self.metrics.append(self.eval_row(done, loss))
                write_metrics(self.metrics, metrics_path)
            if config.checkpoint_every and done % config.checkpoint_every == 0:
                checkpoint_path = self.checkpoint(done, periodic_checkpoint_path(config, done))

        write_metrics(self.metrics, metrics_path)
        checkpoint_path = self.checkpoint(config.total_steps)
        return self._result(RunStatus.COMPLETED, config.total_steps, metrics_path, checkpoint_path)

    def checkpoint(self, step: int, path: Optional[Path] = None) -> Path:
        return save_checkpoint(
            path or self.config.resolved_checkpoint_path,
            self.model,
            self.optimizer,
            self.config,
            step,
            self.metrics,
        )

    def _result(
        self, status: RunStatus, steps: int, metrics_path: Path, checkpoint_path: Optional[Path]
    ) -> TrainingResult:
        logger.info(f"Run {status.value} after {steps} steps; metrics in {metrics_path}")
        return TrainingResult(
            status=status,
            config=self.config,
            metrics=self.metrics,
            model=self.model,
            optimizer=self.optimizer,
            steps_run=steps - self.start_step,
            metrics_path=metrics_path,
            checkpoint_path=checkpoint_path,
            first_sparse_step=self.first_sparse_step,
            refreshes=self.refreshes,
            saved_ffn_bytes=self.saved_ffn_bytes,
        )


def run_training(
    config: TrainConfig,
    resume_from: Optional[Union[str, Path]] = None,
    corpus: Optional[Corpus] = None,
) -> TrainingResult:
    """
    Train a model from ``config``: dense while step < warmup_steps, sparse after.

    Args:
        config: Training configuration
        resume_from: Checkpoint to continue from; the remaining metrics match
            an uninterrupted run exactly
        corpus: Pre-loaded corpus (read from ``config.corpus_path`` when None)

    Returns:
        Result with status ``completed`` or ``diverged``; divergence leaves a
        NaN row in the metrics file instead of raising
    """
    corpus = corpus or Corpus.from_file(config.corpus_path, config.eval_fraction)
    trainer = Trainer(config, corpus)
    if resume_from is not None:
        trainer.resume(resume_from)
    return trainer.run()


def evaluate_checkpoint(
    path: Union[str, Path], corpus: Optional[Corpus] = None, max_batches: Optional[int] = None
) -> EvalResult:
    """Evaluate a saved model on its eval split, mirroring its train-time sparsity."""
    checkpoint = load_checkpoint(path)
    config = checkpoint.config
    corpus = corpus or Corpus.from_file(config.corpus_path, config.eval_fraction)
    model, _ = restore(checkpoint)
    sparse = (
        config.sparsifier is not None
        and checkpoint.step > config.warmup_steps
        and not _needs_calibration(model, config)
    )
    return evaluate(
        model,
        corpus,
        config.batch_size,
        config.seq_len,
        max_batches if max_batches is not None else config.eval_batches,
        sparsity_on=sparse,
    )


def with_run_dir(config: TrainConfig, run_dir: Union[str, Path]) -> TrainConfig:
    """Copy of ``config`` writing its outputs under ``run_dir``."""
    return config.with_overrides(output_dir=Path(run_dir), metrics_path=None, checkpoint_path=None)
