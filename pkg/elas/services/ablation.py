"""
Ablation sweeps over dense-warmup length and sparsifier variant.

Each run gets its own output directory under the sweep directory and the
same seed. A run that diverges or fails is recorded as a NaN row; the sweep
carries on.
"""

import logging
import math
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import pandas as pd

from ..core.exceptions import ConfigurationError, ElasError
from ..schemas.train import SparsifierKind, TrainConfig
from .corpus import Corpus
from .trainer import RunStatus, TrainingResult, run_training, with_run_dir

logger = logging.getLogger(__name__)

ABLATION_COLUMNS = ["run", "warmup_steps", "sparsifier", "status", "steps", "final_eval_loss", "final_ppl"]


def _row(run: str, config: TrainConfig, result: Optional[TrainingResult], error: str = "") -> Dict:
    if result is None:
        return {
            "run": run,
            "warmup_steps": config.warmup_steps,
            "sparsifier": config.sparsifier.value if config.sparsifier else "none",
            "status": f"error: {error}",
            "steps": 0,
            "final_eval_loss": math.nan,
            "final_ppl": math.nan,
        }
    final = result.final
    diverged = result.status == RunStatus.DIVERGED
    return {
        "run": run,
        "warmup_steps": config.warmup_steps,
        "sparsifier": config.sparsifier.value if config.sparsifier else "none",
        "status": result.status.value,
        "steps": final.step,
        "final_eval_loss": math.nan if diverged else final.eval_loss,
        "final_ppl": math.nan if diverged else final.eval_ppl,
    }


def _run_one(run: str, config: TrainConfig, corpus: Corpus) -> Dict:
    try:
        result = run_training(config, corpus=corpus)
    except ElasError as e:
        logger.error(f"Ablation run {run} failed: {e}")
        return _row(run, config, None, str(e))
    logger.info(f"Ablation run {run}: {result.status.value}, final ppl {result.final.eval_ppl:.3f}")
    return _row(run, config, result)


def _write(table: pd.DataFrame, out: Optional[Union[str, Path]]) -> None:
    if out is not None:
        path = Path(out)
        path.parent.mkdir(parents=True, exist_ok=True)
        table.to_csv(path, index=False, na_rep="NaN")
        logger.info(f"Wrote ablation table to {path}")


def run_warmup_ablation(
    config: TrainConfig,
    warmup_list: Sequence[int],
    corpus: Optional[Corpus] = None,
    out: Optional[Union[str, Path]] = None,
) -> pd.DataFrame:
    """
    One training run per dense-warmup length, identical seeds.

    Raises:
        ConfigurationError: If a warmup value exceeds total_steps
    """
    too_long = [w for w in warmup_list if w > config.total_steps or w < 0]
    if too_long:
        raise ConfigurationError(
            f"Warmup values {too_long} fall outside [0, total_steps={config.total_steps}]"
        )
    corpus = corpus or Corpus.from_file(config.corpus_path, config.eval_fraction)
    rows: List[Dict] = []
    for i, warmup in enumerate(warmup_list):
        run = f"warmup-{warmup}"
        run_config = with_run_dir(config, config.output_dir / f"{i:02d}-{run}").with_overrides(
            warmup_steps=warmup
        )
        rows.append(_run_one(run, run_config, corpus))
    table = pd.DataFrame(rows, columns=ABLATION_COLUMNS)
    _write(table, out)
    return table


def run_sparsifier_ablation(
    config: TrainConfig,
    variants: Sequence[Union[SparsifierKind, str]],
    corpus: Optional[Corpus] = None,
    out: Optional[Union[str, Path]] = None,
) -> pd.DataFrame:
    """
    One training run per sparsifier variant.

    soft_activation calibrates its per-layer scale on the first post-warmup
    batch inside the run.

    Raises:
        ConfigurationError: Unknown variant name
    """
    try:
        kinds = [SparsifierKind(v) for v in variants]
    except ValueError as e:
        raise ConfigurationError(f"Unknown sparsifier variant: {e}") from e
    corpus = corpus or Corpus.from_file(config.corpus_path, config.eval_fraction)
    rows: List[Dict] = []
    for i, kind in enumerate(kinds):
        run = kind.value
        run_config = with_run_dir(config, config.output_dir / f"{i:02d}-{run}").with_overrides(
            sparsifier=kind
        )
        rows.append(_run_one(run, run_config, corpus))
    table = pd.DataFrame(rows, columns=ABLATION_COLUMNS)
    _write(table, out)
    return table
