"""
Test configuration and fixtures for ELAS tests.
"""

from pathlib import Path

import numpy as np
import pytest

from elas.core.config import build_train_config
from elas.schemas.train import Precision, TrainConfig
from elas.services.corpus import Corpus


@pytest.fixture
def rng() -> np.random.Generator:
    """Seeded generator; every test gets the same stream."""
    return np.random.default_rng(1234)


@pytest.fixture
def corpus() -> Corpus:
    """Bundled byte corpus."""
    return Corpus.from_file()


@pytest.fixture
def tiny_config(tmp_path: Path) -> TrainConfig:
    """Gradient-check sized model writing into a temporary run directory."""
    return build_train_config(
        preset="tiny",
        overrides={"output_dir": str(tmp_path / "run")},
    )


@pytest.fixture
def tiny_config64(tiny_config: TrainConfig) -> TrainConfig:
    """Tiny config in float64 for finite differences."""
    return tiny_config.with_overrides(precision=Precision.FLOAT64)


@pytest.fixture
def fast_config(tiny_config: TrainConfig) -> TrainConfig:
    """Tiny model with a short schedule for loop tests."""
    return tiny_config.with_overrides(
        total_steps=12,
        warmup_steps=4,
        refresh_every=5,
        eval_interval=4,
        eval_batches=1,
    )
