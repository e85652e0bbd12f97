"""
Configuration module for ELAS.
Handles environment settings, named presets and key=value run config files.
"""

import logging
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence

from dotenv import dotenv_values
from pydantic import BaseModel, ConfigDict, ValidationError
from pydantic_settings import BaseSettings, SettingsConfigDict

from ..schemas.train import TrainConfig, preset_overrides
from .exceptions import ConfigurationError

logger = logging.getLogger(__name__)

PACKAGE_DIR = Path(__file__).resolve().parent.parent
DEFAULT_CORPUS_PATH = PACKAGE_DIR / "data" / "corpus.txt"

# Values that mean "unset" for optional fields in key=value files.
_NONE_LITERALS = {"", "none", "null"}


class BenchSettings(BaseModel):
    """Microbenchmark settings."""

    repetitions: int = 30
    shapes: List[str] = ["256x256", "1024x1024"]
    threads: int = 1

    model_config = ConfigDict(extra="forbid")


class CostModelSettings(BaseModel):
    """Activation-memory model settings."""

    preset: str = "1b"
    seq_len: int = 2048
    batches: List[int] = [1, 2, 4, 8, 16, 32, 64, 128]
    bytes_per_element: int = 2  # 16-bit activations
    saved_intermediates: int = 2

    model_config = ConfigDict(extra="forbid")


class Settings(BaseSettings):
    """Process-wide settings read from ELAS_* environment variables."""

    app_name: str = "ELAS"
    version: str = "0.1.0"

    log_level: str = "INFO"

    # Seed override of last resort (ELAS_SEED)
    seed: Optional[int] = None

    bench_repetitions: int = 30

    model_config = SettingsConfigDict(
        env_prefix="ELAS_",
        env_file=".env",
        env_file_encoding="utf-8",
        case_sensitive=False,
        extra="ignore",
    )

    @property
    def bench_settings(self) -> BenchSettings:
        """Get benchmark settings."""
        return BenchSettings(repetitions=self.bench_repetitions)

    @property
    def costmodel_settings(self) -> CostModelSettings:
        """Get cost model settings."""
        return CostModelSettings()

    @property
    def numeric_log_level(self) -> int:
        level = logging.getLevelName(self.log_level.upper())
        return level if isinstance(level, int) else logging.INFO


def get_settings() -> Settings:
    """Read settings from the current environment."""
    return Settings()


def parse_overrides(pairs: Sequence[str]) -> Dict[str, str]:
    """
    Parse CLI ``key=value`` override pairs.

    Args:
        pairs: Raw ``key=value`` strings

    Returns:
        Mapping of key to raw string value

    Raises:
        ConfigurationError: If a pair has no '=' or an empty key
    """
    overrides: Dict[str, str] = {}
    for pair in pairs:
        key, sep, value = pair.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigurationError(f"Override must be key=value, got {pair!r}")
        overrides[key] = value.strip()
    return overrides


def read_config_file(path: Path) -> Dict[str, str]:
    """
    Read a flat UTF-8 ``key=value`` file with ``#`` comments.

    Raises:
        ConfigurationError: If the file is missing
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"Config file not found: {path}")
    values = dotenv_values(path, encoding="utf-8", interpolate=False)
    return {key: (value or "") for key, value in values.items()}


def _normalize(raw: Mapping[str, Any]) -> Dict[str, Any]:
    """Map 'none' literals to None so optional fields can be cleared."""
    result: Dict[str, Any] = {}
    for key, value in raw.items():
        if isinstance(value, str) and value.strip().lower() in _NONE_LITERALS:
            result[key] = None
        else:
            result[key] = value
    return result


def build_train_config(
    preset: str = "desk",
    file_values: Optional[Mapping[str, Any]] = None,
    overrides: Optional[Mapping[str, Any]] = None,
    settings: Optional[Settings] = None,
) -> TrainConfig:
    """
    Resolve a TrainConfig from its layers.

    Precedence, highest first: overrides, file values, preset, ELAS_SEED
    (seed only, and only when nothing else sets it), field defaults.

    Raises:
        ConfigurationError: Unknown preset/keys or invalid values
    """
    presets = preset_overrides()
    if preset not in presets:
        raise ConfigurationError(
            f"Unknown preset {preset!r}; choose from {sorted(presets)}"
        )

    merged: Dict[str, Any] = dict(presets[preset])
    merged.update(_normalize(file_values or {}))
    merged.update(_normalize(overrides or {}))

    unknown = sorted(set(merged) - set(TrainConfig.model_fields))
    if unknown:
        raise ConfigurationError(f"Unknown config keys: {', '.join(unknown)}")

    if merged.get("seed") is None:
        merged.pop("seed", None)
        env_seed = (settings or get_settings()).seed
        if env_seed is not None:
            logger.info(f"Using seed {env_seed} from ELAS_SEED")
            merged["seed"] = env_seed

    try:
        return TrainConfig(**merged)
    except ValidationError as e:
        raise ConfigurationError(f"Invalid training config: {e}") from e


def load_train_config(
    path: Optional[Path] = None,
    overrides: Sequence[str] = (),
    preset: str = "desk",
    settings: Optional[Settings] = None,
) -> TrainConfig:
    """
    Load a TrainConfig from an optional key=value file plus CLI overrides.

    Args:
        path: Config file (None for preset only)
        overrides: ``key=value`` strings applied on top of the file
        preset: Named preset supplying the base values
        settings: Environment settings (read fresh when None)

    Returns:
        Validated training configuration
    """
    file_values = read_config_file(path) if path is not None else {}
    if "preset" in file_values:
        preset = file_values.pop("preset") or preset
    return build_train_config(
        preset=preset,
        file_values=file_values,
        overrides=parse_overrides(overrides),
        settings=settings,
    )


def configure_logging(settings: Optional[Settings] = None, level: Optional[str] = None) -> None:
    """Configure root logging once for CLI entry points."""
    settings = settings or get_settings()
    numeric = (
        logging.getLevelName(level.upper()) if level else settings.numeric_log_level
    )
    logging.basicConfig(
        level=numeric if isinstance(numeric, int) else logging.INFO,
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
    )
