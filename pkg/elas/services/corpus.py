"""
Byte-level corpus with deterministic train/eval batching.
"""

import logging
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterator, Optional, Tuple, Union

import numpy as np

from ..core.config import DEFAULT_CORPUS_PATH
from ..core.exceptions import ConfigurationError, EmptySplitError

logger = logging.getLogger(__name__)

BYTE_VOCAB = 256


class Split(str, Enum):
    TRAIN = "train"
    EVAL = "eval"


@dataclass(frozen=True)
class Corpus:
    """Token ids 0..255 with the last ``eval_fraction`` held out for evaluation."""
    tokens: np.ndarray
    eval_fraction: float = 0.1
    source: str = ""

    def __post_init__(self) -> None:
        if not 0.0 < self.eval_fraction < 1.0:
            raise ConfigurationError(
                f"eval_fraction must be in (0, 1), got {self.eval_fraction}"
            )

    @classmethod
    def from_bytes(cls, data: bytes, eval_fraction: float = 0.1, source: str = "") -> "Corpus":
        tokens = np.frombuffer(data, dtype=np.uint8).astype(np.int64)
        return cls(tokens=tokens, eval_fraction=eval_fraction, source=source)

    @classmethod
    def from_file(
        cls, path: Optional[Union[str, Path]] = None, eval_fraction: float = 0.1
    ) -> "Corpus":
        """
        Read a corpus file as raw bytes (the bundled text when path is None).

        Raises:
            ConfigurationError: If the file does not exist
        """
        path = Path(path) if path is not None else DEFAULT_CORPUS_PATH
        if not path.is_file():
            raise ConfigurationError(f"Corpus file not found: {path}")
        corpus = cls.from_bytes(path.read_bytes(), eval_fraction, source=str(path))
        logger.info(
            f"Loaded corpus {path.name}: {corpus.tokens.size} bytes "
            f"({corpus.split_tokens(Split.TRAIN).size} train / "
            f"{corpus.split_tokens(Split.EVAL).size} eval)"
        )
        return corpus

    @property
    def split_offset(self) -> int:
        return int(round(self.tokens.size * (1.0 - self.eval_fraction)))

    def split_tokens(self, split: Union[Split, str]) -> np.ndarray:
        """Disjoint token ranges: train before the offset, eval after."""
        if Split(split) == Split.TRAIN:
            return self.tokens[: self.split_offset]
        return self.tokens[self.split_offset:]

    def _windows(self, split: Union[Split, str], seq_len: int) -> np.ndarray:
        data = self.split_tokens(split)
        if data.size < seq_len + 1:
            raise EmptySplitError(
                f"{Split(split).value} split has {data.size} tokens; "
                f"need at least {seq_len + 1} for sequence length {seq_len}"
            )
        return data

    def train_batch(
        self, step: int, batch_size: int, seq_len: int, seed: int
    ) -> Tuple[np.ndarray, np.ndarray]:
        """
        Random training windows; a pure function of (seed, step).

        Returns:
            (inputs, targets) of shape (batch_size, seq_len), targets shifted by one
        """
        data = self._windows(Split.TRAIN, seq_len)
        rng = np.random.default_rng([seed, step])
        starts = rng.integers(0, data.size - seq_len, size=batch_size)
        windows = np.stack([data[s: s + seq_len + 1] for s in starts])
        return windows[:, :-1], windows[:, 1:]

    def eval_batches(
        self,
        batch_size: int,
        seq_len: int,
        max_batches: Optional[int] = None,
        split: Union[Split, str] = Split.EVAL,
    ) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
        """
        Contiguous non-overlapping windows over a split, in order.

        Raises:
            EmptySplitError: If not even one window fits
        """
        data = self._windows(split, seq_len)
        n_windows = (data.size - 1) // seq_len
        windows = np.stack(
            [data[i * seq_len: i * seq_len + seq_len + 1] for i in range(n_windows)]
        )
        produced = 0
        for start in range(0, n_windows, batch_size):
            if max_batches is not None and produced >= max_batches:
                return
            chunk = windows[start: start + batch_size]
            yield chunk[:, :-1], chunk[:, 1:]
            produced += 1
