"""Byte-level sub-tokenization and PAD-aligned embedding lookup.

Byte ids are the raw UTF-8 byte values 0..255; id 256 is PAD.  Words are
stripped and joined with single spaces before encoding, so the sub-token count
does not depend on how an upstream stream happened to split the text.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from llmvox import lvx

N_BYTES = 256
PAD_ID = 256
TABLE_ROWS = N_BYTES + 1
DEFAULT_DIM = 256


class AlignmentError(ValueError):
    """Text is longer (in sub-tokens) than the speech sequence it should align to."""

    def __init__(self, m: int, t: int):
        super().__init__(f"{m} text sub-tokens cannot be padded to speech length {t}")
        self.m = m
        self.t = t


def join_words(words) -> str:
    if isinstance(words, str):
        words = [words]
    return " ".join(w for w in (word.strip() for word in words) if w)


def subtokenize(words) -> list[int]:
    return list(join_words(words).encode("utf-8"))


@dataclass
class EmbeddingTable:
    vectors: np.ndarray
    seed: int | None = None

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float32)
        if self.vectors.ndim != 2 or self.vectors.shape[0] != TABLE_ROWS:
            raise ValueError(
                f"embedding table must have {TABLE_ROWS} rows, got shape {self.vectors.shape}"
            )

    @classmethod
    def random(cls, dim: int = DEFAULT_DIM, seed: int = 0, scale: float = 0.02) -> "EmbeddingTable":
        rng = np.random.default_rng(seed)
        return cls(rng.normal(0.0, scale, size=(TABLE_ROWS, dim)), seed=seed)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    @property
    def pad_row(self) -> np.ndarray:
        return self.vectors[PAD_ID]

    def save(self, path) -> Path:
        path = Path(path)
        path.write_bytes(lvx.dumps_table(self.vectors))
        return path

    @classmethod
    def load(cls, path) -> "EmbeddingTable":
        return cls(lvx.loads_table(Path(path).read_bytes()))


@dataclass
class TextEmbeddingSeq:
    vectors: np.ndarray  # T x dim
    real_len: int

    def __len__(self) -> int:
        return self.vectors.shape[0]


def pad_ids(subtokens, t: int) -> np.ndarray:
    """Extend sub-token ids with PAD up to length ``t``."""
    ids = np.asarray(subtokens, dtype=np.int64).reshape(-1)
    m = ids.shape[0]
    if t < m:
        raise AlignmentError(m, t)
    if ids.size and (ids.min() < 0 or ids.max() > PAD_ID):
        raise ValueError(f"sub-token ids must lie in [0, {PAD_ID}]")
    out = np.full(t, PAD_ID, dtype=np.int64)
    out[:m] = ids
    return out


def embed_padded(subtokens, t: int, table: EmbeddingTable) -> TextEmbeddingSeq:
    ids = pad_ids(subtokens, t)
    m = len(subtokens)
    return TextEmbeddingSeq(vectors=table.vectors[ids], real_len=m)
