"""Deterministic single-codebook stand-in for a neural audio codec.

Each speech token owns one fixed waveform frame (a Hann-windowed pair of
sinusoids on integer-period frequency bins) and one unit-norm latent feature
row.  Decoding concatenates frames, so any chunking of a token sequence decodes
to exactly the same samples as the whole sequence.
"""

from __future__ import annotations

import functools
import math
import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class OutOfVocabularyError(ValueError):
    def __init__(self, index: int, token: int, vocab_size: int):
        super().__init__(
            f"token {token} at index {index} is outside the codec vocabulary [0, {vocab_size})"
        )
        self.index = index
        self.token = token


class FramingError(ValueError):
    def __init__(self, n_samples: int, samples_per_token: int):
        remainder = n_samples % samples_per_token
        super().__init__(
            f"{n_samples} samples is not a multiple of {samples_per_token} "
            f"samples per token (remainder {remainder})"
        )
        self.remainder = remainder


@dataclass(frozen=True)
class CodecConfig:
    sample_rate_hz: int = 24000
    tokens_per_second: int = 40
    feature_dim: int = 512
    vocab_size: int = 4096
    seed: int = 0

    def __post_init__(self):
        if self.tokens_per_second <= 0 or self.sample_rate_hz <= 0:
            raise ValueError("sample_rate_hz and tokens_per_second must be positive")
        if self.sample_rate_hz % self.tokens_per_second:
            raise ValueError(
                f"sample_rate_hz={self.sample_rate_hz} is not divisible by "
                f"tokens_per_second={self.tokens_per_second}"
            )
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be >= 2")
        if self.feature_dim < 1:
            raise ValueError("feature_dim must be >= 1")
        side = math.isqrt(self.vocab_size - 1) + 1
        # both sinusoid bins must stay below Nyquist
        if 2 * side + 1 >= self.samples_per_token // 2:
            raise ValueError(
                f"vocab_size={self.vocab_size} needs {2 * side + 1} frequency bins, "
                f"only {self.samples_per_token // 2 - 1} fit in a {self.samples_per_token}-sample frame"
            )

    @property
    def samples_per_token(self) -> int:
        return self.sample_rate_hz // self.tokens_per_second


@dataclass
class AudioBuffer:
    samples: np.ndarray
    sample_rate_hz: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def duration_seconds(self) -> float:
        return len(self) / self.sample_rate_hz

    @classmethod
    def concat(cls, buffers, sample_rate_hz: int) -> "AudioBuffer":
        parts = [b.samples for b in buffers]
        if not parts:
            return cls(np.zeros(0), sample_rate_hz)
        return cls(np.concatenate(parts), sample_rate_hz)


@dataclass(frozen=True, eq=False)
class Codebook:
    features: np.ndarray  # vocab_size x feature_dim, unit rows
    frames: np.ndarray  # vocab_size x samples_per_token, in [-1, 1]


def build_codebook(cfg: CodecConfig) -> Codebook:
    rng = np.random.default_rng(cfg.seed)
    features = rng.standard_normal((cfg.vocab_size, cfg.feature_dim))
    features /= np.linalg.norm(features, axis=1, keepdims=True)

    spt = cfg.samples_per_token
    side = math.isqrt(cfg.vocab_size - 1) + 1
    ids = np.arange(cfg.vocab_size)
    # bin j has frequency j * tokens_per_second Hz: a whole number of periods per frame
    low_bin = ids % side + 1
    high_bin = ids // side + side + 1
    n = np.arange(spt)
    window = 0.5 - 0.5 * np.cos(2 * np.pi * n / spt)
    frames = 0.5 * (
        np.sin(2 * np.pi * np.outer(low_bin, n) / spt)
        + np.sin(2 * np.pi * np.outer(high_bin, n) / spt)
    )
    frames *= window
    features.setflags(write=False)
    frames.setflags(write=False)
    return Codebook(features=features, frames=frames)


@functools.lru_cache(maxsize=8)
def _cached_codebook(cfg: CodecConfig) -> Codebook:
    return build_codebook(cfg)


@functools.lru_cache(maxsize=8)
def _search_tables(cfg: CodecConfig):
    # Frames span a low-rank subspace. Whatever part of a block lies outside
    # it adds the same amount to every distance, so nearest-frame search can
    # run on the projected coordinates.
    frames = _cached_codebook(cfg).frames
    _, sv, vt = np.linalg.svd(frames, full_matrices=False)
    basis = vt[sv > sv[0] * 1e-10].T
    return np.einsum("ij,ij->i", frames, frames), basis, frames @ basis


class Codec:
    """Token <-> waveform mapping for one :class:`CodecConfig`.

    Immutable after construction, so a single instance can be shared by any
    number of synthesis workers.
    """

    def __init__(self, cfg: CodecConfig | None = None):
        self.cfg = cfg or CodecConfig()
        self.codebook = _cached_codebook(self.cfg)
        self._frame_sq, self._basis, self._frame_coords = _search_tables(self.cfg)

    @property
    def vocab_size(self) -> int:
        return self.cfg.vocab_size

    @property
    def samples_per_token(self) -> int:
        return self.cfg.samples_per_token

    def _check_tokens(self, tokens) -> np.ndarray:
        ids = np.asarray(tokens, dtype=np.int64).reshape(-1)
        bad = np.flatnonzero((ids < 0) | (ids >= self.cfg.vocab_size))
        if bad.size:
            i = int(bad[0])
            raise OutOfVocabularyError(i, int(ids[i]), self.cfg.vocab_size)
        return ids

    def decode(self, tokens) -> AudioBuffer:
        ids = self._check_tokens(tokens)
        samples = self.codebook.frames[ids].reshape(-1)
        return AudioBuffer(samples, self.cfg.sample_rate_hz)

    def encode(self, audio) -> list[int]:
        """Nearest-frame quantization; ties go to the lowest token id."""
        samples = audio.samples if isinstance(audio, AudioBuffer) else np.asarray(audio, dtype=np.float64)
        spt = self.cfg.samples_per_token
        if samples.shape[0] % spt:
            raise FramingError(samples.shape[0], spt)
        if samples.shape[0] == 0:
            return []
        blocks = samples.reshape(-1, spt)
        dist = self._frame_sq[None, :] - 2.0 * (blocks @ self._basis) @ self._frame_coords.T
        return np.argmin(dist, axis=1).tolist()

    def feature_of(self, token: int) -> np.ndarray:
        self._check_tokens([token])
        return self.codebook.features[int(token)]

    def duration_seconds(self, n_tokens: int) -> float:
        return n_tokens / self.cfg.tokens_per_second


def decode(tokens, cfg: CodecConfig) -> AudioBuffer:
    return Codec(cfg).decode(tokens)


def encode(audio, cfg: CodecConfig) -> list[int]:
    return Codec(cfg).encode(audio)


def feature_of(token: int, cfg: CodecConfig) -> np.ndarray:
    return Codec(cfg).feature_of(token)


def pcm16(samples) -> np.ndarray:
    """Clamp to [-1, 1], scale by 32767 and round half away from zero."""
    x = np.clip(np.asarray(samples, dtype=np.float64), -1.0, 1.0) * 32767.0
    return (np.sign(x) * np.floor(np.abs(x) + 0.5)).astype("<i2")


def write_wav(path, audio: AudioBuffer) -> Path:
    path = Path(path)
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(audio.sample_rate_hz)
        fh.writeframes(pcm16(audio.samples).tobytes())
    return path


def read_wav(path) -> AudioBuffer:
    with wave.open(str(path), "rb") as fh:
        if fh.getnchannels() != 1 or fh.getsampwidth() != 2:
            raise ValueError(f"{path}: expected 16-bit mono PCM")
        rate = fh.getframerate()
        raw = fh.readframes(fh.getnframes())
    return AudioBuffer(np.frombuffer(raw, dtype="<i2") / 32767.0, rate)


class WavStreamWriter:
    """Append PCM chunks to a WAV file without holding the whole stream in memory."""

    def __init__(self, path, sample_rate_hz: int):
        self.path = Path(path)
        self._fh = wave.open(str(self.path), "wb")
        self._fh.setnchannels(1)
        self._fh.setsampwidth(2)
        self._fh.setframerate(sample_rate_hz)
        self.n_samples = 0

    def write(self, samples) -> None:
        pcm = pcm16(samples)
        self._fh.writeframes(pcm.tobytes())
        self.n_samples += pcm.shape[0]

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
