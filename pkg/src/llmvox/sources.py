"""Upstream stand-ins: an ASR delay stub, a timed LLM word source, an external text feed.

Emission times are integer microseconds.  ``sim_llm`` times are relative to
the moment the LLM starts (i.e. when the transcript becomes available).
"""

from __future__ import annotations

import math
import random
from collections.abc import Iterator
from dataclasses import dataclass
from typing import TextIO

FEED_EOS = "<EOS>"


@dataclass(frozen=True)
class SourceTiming:
    asr_delay_ms: int = 100
    first_word_delay_ms: int = 200
    words_per_second: float = 5.0
    jitter_ms: int = 0
    seed: int = 0

    def __post_init__(self):
        for name in ("asr_delay_ms", "first_word_delay_ms", "jitter_ms"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        wps = self.words_per_second
        if not (isinstance(wps, (int, float)) and math.isfinite(wps) and wps > 0):
            raise ValueError(f"words_per_second must be finite and > 0, got {wps!r}")


@dataclass(frozen=True)
class WordEvent:
    word: str
    emit_time_us: int
    is_final: bool = False

    @property
    def emit_time_ms(self) -> float:
        return self.emit_time_us / 1000


@dataclass(frozen=True)
class Query:
    """A user turn: the transcript the ASR stub will 'recognize' and the scripted reply."""

    transcript: str
    script: str = ""
    query_id: str = "q0"


def asr_stub(query: Query | str, timing: SourceTiming) -> tuple[str, int]:
    """Return the attached transcript and the time (us) it becomes available."""
    transcript = query.transcript if isinstance(query, Query) else str(query)
    return transcript, timing.asr_delay_ms * 1000


def sim_llm(prompt: str, script: str, timing: SourceTiming) -> list[WordEvent]:
    """Word-by-word emission schedule for ``script``.

    The first word arrives after ``first_word_delay_ms``, later words every
    ``1 / words_per_second`` seconds, each gap perturbed by a seeded integer
    jitter in ``[-jitter_ms, +jitter_ms]`` ms (clamped so time never runs
    backwards).  ``prompt`` only identifies the request.
    """
    del prompt
    words = script.split()
    t = timing.first_word_delay_ms * 1000
    if not words:
        return [WordEvent("", t, is_final=True)]
    rng = random.Random(timing.seed)
    gap = round(1e6 / timing.words_per_second)
    jitter = timing.jitter_ms * 1000
    events = []
    for i, word in enumerate(words):
        if i:
            t += max(0, gap + (rng.randint(-jitter, jitter) if jitter else 0))
        events.append(WordEvent(word, t, is_final=i == len(words) - 1))
    return events


def read_feed(stream: TextIO) -> Iterator[tuple[str, bool]]:
    """Yield ``(word, is_final)`` from newline-delimited text as lines arrive.

    Words are passed on immediately; the closing ``("", True)`` event comes
    from a line holding only ``<EOS>`` or from end of input.
    """
    for line in stream:
        line = line.strip()
        if line == FEED_EOS:
            break
        for word in line.split():
            yield word, False
    yield "", True
