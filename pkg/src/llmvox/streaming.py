"""Multi-queue streaming synthesis with doubling chunk sizes.

Stages (each a generator run by :mod:`llmvox.runtime`)::

    source --Q0--> splitter --Q1..Qk--> worker_i --D_i--> decoder_i --P_i--> playback

The splitter closes a sentence on terminal punctuation and hands sentence i to
worker ``(i - 1) % k + 1``.  A worker owns one generation session per sentence
(fresh KV cache each time) and cuts its token stream at the boundaries of
:func:`chunk_schedule`: n, 2n, 4n, ... tokens.  A separate decoder stage per
worker turns token ranges into audio so decoding chunk j overlaps generation of
chunk j + 1.  Playback pulls chunks strictly in sentence order and paces them at
real time, counting an underrun whenever the next chunk is not ready when the
previous one finishes.
"""

from __future__ import annotations

import csv
import logging
import math
from collections.abc import Callable, Iterable
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from llmvox import g2p
from llmvox.codec import AudioBuffer, Codec
from llmvox.model import GenerationSession, SpeechDecoder
from llmvox.runtime import NOW, Channel, Charge, Get, Put, SleepUntil, make_runner
from llmvox.sources import Query, SourceTiming, WordEvent, asr_stub, sim_llm

log = logging.getLogger(__name__)

TERMINALS = (".", "!", "?", "؟")
_CLOSERS = "\"')]}»”’"

END = None  # end-of-stream marker on every channel


def worker_for(index: int, n_workers: int = 2) -> int:
    return (index - 1) % n_workers + 1


def ends_sentence(word: str) -> bool:
    return word.rstrip().rstrip(_CLOSERS).endswith(TERMINALS)


@dataclass(frozen=True)
class SentenceJob:
    index: int
    text: str
    assigned_worker: int
    dispatch_time_us: int = 0


class SentenceSplitter:
    """Incremental sentence segmentation of a word stream."""

    def __init__(self, n_workers: int = 2):
        self.n_workers = n_workers
        self._words: list[str] = []
        self._next_index = 1

    def feed(self, event: WordEvent) -> SentenceJob | None:
        word = event.word.strip()
        if word:
            self._words.append(word)
        if (word and ends_sentence(word)) or event.is_final:
            return self._close()
        return None

    def _close(self) -> SentenceJob | None:
        text = g2p.join_words(self._words)
        self._words = []
        if not text:
            return None
        idx = self._next_index
        self._next_index += 1
        return SentenceJob(idx, text, worker_for(idx, self.n_workers))


def split_sentences(events: Iterable[WordEvent], n_workers: int = 2) -> list[SentenceJob]:
    splitter = SentenceSplitter(n_workers)
    jobs = []
    for event in events:
        job = splitter.feed(event)
        if job is not None:
            jobs.append(job)
    return jobs


@dataclass(frozen=True)
class ChunkPlan:
    ranges: tuple[tuple[int, int], ...]
    initial_n: int

    def sizes(self) -> list[int]:
        return [end - start + 1 for start, end in self.ranges]


class ChunkCursor:
    """Online form of :func:`chunk_schedule`: the next (start, end) before M is known."""

    def __init__(self, initial_n: int, max_chunk_size: int | None = None):
        if initial_n < 1:
            raise ValueError("initial_n must be >= 1")
        self.start = 1
        self.size = initial_n if max_chunk_size is None else min(initial_n, max_chunk_size)
        self.max_chunk_size = max_chunk_size

    @property
    def end(self) -> int:
        return self.start + self.size - 1

    def advance(self, end: int | None = None) -> None:
        self.start = (self.end if end is None else end) + 1
        self.size *= 2
        if self.max_chunk_size is not None:
            self.size = min(self.size, self.max_chunk_size)


def chunk_schedule(initial_n: int, m: int, max_chunk_size: int | None = None) -> ChunkPlan:
    """Partition token indices 1..m into chunks of n, 2n, 4n, ... (last one clipped)."""
    if m < 0:
        raise ValueError("m must be >= 0")
    cursor = ChunkCursor(initial_n, max_chunk_size)
    ranges = []
    while cursor.start <= m:
        end = min(cursor.end, m)
        ranges.append((cursor.start, end))
        cursor.advance(end)
    return ChunkPlan(tuple(ranges), initial_n)


@dataclass
class AudioChunk:
    sentence_index: int
    chunk_ordinal: int
    buffer: AudioBuffer
    ready_time_us: int
    token_range: tuple[int, int] = (1, 0)
    final: bool = False
    error: str | None = None
    worker: int = 1
    dispatch_time_us: int = 0
    first_token_us: int | None = None


@dataclass
class _DecodeWork:
    job: SentenceJob
    ordinal: int
    token_range: tuple[int, int]
    tokens: list[int]
    final: bool
    first_token_us: int | None
    error: str | None = None


TRACE_FIELDS = (
    "t_query",
    "t_asr_done",
    "t_first_word",
    "t_first_sentence_dispatch",
    "t_first_token",
    "t_first_chunk_decoded",
    "t_first_audio_out",
    "t_last_audio_out",
)

TRACE_CSV_COLUMNS = (
    "query_id",
    *(f"{name}_ms" for name in TRACE_FIELDS),
    "underrun_count",
    "initial_n",
)

STAGE_NAMES = (
    "asr",
    "llm_first_word",
    "first_sentence",
    "tts_first_token",
    "first_chunk_gen_decode",
    "playout_start",
)


@dataclass
class LatencyTrace:
    """Timestamps (integer microseconds) of one pipeline run.

    The ``t_first_*`` stages after the first word all describe the sentence
    whose audio was heard first.
    """

    query_id: str = "q0"
    initial_n: int = 0
    t_query: int | None = 0
    t_asr_done: int | None = None
    t_first_word: int | None = None
    t_first_sentence_dispatch: int | None = None
    t_first_token: int | None = None
    t_first_chunk_decoded: int | None = None
    t_first_audio_out: int | None = None
    t_last_audio_out: int | None = None
    underrun_count: int = 0
    silence_us: int = 0

    def timestamps(self) -> list[int | None]:
        return [getattr(self, name) for name in TRACE_FIELDS]

    def is_monotone(self) -> bool:
        ts = self.timestamps()
        return all(t is not None for t in ts) and all(a <= b for a, b in zip(ts, ts[1:]))

    @property
    def first_audio_latency_us(self) -> int | None:
        if self.t_first_audio_out is None or self.t_query is None:
            return None
        return self.t_first_audio_out - self.t_query

    def stage_breakdown(self) -> list[tuple[str, int | None]]:
        ts = self.timestamps()[:7]
        out = []
        for name, a, b in zip(STAGE_NAMES, ts, ts[1:]):
            out.append((name, None if a is None or b is None else b - a))
        return out

    def csv_row(self) -> list[str]:
        def ms(v):
            return "" if v is None else f"{v / 1000:.3f}"

        return [
            self.query_id,
            *(ms(v) for v in self.timestamps()),
            str(self.underrun_count),
            str(self.initial_n),
        ]


def write_trace_csv(path, traces: Iterable[LatencyTrace]) -> Path:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(TRACE_CSV_COLUMNS)
        for trace in traces:
            writer.writerow(trace.csv_row())
    return path


def read_trace_csv(path) -> list[dict[str, str]]:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def format_breakdown(trace: LatencyTrace) -> str:
    """Plain-text stage table; stage rows sum to the total first-audio latency."""
    lines = [f"{'stage':<24}{'ms':>10}"]
    for name, delta in trace.stage_breakdown():
        lines.append(f"{name:<24}{'-' if delta is None else f'{delta / 1000:.3f}':>10}")
    total = trace.first_audio_latency_us
    lines.append(f"{'total_to_first_audio':<24}{'-' if total is None else f'{total / 1000:.3f}':>10}")
    lines.append(f"{'underruns':<24}{trace.underrun_count:>10}")
    return "\n".join(lines)


@dataclass
class StreamConfig:
    initial_n: int = 40
    n_workers: int = 2
    queue_capacity: int = 64
    max_chunk_size: int | None = None
    clock: str = "sim"
    # modeled compute cost, charged on the simulated clock only
    token_cost_ms: float = 5.0
    decode_base_ms: float = 2.0
    decode_per_token_ms: float = 0.1
    # per-sentence generation budget: max(min_tokens, ceil(max_tokens_per_byte * bytes))
    max_tokens_per_byte: float = 4.0
    min_tokens: int = 16
    keep_records: bool = True

    def __post_init__(self):
        if self.initial_n < 1:
            raise ValueError("initial_n must be >= 1")
        if self.n_workers < 1:
            raise ValueError("n_workers must be >= 1")
        if self.max_chunk_size is not None and self.max_chunk_size < 1:
            raise ValueError("max_chunk_size must be >= 1")
        if self.clock not in ("sim", "wall"):
            raise ValueError(f"clock must be 'sim' or 'wall', got {self.clock!r}")
        if min(self.token_cost_ms, self.decode_base_ms, self.decode_per_token_ms) < 0:
            raise ValueError("cost model entries must be >= 0")

    def decode_cost_us(self, n_tokens: int) -> int:
        return round(1000 * (self.decode_base_ms + self.decode_per_token_ms * n_tokens))

    @property
    def token_cost_us(self) -> int:
        return round(1000 * self.token_cost_ms)


@dataclass
class SentenceRecord:
    index: int
    worker: int
    text: str
    tokens: list[int]
    error: str | None = None


class AudioCollector:
    def __init__(self):
        self.parts: list[np.ndarray] = []

    def write(self, samples) -> None:
        self.parts.append(np.asarray(samples))

    def buffer(self, sample_rate_hz: int) -> AudioBuffer:
        return AudioBuffer(np.concatenate(self.parts) if self.parts else np.zeros(0), sample_rate_hz)


class NullSink:
    def __init__(self):
        self.n_samples = 0

    def write(self, samples) -> None:
        self.n_samples += len(samples)


@dataclass
class PipelineResult:
    trace: LatencyTrace
    audio: AudioBuffer | None
    sentences: list[SentenceRecord] = field(default_factory=list)
    channel_peaks: dict[str, int] = field(default_factory=dict)
    channel_capacity: int = 0
    n_sessions: int = 0
    max_context: int = 0
    n_sentences: int = 0
    n_failed: int = 0
    audio_samples: int = 0


SessionFactory = Callable[[str, int], object]


class StreamingEngine:
    """Runs one query through the whole pipeline on the configured clock."""

    def __init__(self, model: SpeechDecoder, config: StreamConfig | None = None, session_factory: SessionFactory | None = None):
        self.model = model
        self.codec: Codec = model.codec
        self.config = config or StreamConfig()
        self.session_factory = session_factory or self._default_session

    def _default_session(self, text: str, max_tokens: int):
        return GenerationSession(self.model, text, max_tokens=max_tokens)

    def token_budget(self, text: str) -> int:
        cfg = self.config
        m = len(g2p.subtokenize([text]))
        budget = max(cfg.min_tokens, math.ceil(cfg.max_tokens_per_byte * m))
        return min(budget, self.model.cfg.block_size)

    def duration_us(self, n_samples: int) -> int:
        return n_samples * 1_000_000 // self.codec.cfg.sample_rate_hz

    def run(self, query: Query, timing: SourceTiming | None = None, sink=None, feed=None) -> PipelineResult:
        cfg = self.config
        timing = timing or SourceTiming()
        if feed is not None and cfg.clock != "wall":
            raise ValueError("an external feed needs the wall clock; pass its words as the script instead")
        self.model.eval()
        collector = AudioCollector() if sink is None else None
        self._sink = sink if sink is not None else collector
        self._trace = LatencyTrace(query_id=query.query_id, initial_n=cfg.initial_n)
        self._records: list[SentenceRecord] = []
        self._n_sessions = 0
        self._max_context = 0
        self._n_sentences = 0
        self._n_failed = 0
        self._samples_out = 0

        k = cfg.n_workers
        cap = cfg.queue_capacity
        self._q0 = Channel("Q0", cap)
        self._jobs = [Channel(f"Q{i + 1}", cap) for i in range(k)]
        self._decode = [Channel(f"D{i + 1}", cap) for i in range(k)]
        self._producers = [Channel(f"P{i + 1}", cap) for i in range(k)]
        channels = [self._q0, *self._jobs, *self._decode, *self._producers]

        stages = {"source": self._source(query, timing, feed), "splitter": self._splitter()}
        for i in range(k):
            stages[f"worker{i + 1}"] = self._worker(i)
            stages[f"decoder{i + 1}"] = self._decoder(i)
        stages["playback"] = self._playback()

        make_runner(cfg.clock).run(stages, channels)

        audio = collector.buffer(self.codec.cfg.sample_rate_hz) if collector is not None else None
        return PipelineResult(
            trace=self._trace,
            audio=audio,
            sentences=sorted(self._records, key=lambda r: r.index),
            channel_peaks={ch.name: ch.peak for ch in channels},
            channel_capacity=cap,
            n_sessions=self._n_sessions,
            max_context=self._max_context,
            n_sentences=self._n_sentences,
            n_failed=self._n_failed,
            audio_samples=self._samples_out,
        )

    def _source(self, query: Query, timing: SourceTiming, feed):
        trace = self._trace
        transcript, asr_us = asr_stub(query, timing)
        yield SleepUntil(asr_us)
        t_llm = yield NOW
        trace.t_asr_done = t_llm
        if feed is None:
            events = ((ev, t_llm + ev.emit_time_us) for ev in sim_llm(transcript, query.script, timing))
        else:
            events = ((WordEvent(word, 0, final), None) for word, final in feed)
        for event, due in events:
            if due is not None:
                yield SleepUntil(due)
            now = yield NOW
            if event.word and trace.t_first_word is None:
                trace.t_first_word = now
            yield Put(self._q0, WordEvent(event.word, now, event.is_final))
            if event.is_final:
                return

    def _splitter(self):
        splitter = SentenceSplitter(self.config.n_workers)
        while True:
            event = yield Get(self._q0)
            job = splitter.feed(event)
            if job is not None:
                now = yield NOW
                job = replace(job, dispatch_time_us=now)
                self._n_sentences += 1
                yield Put(self._jobs[job.assigned_worker - 1], job)
            if event.is_final:
                break
        for ch in self._jobs:
            yield Put(ch, END)

    def _worker(self, i: int):
        cfg = self.config
        token_cost = cfg.token_cost_us
        out = self._decode[i]
        while True:
            job = yield Get(self._jobs[i])
            if job is END:
                yield Put(out, END)
                return
            tokens: list[int] = []
            cursor = ChunkCursor(cfg.initial_n, cfg.max_chunk_size)
            ordinal = 0
            first_token_us = None
            error = None
            session = None
            try:
                session = self.session_factory(job.text, self.token_budget(job.text))
                self._n_sessions += 1
            except Exception as exc:
                error = f"{type(exc).__name__}: {exc}"
            while session is not None and error is None:
                was_done = session.done
                try:
                    token = session.step()
                except Exception as exc:
                    error = f"{type(exc).__name__}: {exc}"
                    break
                if not was_done:
                    yield Charge(token_cost)
                if token is None:
                    break
                tokens.append(token)
                if first_token_us is None:
                    first_token_us = yield NOW
                if len(tokens) == cursor.end:
                    ordinal += 1
                    work = _DecodeWork(job, ordinal, (cursor.start, cursor.end), tokens[cursor.start - 1 :], False, first_token_us)
                    yield Put(out, work)
                    cursor.advance()
            cache = getattr(session, "cache", None)
            if cache is not None:
                self._max_context = max(self._max_context, len(cache))
            ordinal += 1
            rest = tokens[cursor.start - 1 :]
            yield Put(out, _DecodeWork(job, ordinal, (cursor.start, len(tokens)), rest, True, first_token_us, error))
            if cfg.keep_records:
                self._records.append(SentenceRecord(job.index, i + 1, job.text, tokens, error))

    def _decoder(self, i: int):
        cfg = self.config
        out = self._producers[i]
        sr = self.codec.cfg.sample_rate_hz
        while True:
            work = yield Get(self._decode[i])
            if work is END:
                yield Put(out, END)
                return
            if work.error is None and work.tokens:
                yield Charge(cfg.decode_cost_us(len(work.tokens)))
                audio = self.codec.decode(work.tokens)
            else:
                audio = AudioBuffer(np.zeros(0), sr)
            now = yield NOW
            yield Put(
                out,
                AudioChunk(
                    sentence_index=work.job.index,
                    chunk_ordinal=work.ordinal,
                    buffer=audio,
                    ready_time_us=now,
                    token_range=work.token_range,
                    final=work.final,
                    error=work.error,
                    worker=i + 1,
                    dispatch_time_us=work.job.dispatch_time_us,
                    first_token_us=work.first_token_us,
                ),
            )

    def _playback(self):
        k = self.config.n_workers
        trace = self._trace
        next_index = 1
        play_end: int | None = None
        finished: set[int] = set()
        while True:
            w = worker_for(next_index, k)
            chunk = yield Get(self._producers[w - 1])
            if chunk is END:
                finished.add(w)
                break
            if chunk.error is not None:
                log.warning("sentence %d skipped: %s", chunk.sentence_index, chunk.error)
                self._n_failed += 1
            elif len(chunk.buffer):
                if play_end is None:
                    start = chunk.ready_time_us
                    trace.t_first_sentence_dispatch = chunk.dispatch_time_us
                    trace.t_first_token = chunk.first_token_us
                    trace.t_first_chunk_decoded = chunk.ready_time_us
                    trace.t_first_audio_out = start
                elif chunk.ready_time_us > play_end:
                    trace.underrun_count += 1
                    trace.silence_us += chunk.ready_time_us - play_end
                    start = chunk.ready_time_us
                else:
                    start = play_end
                self._sink.write(chunk.buffer.samples)
                self._samples_out += len(chunk.buffer)
                play_end = start + self.duration_us(len(chunk.buffer))
                yield SleepUntil(play_end)
            if chunk.final:
                next_index += 1
        for w in range(1, k + 1):
            if w not in finished:
                leftover = yield Get(self._producers[w - 1])
                if leftover is not END:
                    raise RuntimeError(f"P{w} still holds sentence {leftover.sentence_index} after the stream ended")
        trace.t_last_audio_out = play_end


def run_pipeline(
    query: Query,
    model: SpeechDecoder,
    config: StreamConfig | None = None,
    timing: SourceTiming | None = None,
    sink=None,
    session_factory: SessionFactory | None = None,
    feed=None,
) -> PipelineResult:
    return StreamingEngine(model, config, session_factory).run(query, timing, sink=sink, feed=feed)
