"""``llmvox`` command line: train | synth | pipeline | sweep-chunks | gen-corpus.

Exit codes: 0 success, 2 usage/config error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import os
import sys
from pathlib import Path

import numpy as np

from llmvox import corpus as corpus_mod
from llmvox import lvx
from llmvox.codec import write_wav
from llmvox.estimator import SpeechSynthesizer
from llmvox.model import ContextOverflowError, TrainingDivergedError, load_checkpoint
from llmvox.sources import Query, SourceTiming, read_feed
from llmvox.streaming import StreamConfig, format_breakdown, run_pipeline, write_trace_csv

log = logging.getLogger("llmvox")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 2, 3

DEFAULT_SCRIPT = (
    "Sure, here is a quick answer. The weather today is mild and sunny. "
    "You might want a light jacket in the evening. Let me know if you need anything else!"
)

TRAIN_KEYS = {
    "n_layer": int, "n_head": int, "text_dim": int, "feature_dim": int, "block_size": int,
    "vocab_size": int, "lr": float, "min_lr": float, "weight_decay": float, "grad_clip": float,
    "warmup_steps": int, "decay_steps": int, "max_steps": int, "batch_size": int,
    "target_loss": float,
}
STREAM_KEYS = {
    "initial_n": int, "n_workers": int, "queue_capacity": int, "max_chunk_size": int,
    "token_cost_ms": float, "decode_base_ms": float, "decode_per_token_ms": float,
    "max_tokens_per_byte": float, "min_tokens": int,
}
TIMING_KEYS = {
    "asr_delay_ms": int, "first_word_delay_ms": int, "words_per_second": float, "jitter_ms": int,
}
PATH_KEYS = {"corpus": str, "checkpoint": str}
ALL_KEYS = {**TRAIN_KEYS, **STREAM_KEYS, **TIMING_KEYS, **PATH_KEYS}


class UsageError(Exception):
    pass


def load_config(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file not found: {path}")
    raw = lvx.parse_kv(p.read_text(encoding="utf-8"), str(p))
    out = {}
    for key, value in raw.items():
        if key not in ALL_KEYS:
            raise UsageError(f"{path}: unknown config key {key!r}")
        try:
            out[key] = ALL_KEYS[key](value)
        except ValueError:
            raise UsageError(f"{path}: bad value for {key}: {value!r}") from None
    return out


def _pick(cfg: dict, keys: dict) -> dict:
    return {k: v for k, v in cfg.items() if k in keys}


def _stream_config(args, cfg: dict) -> StreamConfig:
    values = _pick(cfg, STREAM_KEYS)
    if args.initial_n is not None:
        values["initial_n"] = args.initial_n
    try:
        return StreamConfig(clock=args.clock, **values)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _timing(cfg: dict, seed: int) -> SourceTiming:
    values = {"asr_delay_ms": 100, "first_word_delay_ms": 200, "words_per_second": 5.0, "jitter_ms": 0}
    values.update(_pick(cfg, TIMING_KEYS))
    try:
        return SourceTiming(seed=seed, **values)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _out_dir(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _meta(args, cfg: dict, **extra) -> dict:
    values = {"seed": args.seed, "clock": args.clock, "command": args.command}
    values.update({f"config.{k}": v for k, v in cfg.items()})
    values.update(extra)
    return values


def _require_checkpoint(args, cfg: dict):
    path = args.checkpoint or cfg.get("checkpoint")
    if not path:
        raise UsageError("a model checkpoint is required (--checkpoint)")
    if not Path(path).is_file():
        raise UsageError(f"checkpoint not found: {path}")
    try:
        return load_checkpoint(path), path
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot load checkpoint {path}: {exc}") from None


def cmd_gen_corpus(args, cfg: dict) -> int:
    pairs = corpus_mod.synthetic_corpus(
        n_pairs=args.n_pairs,
        seed=args.seed,
        max_words=args.max_words,
        vocab_size=cfg.get("vocab_size", 4096),
        tokens_per_byte=args.tokens_per_byte,
        max_len=args.max_len,
    )
    out = Path(args.output) if args.output else _out_dir(args) / "corpus.tsv"
    out.parent.mkdir(parents=True, exist_ok=True)
    corpus_mod.write_corpus(out, pairs)
    lvx.write_sidecar(out, _meta(args, cfg, n_pairs=args.n_pairs, max_words=args.max_words))
    print(f"wrote {len(pairs)} pairs to {out}")
    return EXIT_OK


def cmd_train(args, cfg: dict) -> int:
    corpus_path = args.corpus or cfg.get("corpus")
    if not corpus_path or not Path(corpus_path).is_file():
        raise UsageError(f"training corpus not found: {corpus_path}")
    try:
        pairs = corpus_mod.parse_corpus(corpus_path)
    except corpus_mod.CorpusError as exc:
        raise UsageError(str(exc)) from None
    params = _pick(cfg, TRAIN_KEYS)
    if args.steps is not None:
        params["max_steps"] = args.steps
    est = SpeechSynthesizer(seed=args.seed, **params)
    texts = [t for t, _ in pairs]
    seqs = [s for _, s in pairs]
    out = _out_dir(args)
    try:
        est.fit(texts, seqs)
    except TrainingDivergedError as exc:
        log.error("%s", exc)
        return EXIT_RUNTIME
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    ckpt = est.save(out / "model.lvx")
    curve = out / "loss_curve.csv"
    with curve.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["step", "loss"])
        writer.writerows((i, f"{loss:.8f}") for i, loss in enumerate(est.loss_curve_))
    meta = _meta(args, cfg, corpus=corpus_path, steps=est.n_steps_)
    lvx.write_sidecar(ckpt, meta)
    lvx.write_sidecar(curve, meta)
    print(f"trained {est.n_steps_} steps, final loss {est.loss_curve_[-1]:.5f}; checkpoint {ckpt}")
    return EXIT_OK


def cmd_synth(args, cfg: dict) -> int:
    text = (args.text or "").strip()
    if not text:
        raise UsageError("--text must be non-empty")
    model, ckpt = _require_checkpoint(args, cfg)
    est = SpeechSynthesizer.from_model(model)
    try:
        audio = est.synthesize(text)
    except ContextOverflowError as exc:
        raise UsageError(str(exc)) from None
    out = _out_dir(args) / (args.output or "synth.wav")
    write_wav(out, audio)
    lvx.write_sidecar(out, _meta(args, cfg, checkpoint=ckpt, text=text))
    n_tokens = len(audio) // model.codec.samples_per_token
    print(f"wrote {out}: {n_tokens} tokens, {audio.duration_seconds:.3f} s")
    return EXIT_OK


def _script(args) -> str:
    if args.script_file:
        return Path(args.script_file).read_text(encoding="utf-8")
    return args.script if args.script is not None else DEFAULT_SCRIPT


def cmd_pipeline(args, cfg: dict) -> int:
    model, ckpt = _require_checkpoint(args, cfg)
    stream_cfg = _stream_config(args, cfg)
    timing = _timing(cfg, args.seed)
    feed = None
    script = _script(args)
    if args.feed:
        fh = sys.stdin if args.feed == "-" else open(args.feed, encoding="utf-8")
        if stream_cfg.clock == "wall":
            feed = read_feed(fh)
        else:
            script = " ".join(word for word, _ in read_feed(fh))
    query = Query(transcript=args.transcript, script=script, query_id=args.query_id)
    result = run_pipeline(query, model, stream_cfg, timing, feed=feed)
    out = _out_dir(args)
    wav = write_wav(out / "pipeline.wav", result.audio)
    trace_csv = write_trace_csv(out / "trace.csv", [result.trace])
    meta = _meta(args, cfg, checkpoint=ckpt, initial_n=stream_cfg.initial_n, timing_seed=timing.seed)
    lvx.write_sidecar(wav, meta)
    lvx.write_sidecar(trace_csv, meta)
    if args.per_sentence:
        for rec in result.sentences:
            if rec.error is None:
                write_wav(out / f"sentence_{rec.index:04d}.wav", model.codec.decode(rec.tokens))
    print(format_breakdown(result.trace))
    print(f"{result.n_sentences} sentences, {result.audio.duration_seconds:.3f} s audio -> {wav}")
    return EXIT_OK if result.n_failed == 0 else EXIT_RUNTIME


def sweep(model, n_list, repetitions: int, base_cfg: StreamConfig, timing_values: dict, script: str, seed: int = 0):
    """Run the pipeline for every initial chunk size; returns (summary rows, long rows)."""
    summary, long_rows = [], []
    for n in n_list:
        stream_cfg = dataclasses.replace(base_cfg, initial_n=n, keep_records=False)
        lat, under, dur = [], [], []
        for rep in range(repetitions):
            timing = SourceTiming(seed=seed + rep, **timing_values)
            result = run_pipeline(Query("sweep", script, f"n{n}_r{rep}"), model, stream_cfg, timing)
            latency_ms = result.trace.first_audio_latency_us / 1000
            audio_s = result.audio.duration_seconds
            lat.append(latency_ms)
            under.append(result.trace.underrun_count)
            dur.append(audio_s)
            long_rows.append((n, rep, seed + rep, latency_ms, result.trace.underrun_count, audio_s))
        summary.append((n, float(np.mean(lat)), float(np.percentile(lat, 95)), float(np.mean(under)), float(np.sum(dur))))
    return summary, long_rows


def cmd_sweep_chunks(args, cfg: dict) -> int:
    try:
        n_list = [int(v) for v in args.n_list.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"--n-list must be comma-separated integers, got {args.n_list!r}") from None
    if not n_list or min(n_list) < 1:
        raise UsageError("--n-list needs at least one chunk size, each >= 1")
    if args.repetitions < 1:
        raise UsageError("--repetitions must be >= 1")
    model, ckpt = _require_checkpoint(args, cfg)
    base = _stream_config(args, cfg)
    timing_values = dataclasses.asdict(_timing(cfg, args.seed))
    timing_values.pop("seed")
    summary, long_rows = sweep(model, n_list, args.repetitions, base, timing_values, _script(args), args.seed)
    out = _out_dir(args)
    path = out / "sweep.csv"
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["initial_n", "mean_latency_ms", "p95_latency_ms", "mean_underruns", "total_audio_s"])
        for n, mean, p95, mu, total in summary:
            w.writerow([n, f"{mean:.3f}", f"{p95:.3f}", f"{mu:.3f}", f"{total:.3f}"])
    long_path = out / "sweep_long.csv"
    with long_path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["initial_n", "repetition", "seed", "first_audio_latency_ms", "underrun_count", "audio_s"])
        for n, rep, s, latency, u, audio_s in long_rows:
            w.writerow([n, rep, s, f"{latency:.3f}", u, f"{audio_s:.3f}"])
    meta = _meta(args, cfg, checkpoint=ckpt, n_list=args.n_list, repetitions=args.repetitions)
    lvx.write_sidecar(path, meta)
    lvx.write_sidecar(long_path, meta)
    for n, mean, p95, mu, _ in summary:
        print(f"n={n:<5} mean={mean:9.3f} ms  p95={p95:9.3f} ms  underruns={mu:.2f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value config file")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--clock", choices=("sim", "wall"), default="sim")
    common.add_argument("--initial-n", type=int, default=None, dest="initial_n")
    common.add_argument("--out-dir", default="out", dest="out_dir")

    parser = argparse.ArgumentParser(prog="llmvox", description="Streaming speech-token synthesis toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", parents=[common], help="train a synthesizer on a corpus")
    p.add_argument("--corpus")
    p.add_argument("--steps", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("synth", parents=[common], help="non-streaming synthesis to WAV")
    p.add_argument("--checkpoint")
    p.add_argument("--text")
    p.add_argument("--output", help="file name inside --out-dir")
    p.set_defaults(func=cmd_synth)

    for name, func, help_text in (
        ("pipeline", cmd_pipeline, "run the full streaming pipeline once"),
        ("sweep-chunks", cmd_sweep_chunks, "latency sweep over initial chunk sizes"),
    ):
        p = sub.add_parser(name, parents=[common], help=help_text)
        p.add_argument("--checkpoint")
        p.add_argument("--script", help="scripted LLM response text")
        p.add_argument("--script-file")
        p.set_defaults(func=func)
        if name == "pipeline":
            p.add_argument("--transcript", default="Tell me about the weather.")
            p.add_argument("--query-id", default="q0")
            p.add_argument("--feed", help="newline-delimited words ('-' for stdin); <EOS> ends")
            p.add_argument("--per-sentence", action="store_true", help="also write one WAV per sentence")
        else:
            p.add_argument("--n-list", default="20,40,80,160")
            p.add_argument("--repetitions", type=int, default=10)

    p = sub.add_parser("gen-corpus", parents=[common], help="write a synthetic training corpus")
    p.add_argument("--n-pairs", type=int, default=32)
    p.add_argument("--max-words", type=int, default=12)
    p.add_argument("--tokens-per-byte", type=float, default=2.0)
    p.add_argument("--max-len", type=int, default=128)
    p.add_argument("--output", help="corpus path (default <out-dir>/corpus.tsv)")
    p.set_defaults(func=cmd_gen_corpus)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(
        level=os.environ.get("LLMVOX_LOG", "WARNING").upper(),
        format="%(levelname)s %(name)s: %(message)s",
    )
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = load_config(args.config)
        return args.func(args, cfg)
    except UsageError as exc:
        print(f"llmvox: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # anything past startup is a runtime failure
        log.exception("runtime failure")
        print(f"llmvox: runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
