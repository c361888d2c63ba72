import csv

import pytest

from conftest import tiny_model
from llmvox import cli
from llmvox.codec import read_wav
from llmvox.model import save_checkpoint


@pytest.fixture(scope="module")
def checkpoint(tmp_path_factory):
    path = tmp_path_factory.mktemp("ckpt") / "model.lvx"
    return str(save_checkpoint(path, tiny_model()))


def _run(*argv):
    return cli.main([str(a) for a in argv])


def test_gen_corpus_and_short_training(tmp_path):
    out = tmp_path / "run"
    assert _run("gen-corpus", "--out-dir", out, "--n-pairs", 4, "--max-len", 40) == 0
    corpus = out / "corpus.tsv"
    assert corpus.is_file() and (out / "corpus.tsv.meta").is_file()
    cfg = tmp_path / "train.cfg"
    cfg.write_text("n_layer=1\nn_head=2\ntext_dim=8\nfeature_dim=24\nblock_size=64\n")
    assert _run("train", "--config", cfg, "--corpus", corpus, "--steps", 3, "--out-dir", out) == 0
    rows = list(csv.reader((out / "loss_curve.csv").open()))
    assert rows[0] == ["step", "loss"] and len(rows) == 4
    assert (out / "model.lvx").is_file() and (out / "model.lvx.meta").is_file()
    meta = (out / "model.lvx.meta").read_text()
    assert "seed=0" in meta and "config_hash=" in meta


def test_missing_corpus_exits_2_without_artifacts(tmp_path, capsys):
    out = tmp_path / "run"
    assert _run("train", "--corpus", tmp_path / "nope.tsv", "--out-dir", out) == 2
    assert not out.exists()
    assert "corpus" in capsys.readouterr().err


def test_unknown_config_key(tmp_path, checkpoint):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("initial_n=40\nbogus=1\n")
    assert _run("pipeline", "--config", cfg, "--checkpoint", checkpoint, "--out-dir", tmp_path) == 2


def test_bad_config_value(tmp_path, checkpoint):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("words_per_second=0\n")
    assert _run("pipeline", "--config", cfg, "--checkpoint", checkpoint, "--out-dir", tmp_path) == 2


def test_missing_checkpoint(tmp_path):
    assert _run("synth", "--text", "Hi.", "--checkpoint", tmp_path / "none.lvx", "--out-dir", tmp_path) == 2
    assert _run("pipeline", "--out-dir", tmp_path) == 2


def test_synth_empty_text(tmp_path, checkpoint):
    assert _run("synth", "--text", "   ", "--checkpoint", checkpoint, "--out-dir", tmp_path) == 2


def test_synth_is_reproducible(tmp_path, checkpoint, capsys):
    for name in ("a.wav", "b.wav"):
        assert _run("synth", "--text", "Hello there.", "--checkpoint", checkpoint, "--out-dir", tmp_path, "--output", name) == 0
    assert (tmp_path / "a.wav").read_bytes() == (tmp_path / "b.wav").read_bytes()
    audio = read_wav(tmp_path / "a.wav")
    n_tokens = len(audio) // 600
    assert f"{n_tokens} tokens, {n_tokens / 40:.3f} s" in capsys.readouterr().out


def test_pipeline_trace_and_breakdown(tmp_path, checkpoint, capsys):
    cfg = tmp_path / "p.cfg"
    cfg.write_text("asr_delay_ms=100\nfirst_word_delay_ms=150\n")
    runs = []
    for name in ("r1", "r2"):
        out = tmp_path / name
        assert _run("pipeline", "--config", cfg, "--checkpoint", checkpoint, "--out-dir", out, "--per-sentence") == 0
        runs.append(out)
    assert (runs[0] / "trace.csv").read_bytes() == (runs[1] / "trace.csv").read_bytes()
    assert (runs[0] / "pipeline.wav").read_bytes() == (runs[1] / "pipeline.wav").read_bytes()
    assert len(list(runs[0].glob("sentence_*.wav"))) == 4
    row = next(csv.DictReader((runs[0] / "trace.csv").open()))
    assert row["t_asr_done_ms"] == "100.000"
    assert row["t_first_word_ms"] == "250.000"
    text = capsys.readouterr().out
    assert "first audio" in text.lower() or "total" in text.lower()


def test_sweep_single_repetition(tmp_path, checkpoint):
    assert _run("sweep-chunks", "--checkpoint", checkpoint, "--n-list", "20,40", "--repetitions", 1, "--out-dir", tmp_path) == 0
    rows = list(csv.DictReader((tmp_path / "sweep.csv").open()))
    assert [r["initial_n"] for r in rows] == ["20", "40"]
    for r in rows:
        assert r["mean_latency_ms"] == r["p95_latency_ms"]
    assert len(list(csv.DictReader((tmp_path / "sweep_long.csv").open()))) == 2


@pytest.mark.parametrize("argv", [["sweep-chunks", "--n-list", "a,b"], ["sweep-chunks", "--repetitions", "0"], ["bogus"]])
def test_sweep_usage_errors(tmp_path, checkpoint, argv):
    assert _run(*argv, "--checkpoint", checkpoint, "--out-dir", tmp_path) == 2
