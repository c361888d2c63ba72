"""Training corpus I/O and a synthetic corpus generator.

Corpus lines are ``text<TAB>tok,tok,...``.  The generator derives every token
sequence from the text bytes alone (a congruential chain driven by running
byte sums), so a corpus is reproducible from its seed and needs no audio.
"""

from __future__ import annotations

import random
from pathlib import Path

from llmvox import g2p

WORDS = (
    "a an and are as at be but by can do for go had has he her him his how i if in is it "
    "its me my no not now of off on one or our out say she so the to two up us was we "
    "who why yes you all any ask big box cat day dog eat end far few fun get got hat "
    "hot let man may new old own put red run sat see set sit six sun ten too top try use "
    "way win yet"
).split()

TERMINALS = ".!?"


class CorpusError(ValueError):
    def __init__(self, path, lineno: int, message: str):
        super().__init__(f"{path}:{lineno}: {message}")
        self.lineno = lineno


def parse_corpus(path) -> list[tuple[str, list[int]]]:
    path = Path(path)
    pairs = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            text, sep, toks = line.partition("\t")
            if not sep:
                raise CorpusError(path, lineno, "missing TAB between text and tokens")
            try:
                tokens = [int(t) for t in toks.split(",") if t.strip()]
            except ValueError as exc:
                raise CorpusError(path, lineno, f"bad token list: {exc}") from None
            if not tokens:
                raise CorpusError(path, lineno, "empty token list")
            pairs.append((text, tokens))
    return pairs


def write_corpus(path, pairs) -> Path:
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for text, tokens in pairs:
            if "\t" in text or "\n" in text:
                raise ValueError(f"text may not contain TAB or newline: {text!r}")
            fh.write(f"{text}\t{','.join(str(int(t)) for t in tokens)}\n")
    return path


def tokens_for_text(text: str, vocab_size: int = 4096, tokens_per_byte: float = 2.0, max_len: int = 128) -> list[int]:
    """Deterministic stand-in 'speech' for ``text``: length ~ tokens_per_byte * bytes.

    Token t depends only on bytes 0..t (through their running sum), matching
    what the synthesizer can see at step t.
    """
    data = bytes(g2p.subtokenize([text]))
    m = len(data)
    if m == 0:
        return []
    length = max(m, min(max_len, int(round(tokens_per_byte * m))))
    state = 0
    running = 0
    out = []
    for t in range(length):
        if t < m:
            running += data[t]
        state = (state * 1103515245 + 12345 + running * 2654435761 + t) % vocab_size
        out.append(state)
    return out


def synthetic_corpus(
    n_pairs: int = 32,
    seed: int = 0,
    max_words: int = 12,
    vocab_size: int = 4096,
    tokens_per_byte: float = 2.0,
    max_len: int = 128,
) -> list[tuple[str, list[int]]]:
    """``n_pairs`` distinct sentences of 1..max_words words with derived token sequences."""
    rng = random.Random(seed)
    seen: set[str] = set()
    pairs = []
    while len(pairs) < n_pairs:
        n = rng.randint(1, max_words)
        text = " ".join(rng.choice(WORDS) for _ in range(n)) + rng.choice(TERMINALS)
        text = text[0].upper() + text[1:]
        if text in seen or len(g2p.subtokenize([text])) > max_len:
            continue
        seen.add(text)
        pairs.append((text, tokens_for_text(text, vocab_size, tokens_per_byte, max_len)))
    return pairs
