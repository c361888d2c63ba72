"""Input checks shared by the estimator, the engine and the CLI."""

from __future__ import annotations

import numbers

from llmvox import g2p


def check_positive_int(value, name: str, minimum: int = 1) -> int:
    if isinstance(value, bool) or not isinstance(value, numbers.Integral):
        raise TypeError(f"{name} must be an integer, got {type(value).__name__}")
    if value < minimum:
        raise ValueError(f"{name} must be >= {minimum}, got {value}")
    return int(value)


def check_texts(X) -> list[str]:
    if isinstance(X, str):
        raise TypeError("expected a sequence of texts, got a single string")
    texts = list(X)
    for i, text in enumerate(texts):
        if not isinstance(text, str):
            raise TypeError(f"text {i} is {type(text).__name__}, expected str")
    return texts


def check_token_sequence(tokens, vocab_size: int, name: str = "tokens") -> list[int]:
    out = []
    for i, tok in enumerate(tokens):
        if isinstance(tok, bool) or not isinstance(tok, numbers.Integral):
            raise TypeError(f"{name}[{i}] is not an integer")
        if not 0 <= tok < vocab_size:
            raise ValueError(f"{name}[{i}]={tok} outside [0, {vocab_size})")
        out.append(int(tok))
    return out


def check_pairs(X, y, vocab_size: int, block_size: int) -> list[tuple[str, list[int]]]:
    """Validate (text, speech tokens) training pairs: M <= T < block_size."""
    texts = check_texts(X)
    seqs = list(y)
    if len(texts) != len(seqs):
        raise ValueError(f"{len(texts)} texts but {len(seqs)} token sequences")
    if not texts:
        raise ValueError("no training pairs")
    pairs = []
    for i, (text, toks) in enumerate(zip(texts, seqs)):
        toks = check_token_sequence(toks, vocab_size, f"y[{i}]")
        m = len(g2p.subtokenize([text]))
        if m > len(toks):
            raise g2p.AlignmentError(m, len(toks))
        if len(toks) >= block_size:
            raise ValueError(f"pair {i}: T={len(toks)} must be < block_size={block_size}")
        pairs.append((text, toks))
    return pairs
