import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from llmvox import g2p


def _utf8_len(text):
    # byte count from code points, independent of str.encode
    n = 0
    for ch in text:
        cp = ord(ch)
        n += 1 if cp < 0x80 else 2 if cp < 0x800 else 3 if cp < 0x10000 else 4
    return n


def test_examples():
    assert g2p.subtokenize(["hi"]) == [104, 105]
    assert g2p.subtokenize([]) == []
    arabic = "مرحبا"
    assert _utf8_len(arabic) == 10
    assert len(g2p.subtokenize([arabic])) == 10


def test_words_joined_with_single_spaces():
    assert g2p.subtokenize([" a", "b ", "  ", "c"]) == list(b"a b c")


@settings(max_examples=100, deadline=None)
@given(st.text(), st.text())
def test_injective_on_byte_strings(a, b):
    ia, ib = g2p.subtokenize([a]), g2p.subtokenize([b])
    if g2p.join_words([a]) != g2p.join_words([b]):
        assert ia != ib
    assert len(ia) == _utf8_len(g2p.join_words([a]))


TABLE = g2p.EmbeddingTable.random(dim=256, seed=3)


def test_padding_rows_equal_pad_embedding():
    seq = g2p.embed_padded([1, 2, 3, 4, 5], 8, TABLE)
    assert seq.real_len == 5
    for row in seq.vectors[5:]:
        assert np.array_equal(row, TABLE.pad_row)
    assert np.array_equal(seq.vectors[:5], TABLE.vectors[[1, 2, 3, 4, 5]])


def test_all_pad_and_no_pad():
    seq = g2p.embed_padded([], 3, TABLE)
    assert seq.real_len == 0 and all(np.array_equal(r, TABLE.pad_row) for r in seq.vectors)
    ids = [10, 20, 30]
    assert np.array_equal(g2p.embed_padded(ids, 3, TABLE).vectors, TABLE.vectors[ids])


def test_alignment_error_carries_lengths():
    with pytest.raises(g2p.AlignmentError) as err:
        g2p.embed_padded([1, 2, 3], 2, TABLE)
    assert (err.value.m, err.value.t) == (3, 2)


@settings(max_examples=60, deadline=None)
@given(st.data())
def test_row_count_is_t(data):
    t = data.draw(st.integers(0, 4096))
    m = data.draw(st.integers(0, min(t, 64)))
    ids = data.draw(st.lists(st.integers(0, 255), min_size=m, max_size=m))
    assert len(g2p.embed_padded(ids, t, TABLE)) == t


def test_table_file_roundtrip(tmp_path):
    path = TABLE.save(tmp_path / "t.lvx")
    raw = path.read_bytes()
    assert raw[:4] == b"LVX1" and int.from_bytes(raw[4:8], "little") == 257
    assert np.array_equal(g2p.EmbeddingTable.load(path).vectors, TABLE.vectors)


def test_table_shape_checked():
    with pytest.raises(ValueError):
        g2p.EmbeddingTable(np.zeros((256, 4)))
