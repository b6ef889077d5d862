import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mmrag.fusion import ZeroNormError
from mmrag.index import (
    IndexFormatError,
    KbEntry,
    SealedIndexError,
    VectorIndex,
    read_header,
)
from tests.oracles import exhaustive_topk


def make_index(n, dim, seed=0, start_id=0):
    rng = np.random.default_rng(seed)
    vecs = rng.normal(size=(n, dim))
    idx = VectorIndex(dim)
    idx.add_entries(KbEntry(start_id + i, f"E{i % 7}", f"A{i % 5}", f"s{i}", v, f"text {i}", f"img://{i}")
                    for i, v in enumerate(vecs))
    return idx.seal(), vecs


def test_matches_oracle_on_random_queries():
    idx, vecs = make_index(500, 16, seed=3)
    stored = [e.vector for e in idx.entries()]
    rng = np.random.default_rng(4)
    for _ in range(20):
        q = rng.normal(size=16)
        for k in (1, 7, 50):
            got = [c.entry_id for c in idx.search_topk(q, k)]
            assert got == exhaustive_topk(stored, range(500), q, k)


def test_ties_break_by_entry_id():
    idx = VectorIndex(2)
    same = [1.0, 1.0]
    idx.add_entries([KbEntry(9, "e", "a", "s9", same), KbEntry(2, "e", "a", "s2", same),
                     KbEntry(5, "e", "a", "s5", [2.0, 2.0]), KbEntry(1, "e", "a", "s1", [1.0, -1.0])])
    idx.seal()
    res = idx.search_topk([1.0, 1.0], 4)
    assert [c.entry_id for c in res] == [2, 5, 9, 1]
    assert res[0].score == pytest.approx(1.0)


def test_k_larger_than_index_returns_everything():
    idx, _ = make_index(5, 4)
    assert len(idx.search_topk(np.ones(4), 50)) == 5


def test_scores_descending_and_bounded():
    idx, _ = make_index(200, 8)
    res = idx.search_topk(np.arange(1.0, 9.0), 200)
    scores = [c.score for c in res]
    assert scores == sorted(scores, reverse=True)
    assert all(-1.0 <= s <= 1.0 for s in scores)


def test_add_rejections_are_atomic():
    idx = VectorIndex(2)
    idx.add_entries([KbEntry(0, "e", "a", "s", [1.0, 0.0])])
    with pytest.raises(ValueError, match="duplicate"):
        idx.add_entries([KbEntry(1, "e", "a", "s", [1.0, 0.0]), KbEntry(0, "e", "a", "s", [0.0, 1.0])])
    with pytest.raises(ValueError):
        idx.add_entries([KbEntry(2, "e", "a", "s", [1.0, 0.0, 3.0])])
    with pytest.raises(ZeroNormError):
        idx.add_entries([KbEntry(3, "e", "a", "s", [0.0, 0.0])])
    with pytest.raises(ValueError):
        idx.add_entries([KbEntry(-1, "e", "a", "s", [1.0, 1.0])])
    assert len(idx) == 1
    idx.seal()
    with pytest.raises(SealedIndexError):
        idx.add_entries([KbEntry(5, "e", "a", "s", [1.0, 0.0])])


def test_search_errors():
    idx = VectorIndex(3)
    with pytest.raises(SealedIndexError):
        idx.search_topk([1, 0, 0], 1)
    idx.seal()
    with pytest.raises(ValueError, match="empty"):
        idx.search_topk([1, 0, 0], 1)
    full, _ = make_index(3, 3)
    with pytest.raises(ValueError):
        full.search_topk([1, 0, 0], 0)
    with pytest.raises(ZeroNormError):
        full.search_topk([0, 0, 0], 1)
    with pytest.raises(ValueError):
        full.search_topk([1, 0], 1)


def test_article_lookup():
    idx, _ = make_index(20, 4)
    ids = [e.entry_id for e in idx.article_entries("A2")]
    assert ids == [2, 7, 12, 17]
    assert idx.article_entries("missing") == []


def test_save_load_roundtrip(tmp_path):
    idx, _ = make_index(64, 12, start_id=100)
    path = tmp_path / "i.bin"
    header = idx.save(path)
    assert header == read_header(path)
    assert (header.dim, header.entry_count) == (12, 64)
    back = VectorIndex.load(path)
    q = np.linspace(-1, 1, 12)
    assert back.search_topk(q, 10) == idx.search_topk(q, 10)
    assert back.get(105).metadata() == idx.get(105).metadata()
    # saving again reproduces the file byte for byte
    back.save(tmp_path / "again.bin")
    assert (tmp_path / "again.bin").read_bytes() == path.read_bytes()


def test_header_layout(tmp_path):
    idx, _ = make_index(3, 4)
    path = tmp_path / "i.bin"
    idx.save(path)
    magic, version, dim, count, _ = struct.unpack_from("<8sIIQI", path.read_bytes())
    assert (magic, version, dim, count) == (b"MMRAGIDX", 1, 4, 3)


@pytest.mark.parametrize("damage, message", [
    (lambda b: b[:10], "header"),
    (lambda b: b"NOTANIDX" + b[8:], "magic"),
    (lambda b: b[:8] + struct.pack("<I", 9) + b[12:], "version"),
    (lambda b: b[:40], "truncated"),
    (lambda b: b[:-1] + bytes([b[-1] ^ 1]), "checksum"),
])
def test_corrupt_files_rejected(tmp_path, damage, message):
    idx, _ = make_index(3, 4)
    path = tmp_path / "i.bin"
    idx.save(path)
    path.write_bytes(damage(path.read_bytes()))
    with pytest.raises(IndexFormatError, match=message):
        VectorIndex.load(path)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 60), st.integers(1, 8), st.integers(0, 2**32 - 1), st.integers(1, 70))
def test_topk_property_matches_oracle(n, dim, seed, k):
    rng = np.random.default_rng(seed)
    # small integer coordinates make exact ties common
    vecs = rng.integers(-2, 3, size=(n, dim)).astype(np.float64)
    vecs[~vecs.any(axis=1), 0] = 1.0
    idx = VectorIndex(dim)
    ids = rng.permutation(1000)[:n]
    idx.add_entries(KbEntry(int(i), "e", "a", "s", v) for i, v in zip(ids, vecs))
    idx.seal()
    q = rng.integers(-2, 3, size=dim).astype(np.float64)
    q[0] = q[0] or 1.0
    got = [c.entry_id for c in idx.search_topk(q, k)]
    assert got == exhaustive_topk(vecs, ids, q, k)
