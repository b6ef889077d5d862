"""Exact cosine top-k index over fused KB vectors, with a checksummed binary file format.

File layout (all integers little-endian)::

    magic        8 bytes   b"MMRAGIDX"
    version      uint32
    dim          uint32
    entry_count  uint64
    checksum     uint32    CRC-32 of everything after the header
    vectors      entry_count * dim float32
    metadata     entry_count records of (uint32 length, UTF-8 JSON object)
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .fusion import ZeroNormError, as_vector

MAGIC = b"MMRAGIDX"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<8sIIQI")
_LEN = struct.Struct("<I")


class IndexFormatError(ValueError):
    """The index file is truncated, corrupt, or of an unsupported version."""


class SealedIndexError(RuntimeError):
    pass


@dataclass
class KbEntry:
    entry_id: int
    entity_id: str
    article_id: str
    section_id: str
    vector: np.ndarray
    section_text: str = ""
    image_ref: str = ""

    def metadata(self) -> dict:
        return {
            "entry_id": self.entry_id,
            "entity_id": self.entity_id,
            "article_id": self.article_id,
            "section_id": self.section_id,
            "section_text": self.section_text,
            "image_ref": self.image_ref,
        }


@dataclass(frozen=True)
class ScoredCandidate:
    entry_id: int
    score: float


@dataclass(frozen=True)
class IndexHeader:
    format_version: int
    dim: int
    entry_count: int
    checksum: int


@dataclass
class VectorIndex:
    """Brute-force cosine index.

    Entries are added while the index is open; :meth:`seal` freezes it and
    builds the search matrices. A sealed index is read-only and safe to search
    from many threads.
    """

    dim: int
    _entries: list[KbEntry] = field(default_factory=list, repr=False)
    _ids: set[int] = field(default_factory=set, repr=False)
    _sealed: bool = False

    def __post_init__(self) -> None:
        if self.dim < 1:
            raise ValueError("index dimension must be positive")

    def __len__(self) -> int:
        return len(self._entries)

    @property
    def sealed(self) -> bool:
        return self._sealed

    def add_entries(self, entries: Iterable[KbEntry]) -> int:
        if self._sealed:
            raise SealedIndexError("cannot add entries to a sealed index")
        staged: list[KbEntry] = []
        seen = set(self._ids)
        for entry in entries:
            if entry.entry_id < 0:
                raise ValueError(f"entry_id must be non-negative, got {entry.entry_id}")
            if entry.entry_id in seen:
                raise ValueError(f"duplicate entry_id {entry.entry_id}")
            vec = as_vector(entry.vector, self.dim).astype(np.float32)
            if not np.any(vec):
                raise ZeroNormError(f"entry {entry.entry_id} has a zero vector")
            seen.add(entry.entry_id)
            staged.append(
                KbEntry(entry.entry_id, entry.entity_id, entry.article_id, entry.section_id,
                        vec, entry.section_text, entry.image_ref)
            )
        # all-or-nothing: a bad entry leaves the index untouched
        self._entries.extend(staged)
        self._ids = seen
        return len(staged)

    def seal(self) -> "VectorIndex":
        if self._sealed:
            return self
        if self._entries:
            self._matrix = np.stack([e.vector for e in self._entries]).astype(np.float32)
        else:
            self._matrix = np.zeros((0, self.dim), dtype=np.float32)
        self._matrix.setflags(write=False)
        for row, e in enumerate(self._entries):
            e.vector = self._matrix[row]
        self._id_array = np.array([e.entry_id for e in self._entries], dtype=np.int64)
        norms = np.empty(len(self._entries), dtype=np.float64)
        for start in range(0, len(self._entries), 8192):
            block = self._matrix[start:start + 8192].astype(np.float64)
            norms[start:start + 8192] = np.sqrt(np.einsum("ij,ij->i", block, block))
        self._norms64 = norms
        self._norms32 = norms.astype(np.float32)
        self._by_id = {e.entry_id: i for i, e in enumerate(self._entries)}
        self._by_article: dict[str, list[int]] = {}
        for e in self._entries:
            self._by_article.setdefault(e.article_id, []).append(e.entry_id)
        self._sealed = True
        return self

    def entries(self) -> list[KbEntry]:
        return list(self._entries)

    def get(self, entry_id: int) -> KbEntry:
        self._require_sealed()
        return self._entries[self._by_id[entry_id]]

    def article_entries(self, article_id: str) -> list[KbEntry]:
        self._require_sealed()
        return [self.get(i) for i in self._by_article.get(article_id, [])]

    def _require_sealed(self) -> None:
        if not self._sealed:
            raise SealedIndexError("index must be sealed first")

    def search_topk(self, query, k: int) -> list[ScoredCandidate]:
        """Exact top-k by cosine, score descending, ties by ascending entry_id.

        A float32 pass over the whole matrix shortlists candidates within a
        rounding margin of the k-th score; the shortlist is then rescored in
        float64, so the result equals a float64 exhaustive scan.
        """
        self._require_sealed()
        if len(self._entries) == 0:
            raise ValueError("cannot search an empty index")
        if k < 1:
            raise ValueError("k must be positive")
        q = as_vector(query, self.dim)
        q_norm = float(np.linalg.norm(q))
        if q_norm == 0.0:
            raise ZeroNormError("query vector has zero norm")

        n = len(self._entries)
        k = min(k, n)
        q_unit = q / q_norm
        coarse = (self._matrix @ q_unit.astype(np.float32)) / self._norms32
        if k < n:
            kth = np.partition(coarse, n - k)[n - k]
            # float32 dot-product error is bounded by ~dim * 2^-24 for unit inputs
            margin = (self.dim + 4) * 2.0 ** -21
            shortlist = np.flatnonzero(coarse >= kth - margin)
        else:
            shortlist = np.arange(n)

        rows = self._matrix[shortlist].astype(np.float64)
        exact = (rows * q).sum(axis=1) / (self._norms64[shortlist] * q_norm)
        np.clip(exact, -1.0, 1.0, out=exact)
        ids = self._id_array[shortlist]
        order = np.lexsort((ids, -exact))[:k]
        return [ScoredCandidate(int(ids[i]), float(exact[i])) for i in order]

    # -- persistence -----------------------------------------------------

    def save(self, path) -> IndexHeader:
        self._require_sealed()
        meta = bytearray()
        for e in self._entries:
            blob = json.dumps(e.metadata(), ensure_ascii=False, sort_keys=True).encode("utf-8")
            meta += _LEN.pack(len(blob)) + blob
        payload = self._matrix.astype("<f4").tobytes() + bytes(meta)
        header = IndexHeader(FORMAT_VERSION, self.dim, len(self._entries), zlib.crc32(payload))
        with open(path, "wb") as fh:
            fh.write(_HEADER.pack(MAGIC, header.format_version, header.dim,
                                  header.entry_count, header.checksum))
            fh.write(payload)
        return header

    @classmethod
    def load(cls, path) -> "VectorIndex":
        data = Path(path).read_bytes()
        if len(data) < _HEADER.size:
            raise IndexFormatError("truncated index file: incomplete header")
        magic, version, dim, count, checksum = _HEADER.unpack_from(data, 0)
        if magic != MAGIC:
            raise IndexFormatError("not an index file (bad magic)")
        if version != FORMAT_VERSION:
            raise IndexFormatError(f"unsupported index format version {version}")
        payload = data[_HEADER.size:]
        vec_bytes = count * dim * 4
        if len(payload) < vec_bytes:
            raise IndexFormatError("truncated index file: vector block incomplete")
        if zlib.crc32(payload) != checksum:
            raise IndexFormatError("index checksum mismatch")

        matrix = np.frombuffer(payload[:vec_bytes], dtype="<f4").reshape(count, dim)
        entries = []
        offset = vec_bytes
        for row in range(count):
            if offset + _LEN.size > len(payload):
                raise IndexFormatError("truncated index file: metadata incomplete")
            (length,) = _LEN.unpack_from(payload, offset)
            offset += _LEN.size
            if offset + length > len(payload):
                raise IndexFormatError("truncated index file: metadata incomplete")
            meta = json.loads(payload[offset:offset + length].decode("utf-8"))
            offset += length
            entries.append(KbEntry(vector=matrix[row].astype(np.float32), **meta))
        if offset != len(payload):
            raise IndexFormatError("trailing bytes after metadata")

        index = cls(dim=dim)
        index.add_entries(entries)
        return index.seal()


def read_header(path) -> IndexHeader:
    with open(path, "rb") as fh:
        raw = fh.read(_HEADER.size)
    if len(raw) < _HEADER.size:
        raise IndexFormatError("truncated index file: incomplete header")
    magic, version, dim, count, checksum = _HEADER.unpack(raw)
    if magic != MAGIC:
        raise IndexFormatError("not an index file (bad magic)")
    return IndexHeader(version, dim, count, checksum)

