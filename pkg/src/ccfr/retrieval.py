"""Exact cosine-similarity search over a database of training embeddings."""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

DB_MAGIC = b"CCFRDB1"
DEFAULT_TOPM = 50


@dataclass(frozen=True)
class EmbeddingRecord:
    id: str
    label: int
    embedding: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "embedding", np.asarray(self.embedding, dtype=np.float64))
        if self.embedding.ndim != 1:
            raise ValueError(f"record {self.id!r}: embedding must be a 1-D vector")
        if self.label < 0:
            raise ValueError(f"record {self.id!r}: label must be >= 0, got {self.label}")


@dataclass(frozen=True)
class SearchResult:
    """Neighbours ordered by (similarity desc, id asc)."""

    ids: tuple[str, ...]
    labels: np.ndarray
    similarities: np.ndarray

    def __len__(self) -> int:
        return len(self.ids)

    def __iter__(self) -> Iterator[tuple[str, int, float]]:
        for i, label, sim in zip(self.ids, self.labels, self.similarities):
            yield i, int(label), float(sim)

    def take(self, mask_or_index) -> "SearchResult":
        idx = np.flatnonzero(mask_or_index) if np.asarray(mask_or_index).dtype == bool \
            else np.asarray(mask_or_index)
        return SearchResult(tuple(self.ids[i] for i in idx), self.labels[idx],
                            self.similarities[idx])


def _unit_rows(m: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(m, axis=1)
    bad = np.flatnonzero(norms == 0)
    if bad.size:
        raise ValueError(f"zero-norm embedding at row {int(bad[0])}")
    return m / norms[:, None]


class Database:
    """Immutable embedding index; rows are L2-normalised at construction."""

    def __init__(self, ids: Sequence[str], labels, matrix):
        ids = tuple(str(i) for i in ids)
        matrix = np.asarray(matrix, dtype=np.float64)
        labels = np.asarray(labels, dtype=np.int64)
        if not ids:
            raise ValueError("cannot build an empty database")
        if matrix.ndim != 2 or matrix.shape[0] != len(ids) or labels.shape != (len(ids),):
            raise ValueError("ids, labels and embedding rows must have equal length")
        seen = set()
        for i in ids:
            if i in seen:
                raise ValueError(f"duplicate id {i!r}")
            seen.add(i)
        self._ids = ids
        self._labels = labels
        self._matrix = np.ascontiguousarray(_unit_rows(matrix))
        # Rank of each id in sorted order, used as the similarity tie-break.
        order = sorted(range(len(ids)), key=ids.__getitem__)
        self._id_rank = np.empty(len(ids), dtype=np.int64)
        self._id_rank[order] = np.arange(len(ids))
        for a in (self._labels, self._matrix, self._id_rank):
            a.setflags(write=False)

    @property
    def ids(self) -> tuple[str, ...]:
        return self._ids

    @property
    def labels(self) -> np.ndarray:
        return self._labels

    @property
    def matrix(self) -> np.ndarray:
        return self._matrix

    @property
    def dim(self) -> int:
        return self._matrix.shape[1]

    def __len__(self) -> int:
        return len(self._ids)

    def similarities(self, q) -> np.ndarray:
        q = np.asarray(q, dtype=np.float64)
        if q.shape != (self.dim,):
            raise ValueError(f"query dimension {q.size} does not match database dimension {self.dim}")
        norm = np.linalg.norm(q)
        if norm == 0:
            raise ValueError("zero-norm query")
        return np.clip(self._matrix @ (q / norm), -1.0, 1.0)

    def rank(self, sims: np.ndarray, limit: int | None = None) -> SearchResult:
        order = np.lexsort((self._id_rank, -sims))
        if limit is not None:
            order = order[:limit]
        return SearchResult(tuple(self._ids[i] for i in order), self._labels[order], sims[order])

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update("\0".join(self._ids).encode())
        h.update(self._labels.tobytes())
        h.update(self._matrix.tobytes())
        return h.hexdigest()

    def save(self, path) -> None:
        Path(path).write_bytes(encode_database(self))

    @classmethod
    def load(cls, path) -> "Database":
        return decode_database(Path(path).read_bytes())


def build_database(records: Sequence[EmbeddingRecord]) -> Database:
    if not records:
        raise ValueError("cannot build an empty database")
    dim = records[0].embedding.shape[0]
    for r in records:
        if r.embedding.shape != (dim,):
            raise ValueError(f"record {r.id!r} has dimension {r.embedding.size}, expected {dim}")
    return Database([r.id for r in records], [r.label for r in records],
                    np.stack([r.embedding for r in records]))


def query_topm(db: Database, q, topm: int = DEFAULT_TOPM) -> SearchResult:
    if topm < 1:
        raise ValueError(f"topm must be >= 1, got {topm}")
    return db.rank(db.similarities(q), topm)


def query_all(db: Database, q) -> SearchResult:
    return db.rank(db.similarities(q))


def filter_by_threshold(r: SearchResult, t_sc: float) -> SearchResult:
    """Keep neighbours whose similarity is strictly above ``t_sc``."""
    return r.take(r.similarities > t_sc)


def encode_database(db: Database) -> bytes:
    parts = [DB_MAGIC, struct.pack("<II", len(db), db.dim)]
    rows = db.matrix.astype("<f4")
    for i, (rid, label) in enumerate(zip(db.ids, db.labels)):
        raw = rid.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", int(label)))
        parts.append(rows[i].tobytes())
    return b"".join(parts)


def decode_database(data: bytes) -> Database:
    if not data.startswith(DB_MAGIC):
        raise ValueError("not a CCFR database file (bad magic)")
    off = len(DB_MAGIC)
    try:
        n, dim = struct.unpack_from("<II", data, off)
        off += 8
        ids, labels, rows = [], [], []
        for _ in range(n):
            (length,) = struct.unpack_from("<I", data, off)
            off += 4
            ids.append(data[off:off + length].decode("utf-8"))
            off += length
            (label,) = struct.unpack_from("<I", data, off)
            labels.append(label)
            off += 4
            rows.append(np.frombuffer(data, dtype="<f4", count=dim, offset=off))
            off += 4 * dim
    except (struct.error, ValueError) as exc:
        raise ValueError(f"truncated database file: {exc}") from None
    if off != len(data):
        raise ValueError(f"{len(data) - off} trailing bytes after database records")
    return Database(ids, labels, np.stack(rows).astype(np.float64))
