import struct

import numpy as np
import pytest

from ccfr.retrieval import (
    DEFAULT_TOPM,
    Database,
    EmbeddingRecord,
    build_database,
    decode_database,
    encode_database,
    filter_by_threshold,
    query_topm,
)


def records(rng, n, e, labels=5, quantize=None):
    m = rng.normal(size=(n, e))
    if quantize:
        m = np.round(m * quantize) / quantize
    ids = [f"id{int(i):05d}" for i in rng.permutation(n)]
    return [EmbeddingRecord(ids[i], int(rng.integers(labels)), m[i]) for i in range(n)]


def full_sort_oracle(recs, q, topm):
    qn = np.asarray(q) / np.linalg.norm(q)
    rows = []
    for r in recs:
        v = r.embedding / np.linalg.norm(r.embedding)
        rows.append((min(1.0, max(-1.0, float(np.dot(v, qn)))), r.id, r.label))
    rows.sort(key=lambda t: (-t[0], t[1]))
    return rows[:topm]


class TestBuild:
    def test_size_and_norms(self):
        rng = np.random.default_rng(0)
        db = build_database(records(rng, 30, 8))
        assert len(db) == 30
        assert np.all(np.abs(np.linalg.norm(db.matrix, axis=1) - 1.0) < 1e-9)

    def test_duplicate_id(self):
        recs = [EmbeddingRecord("x", 0, [1.0, 0.0]), EmbeddingRecord("x", 1, [0.0, 1.0])]
        with pytest.raises(ValueError, match="'x'"):
            build_database(recs)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            build_database([EmbeddingRecord("a", 0, [1.0, 0.0]), EmbeddingRecord("b", 0, [1.0])])

    def test_empty(self):
        with pytest.raises(ValueError):
            build_database([])

    def test_immutable(self):
        db = build_database([EmbeddingRecord("a", 0, [1.0, 0.0])])
        with pytest.raises(ValueError):
            db.matrix[0, 0] = 5.0


class TestQuery:
    def test_default_topm(self):
        assert DEFAULT_TOPM == 50

    def test_self_retrieval(self):
        rng = np.random.default_rng(1)
        recs = records(rng, 40, 6)
        db = build_database(recs)
        r = query_topm(db, recs[7].embedding, 3)
        assert r.ids[0] == recs[7].id
        assert r.similarities[0] == pytest.approx(1.0, abs=1e-12)

    def test_topm_exceeding_size(self):
        rng = np.random.default_rng(2)
        db = build_database(records(rng, 10, 4))
        r = query_topm(db, rng.normal(size=4), 100)
        assert len(r) == 10
        assert np.all(np.diff(r.similarities) <= 0)

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_full_sort(self, seed):
        rng = np.random.default_rng(seed)
        recs = records(rng, 200, 16)
        db = build_database(recs)
        q = rng.normal(size=16)
        r = query_topm(db, q, 50)
        oracle = full_sort_oracle(recs, q, 50)
        assert list(r.ids) == [o[1] for o in oracle]
        assert list(r.labels) == [o[2] for o in oracle]
        np.testing.assert_allclose(r.similarities, [o[0] for o in oracle], atol=1e-12)

    def test_ties_broken_by_id(self):
        recs = [EmbeddingRecord(i, 0, [1.0, 0.0]) for i in ("c", "a", "b")]
        recs.append(EmbeddingRecord("d", 1, [0.0, 1.0]))
        r = query_topm(build_database(recs), [1.0, 0.0], 4)
        assert r.ids == ("a", "b", "c", "d")

    def test_insertion_order_invariant(self):
        rng = np.random.default_rng(3)
        recs = records(rng, 100, 3, quantize=2)  # coarse values force ties
        q = rng.normal(size=3)
        a = query_topm(build_database(recs), q, 30)
        b = query_topm(build_database(recs[::-1]), q, 30)
        assert a.ids == b.ids

    def test_read_only(self):
        rng = np.random.default_rng(4)
        db = build_database(records(rng, 50, 8))
        before = db.fingerprint()
        for _ in range(20):
            query_topm(db, rng.normal(size=8), 10)
        assert db.fingerprint() == before

    def test_dimension_mismatch(self):
        db = build_database([EmbeddingRecord("a", 0, [1.0, 0.0])])
        with pytest.raises(ValueError):
            query_topm(db, [1.0, 0.0, 0.0], 1)


class TestFilter:
    def _result(self):
        db = build_database([EmbeddingRecord("a", 0, [1.0, 0.0]),
                             EmbeddingRecord("b", 1, [0.7, np.sqrt(1 - 0.49)]),
                             EmbeddingRecord("c", 2, [0.5, np.sqrt(0.75)])])
        return query_topm(db, [1.0, 0.0], 3)

    def test_strict(self):
        r = self._result()
        sims = r.similarities.copy()
        kept = filter_by_threshold(r, float(sims[1]))
        assert kept.ids == ("a",)

    def test_extremes(self):
        r = self._result()
        assert filter_by_threshold(r, -1.0).ids == r.ids
        assert len(filter_by_threshold(r, 1.0)) == 0

    def test_mixed(self):
        from ccfr.retrieval import SearchResult
        r = SearchResult(("a", "b", "c"), np.array([0, 1, 2]), np.array([0.9, 0.7, 0.5]))
        assert list(filter_by_threshold(r, 0.7)) == [("a", 0, 0.9)]


class TestPersistence:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(5)
        recs = records(rng, 25, 7)
        db = build_database(recs)
        path = tmp_path / "db.bin"
        db.save(path)
        again = Database.load(path)
        assert again.ids == db.ids
        assert np.array_equal(again.labels, db.labels)
        np.testing.assert_allclose(again.matrix, db.matrix, atol=1e-6)
        assert np.all(np.abs(np.linalg.norm(again.matrix, axis=1) - 1.0) < 1e-9)

    def test_layout(self):
        db = build_database([EmbeddingRecord("ab", 3, [1.0, 0.0])])
        data = encode_database(db)
        expected = (b"CCFRDB1" + struct.pack("<II", 1, 2) + struct.pack("<I", 2) + b"ab"
                    + struct.pack("<I", 3) + struct.pack("<2f", 1.0, 0.0))
        assert data == expected

    def test_bad_magic_and_truncation(self):
        db = build_database([EmbeddingRecord("ab", 3, [1.0, 0.0])])
        data = encode_database(db)
        with pytest.raises(ValueError, match="magic"):
            decode_database(b"XXXXXXX" + data[7:])
        with pytest.raises(ValueError):
            decode_database(data[:-3])
