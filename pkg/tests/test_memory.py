import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from divsel.errors import IngestError, MemoryFormatError, UnknownIdError, VersionMismatchError
from divsel.memory import ingest, load, persist, tokenize


def rec(rid, text, label, emb):
    return {"id": rid, "text": text, "label": label, "embedding": emb}


def small_records():
    return [
        rec("e1", "need a taxi now", "taxi", [1.0, 0.0, 0.0, 0.0]),
        rec("e2", "cancel flight", "flight", [0.0, 1.0, 0.0, 0.0]),
        rec("e3", "book a hotel room", "hotel", [0.0, 0.0, 1.0, 0.0]),
    ]


class TestTokenize:
    def test_lowercase_and_punctuation_split(self):
        assert tokenize("Book a Taxi, now!") == ["book", "a", "taxi", "now"]

    def test_underscore_is_a_delimiter(self):
        assert tokenize("not_mentioned") == ["not", "mentioned"]

    def test_pure(self):
        text = "Mixed CASE; with-punct 123"
        assert tokenize(text) == tokenize(text)


class TestIngest:
    def test_basic_build(self):
        mem = ingest(small_records())
        assert len(mem) == 3
        assert mem.dim == 4
        assert sum(len(ids) for ids in mem.label_index.values()) == 3

    def test_renormalizes_embeddings(self):
        mem = ingest([rec("e1", "a", "x", [2.0, 0.0, 0.0, 0.0])])
        assert abs(np.linalg.norm(mem.get("e1").embedding) - 1.0) <= 1e-6

    def test_duplicate_id_rejected(self):
        rows = [rec("e1", "a", "x", [1.0, 0.0]), rec("e1", "b", "y", [0.0, 1.0])]
        with pytest.raises(IngestError, match="duplicate"):
            ingest(rows)

    def test_dimension_mismatch_names_offender(self):
        rows = [rec("e1", "a", "x", [1.0, 0.0]), rec("e2", "b", "y", [0.0, 1.0, 0.0])]
        with pytest.raises(IngestError, match="e2"):
            ingest(rows)

    def test_empty_stream_rejected(self):
        with pytest.raises(IngestError, match="empty"):
            ingest([])

    def test_empty_label_rejected(self):
        with pytest.raises(IngestError, match="label"):
            ingest([rec("e1", "a", "", [1.0, 0.0])])

    def test_zero_norm_rejected(self):
        with pytest.raises(IngestError, match="zero norm"):
            ingest([rec("e1", "a", "x", [0.0, 0.0])])

    def test_non_finite_rejected(self):
        with pytest.raises(IngestError, match="non-finite"):
            ingest([rec("e1", "a", "x", [float("nan"), 0.0])])


class TestBm25:
    def test_no_overlap_scores_zero(self):
        mem = ingest(small_records())
        assert mem.bm25_score("refund order", "e2") == 0.0

    def test_matches_textbook_okapi(self):
        """Independent computation of the standard Okapi formula with
        idf = ln(1 + (N - df + 0.5) / (df + 0.5)), k1=1.2, b=0.75."""
        mem = ingest(small_records())
        n_docs = 3
        df = 1  # "taxi" occurs in one document
        idf = math.log(1.0 + (n_docs - df + 0.5) / (df + 0.5))
        tf, doc_len, avg_len = 1, 4, (4 + 2 + 4) / 3
        k1, b = 1.2, 0.75
        expected = idf * tf * (k1 + 1) / (tf + k1 * (1 - b + b * doc_len / avg_len))
        got = mem.bm25_score("taxi", "e1")
        assert got > 0
        np.testing.assert_allclose(got, expected, rtol=1e-12)

    def test_deterministic(self):
        mem = ingest(small_records())
        assert mem.bm25_score("need a room", "e3") == mem.bm25_score("need a room", "e3")

    def test_unknown_id(self):
        mem = ingest(small_records())
        with pytest.raises(UnknownIdError):
            mem.bm25_score("taxi", "nope")

    @given(extra=st.integers(min_value=1, max_value=6))
    @settings(max_examples=25, deadline=None)
    def test_monotone_in_term_frequency(self, extra):
        """Duplicating a matching query term's occurrences never lowers the score."""
        base = small_records()
        boosted = [dict(r) for r in base]
        boosted[0]["text"] = "need a taxi now" + " taxi" * extra
        low = ingest(base).bm25_score("taxi", "e1")
        high = ingest(boosted).bm25_score("taxi", "e1")
        assert high >= low


class TestPersistence:
    def test_round_trip_is_bit_exact(self, tmp_path):
        rng = np.random.default_rng(7)
        rows = [
            rec(f"e{i}", f"utterance number {i} about topic {i % 5}", f"lab{i % 5}",
                list(rng.normal(size=8)))
            for i in range(100)
        ]
        mem = ingest(rows)
        path = tmp_path / "mem.divmem"
        persist(mem, path)
        loaded = load(path)
        assert len(loaded) == len(mem)
        assert loaded.dim == mem.dim
        assert np.array_equal(loaded.embedding_matrix, mem.embedding_matrix)
        for query in ("utterance topic", "number 3", "zzz"):
            for ex in mem.exemplars[:10]:
                assert loaded.bm25_score(query, ex.id) == mem.bm25_score(query, ex.id)

    def test_truncated_file_fails_loudly(self, tmp_path):
        mem = ingest(small_records())
        path = tmp_path / "mem.divmem"
        persist(mem, path)
        data = path.read_bytes()
        path.write_bytes(data[: len(data) - 9])
        with pytest.raises(MemoryFormatError, match="truncated"):
            load(path)

    def test_version_mismatch(self, tmp_path):
        mem = ingest(small_records())
        path = tmp_path / "mem.divmem"
        persist(mem, path)
        data = bytearray(path.read_bytes())
        data[10:14] = (0).to_bytes(4, "little")  # patch version field to v0
        path.write_bytes(bytes(data))
        with pytest.raises(VersionMismatchError):
            load(path)

    def test_wrong_magic(self, tmp_path):
        path = tmp_path / "mem.divmem"
        path.write_bytes(b"NOT-A-MEMORY-FILE")
        with pytest.raises(MemoryFormatError, match="magic"):
            load(path)
