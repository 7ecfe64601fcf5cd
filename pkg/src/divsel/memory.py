"""Labeled exemplar memory: ingestion, Okapi BM25 lexical scoring, persistence.

The memory is immutable after build; any number of readers may share it.
"""

from __future__ import annotations

import json
import math
import re
import struct
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .errors import IngestError, MemoryFormatError, UnknownIdError, VersionMismatchError

MAGIC = b"DIVSEL-MEM"
FORMAT_VERSION = 1

DEFAULT_K1 = 1.2
DEFAULT_B = 0.75

NORM_TOLERANCE = 1e-6

# Lowercase, split on whitespace and punctuation (underscore included), no stemming.
_TERM_RE = re.compile(r"[^\W_]+", re.UNICODE)


def tokenize(text: str) -> list[str]:
    """Deterministic lexical tokenization used for all BM25 statistics."""
    return _TERM_RE.findall(text.lower())


@dataclass(frozen=True)
class Exemplar:
    """One labeled memory item: utterance text, intent label, unit embedding."""

    id: str
    text: str
    label: str
    embedding: np.ndarray


@dataclass(frozen=True)
class LexicalStats:
    """Per-term document frequency plus per-exemplar term counts and lengths."""

    doc_frequency: dict[str, int]
    term_counts: tuple[Counter, ...]
    doc_lengths: tuple[int, ...]
    avg_doc_len: float


class Memory:
    """Built exemplar memory. Construct via :func:`ingest` or :func:`load`."""

    def __init__(self, exemplars: tuple[Exemplar, ...], k1: float, b: float):
        if not exemplars:
            raise IngestError("cannot build a memory from zero exemplars")
        self.exemplars = exemplars
        self.k1 = float(k1)
        self.b = float(b)
        self.dim = int(exemplars[0].embedding.shape[0])
        self._index = {ex.id: i for i, ex in enumerate(exemplars)}

        label_index: dict[str, list[str]] = {}
        for ex in exemplars:
            label_index.setdefault(ex.label, []).append(ex.id)
        self.label_index = {k: tuple(v) for k, v in label_index.items()}

        counts = tuple(Counter(tokenize(ex.text)) for ex in exemplars)
        lengths = tuple(sum(c.values()) for c in counts)
        df: dict[str, int] = {}
        for c in counts:
            for term in c:
                df[term] = df.get(term, 0) + 1
        avg = sum(lengths) / len(lengths)
        self.lexical = LexicalStats(df, counts, lengths, avg)

        matrix = np.stack([ex.embedding for ex in exemplars]).astype(np.float64)
        matrix.setflags(write=False)
        self.embedding_matrix = matrix

    def __len__(self) -> int:
        return len(self.exemplars)

    @property
    def size(self) -> int:
        return len(self.exemplars)

    def get(self, exemplar_id: str) -> Exemplar:
        try:
            return self.exemplars[self._index[exemplar_id]]
        except KeyError:
            raise UnknownIdError(f"no exemplar with id {exemplar_id!r}") from None

    def __contains__(self, exemplar_id: str) -> bool:
        return exemplar_id in self._index

    def _idf(self, term: str) -> float:
        df = self.lexical.doc_frequency.get(term, 0)
        if df == 0:
            return 0.0
        n = len(self.exemplars)
        return math.log(1.0 + (n - df + 0.5) / (df + 0.5))

    def bm25_score(self, query_text: str, exemplar_id: str) -> float:
        """Okapi BM25 score of one exemplar against a raw query string.

        Zero when no query term occurs in the exemplar text.
        """
        try:
            i = self._index[exemplar_id]
        except KeyError:
            raise UnknownIdError(f"no exemplar with id {exemplar_id!r}") from None
        return self._bm25_one(tokenize(query_text), i)

    def bm25_scores(self, query_text: str) -> np.ndarray:
        """BM25 scores of every exemplar against the query, in memory order."""
        terms = tokenize(query_text)
        out = np.zeros(len(self.exemplars), dtype=np.float64)
        for i in range(len(self.exemplars)):
            out[i] = self._bm25_one(terms, i)
        return out

    def _bm25_one(self, query_terms: list[str], i: int) -> float:
        counts = self.lexical.term_counts[i]
        dl = self.lexical.doc_lengths[i]
        norm = self.k1 * (1.0 - self.b + self.b * dl / self.lexical.avg_doc_len)
        score = 0.0
        for term in query_terms:
            tf = counts.get(term, 0)
            if tf == 0:
                continue
            score += self._idf(term) * tf * (self.k1 + 1.0) / (tf + norm)
        return score


def ingest(records: Iterable[Mapping], k1: float = DEFAULT_K1, b: float = DEFAULT_B) -> Memory:
    """Build a Memory from exemplar records {id, text, label, embedding}.

    Embeddings are re-normalized to unit L2 norm. Duplicate ids, dimension
    mismatches, and empty streams are rejected.
    """
    exemplars: list[Exemplar] = []
    seen: set[str] = set()
    dim: int | None = None
    for rec in records:
        try:
            rid = str(rec["id"])
            text = str(rec["text"])
            label = str(rec["label"])
            raw = np.asarray(rec["embedding"], dtype=np.float64)
        except (KeyError, TypeError, ValueError) as exc:
            raise IngestError(f"malformed record: {exc}") from exc
        if rid in seen:
            raise IngestError(f"duplicate exemplar id {rid!r}")
        if not label:
            raise IngestError(f"exemplar {rid!r} has an empty label")
        if raw.ndim != 1:
            raise IngestError(f"exemplar {rid!r} embedding is not a flat vector")
        if dim is None:
            dim = int(raw.shape[0])
        elif raw.shape[0] != dim:
            raise IngestError(
                f"exemplar {rid!r} has embedding dimension {raw.shape[0]}, expected {dim}"
            )
        if not np.all(np.isfinite(raw)):
            raise IngestError(f"exemplar {rid!r} embedding has non-finite entries")
        norm = float(np.linalg.norm(raw))
        if norm <= 0.0:
            raise IngestError(f"exemplar {rid!r} embedding has zero norm")
        emb = raw / norm
        emb.setflags(write=False)
        seen.add(rid)
        exemplars.append(Exemplar(rid, text, label, emb))
    if not exemplars:
        raise IngestError("empty record stream")
    return Memory(tuple(exemplars), k1=k1, b=b)


def ingest_jsonl(path: str | Path, k1: float = DEFAULT_K1, b: float = DEFAULT_B) -> Memory:
    """Build a Memory from a line-delimited JSON file of exemplar records."""

    def rows():
        with open(path, "r", encoding="utf-8") as fh:
            for line_no, line in enumerate(fh, start=1):
                line = line.strip()
                if not line:
                    continue
                try:
                    yield json.loads(line)
                except json.JSONDecodeError as exc:
                    raise IngestError(f"{path}:{line_no}: invalid JSON: {exc}") from exc

    return ingest(rows(), k1=k1, b=b)


def persist(memory: Memory, path: str | Path) -> None:
    """Write a memory to a single versioned binary file."""
    header = {
        "dim": memory.dim,
        "count": len(memory),
        "k1": memory.k1,
        "b": memory.b,
        "ids": [ex.id for ex in memory.exemplars],
        "labels": [ex.label for ex in memory.exemplars],
        "texts": [ex.text for ex in memory.exemplars],
    }
    blob = json.dumps(header, ensure_ascii=False).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(np.ascontiguousarray(memory.embedding_matrix, dtype=np.float64).tobytes())


def _read_exact(fh, n: int, what: str) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise MemoryFormatError(f"truncated memory file while reading {what}")
    return data


def load(path: str | Path) -> Memory:
    """Load a memory persisted by :func:`persist`; never returns a partial memory."""
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise MemoryFormatError(f"{path} is not a memory file (bad magic)")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != FORMAT_VERSION:
            raise VersionMismatchError(
                f"memory format version {version} unsupported (reader expects {FORMAT_VERSION})"
            )
        (blob_len,) = struct.unpack("<Q", _read_exact(fh, 8, "header length"))
        try:
            header = json.loads(_read_exact(fh, blob_len, "header").decode("utf-8"))
            dim = int(header["dim"])
            count = int(header["count"])
            k1 = float(header["k1"])
            b = float(header["b"])
            ids, labels, texts = header["ids"], header["labels"], header["texts"]
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise MemoryFormatError(f"corrupt memory header: {exc}") from exc
        if not (len(ids) == len(labels) == len(texts) == count):
            raise MemoryFormatError("corrupt memory header: record counts disagree")
        raw = _read_exact(fh, count * dim * 8, "embedding matrix")
        if fh.read(1):
            raise MemoryFormatError("trailing data after embedding matrix")
    matrix = np.frombuffer(raw, dtype="<f8").reshape(count, dim)
    norms = np.linalg.norm(matrix, axis=1)
    if not np.all(np.abs(norms - 1.0) <= NORM_TOLERANCE):
        raise MemoryFormatError("corrupt memory: stored embeddings are not unit vectors")
    exemplars = []
    for i in range(count):
        emb = np.array(matrix[i], dtype=np.float64)
        emb.setflags(write=False)
        exemplars.append(Exemplar(str(ids[i]), str(texts[i]), str(labels[i]), emb))
    return Memory(tuple(exemplars), k1=k1, b=b)
