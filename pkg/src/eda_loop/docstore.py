"""Small BM25 retrieval store over tool-documentation snippets.

Documents are split on blank-line paragraph boundaries and greedily merged
into chunks of at most 200 tokens (an oversized single paragraph stays
whole).  The tokenizer lowercases and splits on non-alphanumerics.  BM25
uses k1=1.2, b=0.75 and IDF = ln((N - df + 0.5)/(df + 0.5) + 1), which is
always positive, so scores are nonnegative.  Ties (including zero-score
chunks, which are kept so small corpora can still fill ``k``) break by
(doc_id, chunk_index) ascending.
"""

from __future__ import annotations

import math
import re
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from threading import Lock

BM25_K1 = 1.2
BM25_B = 0.75
CHUNK_TOKEN_CAP = 200

_TOKEN_RE = re.compile(r"[^0-9a-z]+")


def tokenize(text: str) -> list[str]:
    return [t for t in _TOKEN_RE.split(text.lower()) if t]


@dataclass(frozen=True)
class DocChunk:
    doc_id: str
    chunk_index: int
    text: str
    term_counts: tuple[tuple[str, int], ...]

    @property
    def length(self) -> int:
        return sum(n for _, n in self.term_counts)


def _chunk_paragraphs(text: str) -> list[str]:
    paragraphs = [p.strip() for p in re.split(r"\n\s*\n", text) if p.strip()]
    chunks: list[str] = []
    current: list[str] = []
    current_tokens = 0
    for para in paragraphs:
        n = len(tokenize(para))
        if current and current_tokens + n > CHUNK_TOKEN_CAP:
            chunks.append("\n\n".join(current))
            current, current_tokens = [], 0
        current.append(para)
        current_tokens += n
    if current:
        chunks.append("\n\n".join(current))
    return chunks


class DocStore:
    """In-memory inverted-index-free BM25 store; reads are concurrent,
    ingest takes the store lock."""

    def __init__(self):
        self._chunks: dict[str, list[DocChunk]] = {}
        self._lock = Lock()

    def ingest(self, doc_id: str, text: str) -> int:
        """Chunk and store one document; re-ingesting a doc_id replaces it."""
        chunks = []
        for index, chunk_text in enumerate(_chunk_paragraphs(text)):
            counts = Counter(tokenize(chunk_text))
            chunks.append(DocChunk(doc_id=doc_id, chunk_index=index,
                                   text=chunk_text,
                                   term_counts=tuple(sorted(counts.items()))))
        with self._lock:
            if chunks:
                self._chunks[doc_id] = chunks
            else:
                self._chunks.pop(doc_id, None)
        return len(chunks)

    def load_directory(self, directory: str | Path) -> int:
        """Ingest every .txt/.md file in a corpus directory; stem = doc_id."""
        total = 0
        d = Path(directory)
        if not d.is_dir():
            return 0
        for path in sorted(d.iterdir()):
            if path.suffix in (".txt", ".md") and path.is_file():
                total += self.ingest(path.stem, path.read_text(encoding="utf-8"))
        return total

    def all_chunks(self) -> list[DocChunk]:
        with self._lock:
            out = []
            for doc_id in sorted(self._chunks):
                out.extend(self._chunks[doc_id])
            return out

    def __len__(self) -> int:
        return len(self.all_chunks())

    def query(self, text: str, k: int) -> list[tuple[DocChunk, float]]:
        """Top-k chunks by BM25; empty token list gives an empty result."""
        if k < 1:
            raise ValueError("k must be >= 1")
        terms = tokenize(text)
        if not terms:
            return []
        chunks = self.all_chunks()
        if not chunks:
            return []
        n_docs = len(chunks)
        avgdl = sum(c.length for c in chunks) / n_docs
        df = Counter()
        for c in chunks:
            seen = {t for t, _ in c.term_counts}
            for t in set(terms) & seen:
                df[t] += 1
        idf = {t: math.log((n_docs - df[t] + 0.5) / (df[t] + 0.5) + 1.0)
               for t in set(terms)}
        scored = []
        for c in chunks:
            counts = dict(c.term_counts)
            s = 0.0
            for t in terms:
                tf = counts.get(t, 0)
                if tf == 0:
                    continue
                denom = tf + BM25_K1 * (1 - BM25_B + BM25_B * c.length / avgdl)
                s += idf[t] * tf * (BM25_K1 + 1) / denom
            scored.append((c, s))
        scored.sort(key=lambda pair: (-pair[1], pair[0].doc_id, pair[0].chunk_index))
        return scored[:k]
