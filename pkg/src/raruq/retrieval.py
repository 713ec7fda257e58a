"""In-process BM25 retrieval with optional HTTP reranking."""

from __future__ import annotations

import heapq
import json
import logging
import math
import pickle
import re
import threading
from collections import defaultdict
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Optional, Protocol, Sequence

import httpx

from .core import Document

log = logging.getLogger(__name__)

K1 = 1.2
B = 0.75

_TOKEN = re.compile(r"[^\W_]+")


class IngestionError(ValueError):
    pass


def tokenize(text: str) -> list[str]:
    return _TOKEN.findall(text.lower())


@dataclass(frozen=True)
class CorpusIndex:
    doc_count: int
    avg_doc_len: float
    postings: dict[str, tuple[tuple[str, int], ...]]
    doc_lengths: dict[str, int]
    doc_store: dict[str, Document]
    term_freqs: dict[str, dict[str, int]]

    def df(self, term: str) -> int:
        return len(self.postings.get(term, ()))

    def idf(self, term: str) -> float:
        df = self.df(term)
        return math.log(1.0 + (self.doc_count - df + 0.5) / (df + 0.5))

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            pickle.dump(self, fh, protocol=pickle.HIGHEST_PROTOCOL)

    @staticmethod
    def load(path) -> "CorpusIndex":
        with open(path, "rb") as fh:
            obj = pickle.load(fh)
        if not isinstance(obj, CorpusIndex):
            raise IngestionError(f"{path} is not an index snapshot")
        return obj


def build_index(corpus: Iterable[Document]) -> CorpusIndex:
    """Build an inverted index. Title and text are indexed together."""
    store: dict[str, Document] = {}
    lengths: dict[str, int] = {}
    postings: dict[str, list[tuple[str, int]]] = defaultdict(list)
    term_freqs: dict[str, dict[str, int]] = {}
    for doc in corpus:
        if doc.doc_id in store:
            raise IngestionError(f"duplicate doc_id {doc.doc_id!r}")
        store[doc.doc_id] = doc
        tokens = tokenize(f"{doc.title} {doc.text}")
        lengths[doc.doc_id] = len(tokens)
        tf: dict[str, int] = {}
        for tok in tokens:
            tf[tok] = tf.get(tok, 0) + 1
        term_freqs[doc.doc_id] = tf
        for term, count in tf.items():
            postings[term].append((doc.doc_id, count))
    if not store:
        raise IngestionError("corpus is empty")
    avg = sum(lengths.values()) / len(lengths)
    return CorpusIndex(
        doc_count=len(store),
        avg_doc_len=avg,
        postings={t: tuple(p) for t, p in postings.items()},
        doc_lengths=lengths,
        doc_store=store,
        term_freqs=term_freqs,
    )


def load_corpus_jsonl(path) -> list[Document]:
    docs = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                d = json.loads(line)
                docs.append(Document(doc_id=str(d["id"]), title=d.get("title", ""), text=d["text"]))
    return docs


def _term_weight(index: CorpusIndex, idf: float, tf: int, doc_len: int) -> float:
    norm = 1.0 - B + B * doc_len / index.avg_doc_len if index.avg_doc_len > 0 else 1.0
    return idf * (tf * (K1 + 1.0)) / (tf + K1 * norm)


def bm25_score(index: CorpusIndex, query_terms: Sequence[str], doc_id: str) -> float:
    if doc_id not in index.doc_store:
        raise KeyError(f"unknown doc_id {doc_id!r}")
    doc_len = index.doc_lengths[doc_id]
    tfs = index.term_freqs[doc_id]
    score = 0.0
    for term in query_terms:
        tf = tfs.get(term, 0)
        if tf:
            score += _term_weight(index, index.idf(term), tf, doc_len)
    return score


def retrieve(index: CorpusIndex, query: str, k: int = 3) -> list[Document]:
    """Top-k documents by BM25, ties broken by ascending doc_id."""
    if k < 1:
        raise ValueError("k must be >= 1")
    scores: dict[str, float] = {}
    # accumulate in query-term order so floats match bm25_score bit for bit
    for term in tokenize(query):
        plist = index.postings.get(term)
        if not plist:
            continue
        idf = index.idf(term)
        for doc_id, tf in plist:
            scores[doc_id] = scores.get(doc_id, 0.0) + _term_weight(index, idf, tf, index.doc_lengths[doc_id])
    best = heapq.nsmallest(k, ((-s, d) for d, s in scores.items() if s > 0))
    return [replace(index.doc_store[d], score=-neg) for neg, d in best]


class ScoreClient(Protocol):
    def score(self, query: str, passages: list[str]) -> list[float]: ...


class HTTPScoreClient:
    """Client for a relevance scoring service (cross-encoder behind HTTP)."""

    def __init__(self, url: str, timeout: float = 30.0, client: Optional[httpx.Client] = None):
        self.url = url
        self._client = client or httpx.Client(timeout=timeout)

    def score(self, query: str, passages: list[str]) -> list[float]:
        resp = self._client.post(self.url, json={"query": query, "passages": passages})
        resp.raise_for_status()
        scores = resp.json()["scores"]
        if len(scores) != len(passages):
            raise ValueError(f"score service returned {len(scores)} scores for {len(passages)} passages")
        return [float(s) for s in scores]


def rerank(client: ScoreClient, query: str, docs: list[Document]) -> list[Document]:
    """Reorder by client relevance; on any client failure return ``docs`` unchanged."""
    if not docs:
        raise ValueError("rerank needs at least one document")
    try:
        scores = client.score(query, [f"{d.title}\n{d.text}" if d.title else d.text for d in docs])
        if len(scores) != len(docs):
            raise ValueError("score count mismatch")
    except Exception as exc:  # noqa: BLE001 - degrade, never abort the run
        log.warning("rerank failed, keeping retrieval order: %s", exc)
        return list(docs)
    order = sorted(range(len(docs)), key=lambda i: (-scores[i], i))
    return [replace(docs[i], score=float(scores[i])) for i in order]


class Retriever(Protocol):
    def search(self, query: str, k: int) -> list[Document]: ...


class BM25Retriever:
    def __init__(self, index: CorpusIndex, reranker: Optional[ScoreClient] = None, pool_size: int = 20):
        self.index = index
        self.reranker = reranker
        self.pool_size = pool_size

    def search(self, query: str, k: int) -> list[Document]:
        if self.reranker is None:
            return retrieve(self.index, query, k)
        pool = retrieve(self.index, query, max(k, self.pool_size))
        if not pool:
            return []
        return rerank(self.reranker, query, pool)[:k]


class StaticRetriever:
    """Test double: returns canned documents per exact query string."""

    def __init__(self, table: dict[str, list[Document]], default: Sequence[Document] = ()):
        self.table = table
        self.default = list(default)

    def search(self, query: str, k: int) -> list[Document]:
        return list(self.table.get(query, self.default))[:k]


class CountingRetriever:
    """Wraps a retriever and records every query it is asked."""

    def __init__(self, inner: Retriever):
        self.inner = inner
        self.queries: list[str] = []
        self._lock = threading.Lock()

    @property
    def calls(self) -> int:
        return len(self.queries)

    def search(self, query: str, k: int) -> list[Document]:
        with self._lock:
            self.queries.append(query)
        return self.inner.search(query, k)


def load_index(path) -> CorpusIndex:
    """Load a pickled snapshot or build from a corpus JSONL file."""
    path = Path(path)
    if path.suffix in (".pkl", ".pickle", ".idx"):
        return CorpusIndex.load(path)
    return build_index(load_corpus_jsonl(path))
