"""Correctness, discrimination, rejection-curve, diversity and significance statistics."""

from __future__ import annotations

import hashlib
import math
import re
import string
from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from scipy import stats

from .core import ReasoningPath


class UndefinedMetricError(ValueError):
    pass


_ARTICLES = re.compile(r"\b(a|an|the)\b")
_PUNCT = set(string.punctuation)


def normalize_answer(s: str) -> str:
    """Lowercase, drop punctuation and articles, collapse whitespace."""
    s = s.lower()
    s = "".join(ch for ch in s if ch not in _PUNCT)
    s = _ARTICLES.sub(" ", s)
    return " ".join(s.split())


def exact_match(prediction: Optional[str], golds: Sequence[str]) -> int:
    if not golds:
        raise ValueError("exact_match needs at least one gold answer")
    if prediction is None:
        return 0
    p = normalize_answer(prediction)
    return int(any(p == normalize_answer(g) for g in golds))


def _split(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels, dtype=int)
    if s.shape != y.shape or s.ndim != 1:
        raise ValueError("scores and labels must be 1-d and equal length")
    incorrect = s[y == 0]
    correct = s[y == 1]
    if incorrect.size == 0 or correct.size == 0:
        raise UndefinedMetricError("AUROC needs both correct and incorrect items")
    return incorrect, correct


def auroc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """P(uncertainty of an incorrect item > that of a correct one), ties count 1/2.

    ``labels`` are correctness indicators (1 = correct). Rank-based, O(n log n).
    """
    incorrect, correct = _split(scores, labels)
    ranks = stats.rankdata(np.concatenate([incorrect, correct]))  # midranks handle ties
    m, n = incorrect.size, correct.size
    u = ranks[:m].sum() - m * (m + 1) / 2.0
    return float(u / (m * n))


@dataclass(frozen=True)
class DeLongResult:
    auroc_a: float
    auroc_b: float
    z: float
    p: float
    var_diff: float
    degenerate: bool = False


def _placements(incorrect: np.ndarray, correct: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Structural components V10 (per incorrect item) and V01 (per correct item)."""
    m, n = incorrect.size, correct.size
    all_ranks = stats.rankdata(np.concatenate([incorrect, correct]))
    r_inc = stats.rankdata(incorrect)
    r_cor = stats.rankdata(correct)
    v10 = (all_ranks[:m] - r_inc) / n
    v01 = 1.0 - (all_ranks[m:] - r_cor) / m
    return v10, v01


def delong_test(scores_a, scores_b, labels) -> DeLongResult:
    """Paired DeLong test for two AUROCs computed on the same items."""
    y = np.asarray(labels, dtype=int)
    a = np.asarray(scores_a, dtype=float)
    b = np.asarray(scores_b, dtype=float)
    if a.shape != b.shape or a.shape != y.shape:
        raise ValueError("scores_a, scores_b and labels must have equal length")
    ia, ca = _split(a, y)
    ib, cb = _split(b, y)
    m, n = ia.size, ca.size
    v10a, v01a = _placements(ia, ca)
    v10b, v01b = _placements(ib, cb)
    auc_a, auc_b = float(v10a.mean()), float(v10b.mean())
    s10 = np.cov(np.vstack([v10a, v10b])) if m > 1 else np.zeros((2, 2))
    s01 = np.cov(np.vstack([v01a, v01b])) if n > 1 else np.zeros((2, 2))
    cov = s10 / m + s01 / n
    var = float(cov[0, 0] + cov[1, 1] - 2.0 * cov[0, 1])
    diff = auc_a - auc_b
    if var <= 1e-15:
        return DeLongResult(auc_a, auc_b, 0.0, 1.0, max(var, 0.0), True)
    z = diff / math.sqrt(var)
    p = float(2.0 * stats.norm.sf(abs(z)))
    return DeLongResult(auc_a, auc_b, float(z), min(p, 1.0), var)


def auarc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Area under the accuracy-rejection curve.

    Items are rejected most-uncertain first (ties: lower index first). The
    accuracy with everything rejected is taken as 1.0.
    """
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels, dtype=float)
    n = s.size
    if n < 1:
        raise UndefinedMetricError("AUARC needs at least one item")
    order = sorted(range(n), key=lambda i: (-s[i], i))
    ys = y[order]
    tail = np.cumsum(ys[::-1])[::-1]  # correct count among items j..n-1
    acc = np.empty(n + 1)
    acc[:n] = tail / np.arange(n, 0, -1)
    acc[n] = 1.0
    x = np.arange(n + 1) / n
    return float(np.sum((acc[1:] + acc[:-1]) * np.diff(x) / 2.0))


def accuracy_rejection_curve(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels, dtype=float)
    n = s.size
    order = sorted(range(n), key=lambda i: (-s[i], i))
    ys = y[order]
    tail = np.cumsum(ys[::-1])[::-1]
    acc = np.append(tail / np.arange(n, 0, -1), 1.0)
    return np.arange(n + 1) / n, acc


def query_diversity(embeddings) -> float:
    """One minus the mean pairwise cosine similarity of unit vectors."""
    e = np.asarray(embeddings, dtype=float)
    if e.ndim != 2 or e.shape[0] < 2:
        raise UndefinedMetricError("query diversity needs at least two vectors")
    norms = np.linalg.norm(e, axis=1)
    if np.any(np.abs(norms - 1.0) > 1e-6):
        raise ValueError("query_diversity expects unit-norm embeddings")
    n = e.shape[0]
    g = e @ e.T
    pair_sum = (g.sum() - np.trace(g)) / 2.0
    return float(1.0 - 2.0 * pair_sum / (n * (n - 1)))


def unique_docs(samples: Iterable[ReasoningPath]) -> int:
    return len({doc_id for p in samples for doc_id in p.doc_ids()})


class HashEmbedder:
    """Deterministic hashed bag-of-words embedder, L2-normalized."""

    def __init__(self, dim: int = 256):
        self.dim = dim

    def _bucket(self, token: str) -> tuple[int, float]:
        h = int.from_bytes(hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest(), "big")
        return h % self.dim, 1.0 if (h >> 32) & 1 else -1.0

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        out = np.zeros((len(texts), self.dim))
        for i, t in enumerate(texts):
            for tok in re.findall(r"[^\W_]+", t.lower()):
                j, sign = self._bucket(tok)
                out[i, j] += sign
            norm = np.linalg.norm(out[i])
            if norm > 0:
                out[i] /= norm
            else:
                out[i, 0] = 1.0
        return out


class HTTPEmbedder:
    """Embeddings endpoint returning ``{"data": [{"embedding": [...]}, ...]}``."""

    def __init__(self, url: str, model: str = "", timeout: float = 60.0, client=None):
        import httpx

        self.url = url
        self.model = model
        self._client = client or httpx.Client(timeout=timeout)

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        resp = self._client.post(self.url, json={"model": self.model, "input": list(texts)})
        resp.raise_for_status()
        e = np.asarray([row["embedding"] for row in resp.json()["data"]], dtype=float)
        return e / np.linalg.norm(e, axis=1, keepdims=True)


# -- paired significance tests --


def mcnemar_p(a: Sequence[int], b: Sequence[int]) -> float:
    a = np.asarray(a, dtype=int)
    b = np.asarray(b, dtype=int)
    n01 = int(np.sum((a == 1) & (b == 0)))
    n10 = int(np.sum((a == 0) & (b == 1)))
    n = n01 + n10
    if n == 0:
        return 1.0
    if n < 25:
        return float(min(1.0, 2.0 * stats.binom.cdf(min(n01, n10), n, 0.5)))
    chi2 = (abs(n01 - n10) - 1.0) ** 2 / n
    return float(stats.chi2.sf(chi2, 1))


def wilcoxon_p(a: Sequence[float], b: Sequence[float]) -> float:
    """Signed-rank test, normal approximation, zero differences dropped."""
    d = np.asarray(a, dtype=float) - np.asarray(b, dtype=float)
    d = d[d != 0]
    n = d.size
    if n == 0:
        return 1.0
    ranks = stats.rankdata(np.abs(d))
    w_plus = ranks[d > 0].sum()
    mean = n * (n + 1) / 4.0
    _, counts = np.unique(np.abs(d), return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - np.sum(counts**3 - counts) / 48.0
    if var <= 0:
        return 1.0
    z = (w_plus - mean) / math.sqrt(var)
    return float(min(1.0, 2.0 * stats.norm.sf(abs(z))))


def bootstrap_p(
    a,
    b,
    labels=None,
    metric: Optional[Callable] = None,
    n_resamples: int = 10_000,
    seed: int = 0,
) -> float:
    """Paired percentile bootstrap on ``metric(a) - metric(b)``.

    ``metric`` takes ``(values, labels)`` (labels may be None); default is the mean.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    y = None if labels is None else np.asarray(labels)
    if metric is None:
        metric = lambda v, _l: float(np.mean(v))  # noqa: E731
    rng = np.random.default_rng(seed)
    n = a.size
    diffs = np.empty(n_resamples)
    for i in range(n_resamples):
        idx = rng.integers(0, n, n)
        yy = None if y is None else y[idx]
        diffs[i] = metric(a[idx], yy) - metric(b[idx], yy)
    lo = np.mean(diffs <= 0)
    hi = np.mean(diffs >= 0)
    return float(min(1.0, 2.0 * min(lo, hi)))


def paired_significance(kind: str, a, b, labels=None, **kw) -> float:
    if kind == "mcnemar":
        return mcnemar_p(a, b)
    if kind == "wilcoxon":
        return wilcoxon_p(a, b)
    if kind == "bootstrap":
        return bootstrap_p(a, b, labels, **kw)
    raise ValueError(f"unknown significance test {kind!r}")
