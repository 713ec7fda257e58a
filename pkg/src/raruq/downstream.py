"""Abstention and selection-based model ensembling on top of uncertainty scores."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .metrics import UndefinedMetricError, normalize_answer

# 0.40, 0.45, ..., 0.95
THRESHOLD_GRID: tuple[float, ...] = tuple(round(0.40 + 0.05 * i, 2) for i in range(12))
ABSTAIN_METRICS = ("reliable_accuracy", "effective_reliability", "abstain_accuracy", "abstain_f1")


@dataclass(frozen=True)
class AbstainConfusion:
    answered_correct: int = 0  # A
    abstained_correct: int = 0  # B
    answered_incorrect: int = 0  # C
    abstained_incorrect: int = 0  # D

    def __post_init__(self):
        if min(self.cells) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def cells(self) -> tuple[int, int, int, int]:
        return (self.answered_correct, self.abstained_correct, self.answered_incorrect, self.abstained_incorrect)

    @property
    def total(self) -> int:
        return sum(self.cells)


@dataclass(frozen=True)
class AbstainReport:
    reliable_accuracy: float
    effective_reliability: float
    abstain_accuracy: float
    abstain_f1: float
    precision: float
    recall: float
    flags: tuple[str, ...] = ()

    def as_dict(self) -> dict:
        return {
            "reliable_accuracy": self.reliable_accuracy,
            "effective_reliability": self.effective_reliability,
            "abstain_accuracy": self.abstain_accuracy,
            "abstain_f1": self.abstain_f1,
            "precision": self.precision,
            "recall": self.recall,
            "flags": ";".join(self.flags),
        }


def abstain_decision(u: float, tau: float) -> bool:
    """Abstain iff the uncertainty strictly exceeds the threshold."""
    return u > tau


def confusion_from(uncertainties: Sequence[float], correct: Sequence[int], tau: float) -> AbstainConfusion:
    if len(uncertainties) != len(correct):
        raise ValueError("uncertainties and correctness labels differ in length")
    cells = [0, 0, 0, 0]
    for u, c in zip(uncertainties, correct):
        abstain = abstain_decision(u, tau)
        cells[(0 if c else 2) + (1 if abstain else 0)] += 1
    return AbstainConfusion(*cells)


def abstain_metrics(cm: AbstainConfusion) -> AbstainReport:
    a, b, c, d = cm.cells
    total = cm.total
    if total == 0:
        raise UndefinedMetricError("empty confusion matrix")
    flags = []
    if a + c > 0:
        reliable = a / (a + c)
    else:
        reliable = 0.0
        flags.append("reliable_accuracy_undefined")
    precision = d / (b + d) if b + d > 0 else 0.0
    recall = d / (c + d) if c + d > 0 else 0.0
    if b + d == 0 or c + d == 0 or precision + recall == 0:
        f1 = 0.0
        flags.append("abstain_f1_undefined")
    else:
        f1 = 2 * precision * recall / (precision + recall)
    return AbstainReport(
        reliable_accuracy=reliable,
        effective_reliability=(a - c) / total,
        abstain_accuracy=(a + d) / total,
        abstain_f1=f1,
        precision=precision,
        recall=recall,
        flags=tuple(flags),
    )


def calibrate_threshold(
    val: Sequence[tuple[float, int]],
    metric: str = "abstain_accuracy",
    grid: Sequence[float] = THRESHOLD_GRID,
) -> float:
    """Grid threshold maximizing ``metric`` on a validation split; ties go to the larger threshold."""
    if not val:
        raise ValueError("empty validation set")
    if metric not in ("abstain_accuracy", "abstain_f1"):
        raise ValueError(f"cannot calibrate on {metric!r}")
    us = [u for u, _ in val]
    cs = [c for _, c in val]
    best_tau, best = None, -np.inf
    for tau in grid:
        value = getattr(abstain_metrics(confusion_from(us, cs, tau)), metric)
        if value >= best:
            best_tau, best = tau, value
    return best_tau


# -- model selection --


@dataclass(frozen=True)
class Candidate:
    system: str
    response: Optional[str]
    uncertainty: float


@dataclass(frozen=True)
class CandidatePool:
    query_id: str
    candidates: tuple[Candidate, ...]

    def __post_init__(self):
        if not self.candidates:
            raise ValueError("candidate pool is empty")
        names = [c.system for c in self.candidates]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate system names in pool for {self.query_id}")
        for c in self.candidates:
            if not 0.0 <= c.uncertainty <= 1.0:
                raise ValueError(f"uncertainty {c.uncertainty} outside [0, 1]")


@dataclass
class Cluster:
    members: list[Candidate] = field(default_factory=list)

    @property
    def representative(self) -> Candidate:
        return self.members[0]


def _default_equiv(a: Optional[str], b: Optional[str]) -> bool:
    return a is not None and b is not None and normalize_answer(a) == normalize_answer(b)


def cluster_responses(
    pool: CandidatePool, equiv: Callable[[Optional[str], Optional[str]], bool] = _default_equiv
) -> list[Cluster]:
    """Greedy grouping: each candidate joins the first cluster whose first member it matches."""
    clusters: list[Cluster] = []
    for cand in pool.candidates:
        for cl in clusters:
            if equiv(cand.response, cl.representative.response):
                cl.members.append(cand)
                break
        else:
            clusters.append(Cluster([cand]))
    return clusters


def no_clustering(pool: CandidatePool) -> list[Cluster]:
    return [Cluster([c]) for c in pool.candidates]


def cluster_score(cluster: Cluster, aggregation: str = "sum") -> float:
    us = [c.uncertainty for c in cluster.members]
    if aggregation == "sum":
        return float(sum(us))
    if aggregation == "mean":
        return float(sum(us) / len(us))
    raise ValueError(f"unknown aggregation {aggregation!r}")


def score_and_select(clusters: Sequence[Cluster], aggregation: str = "sum") -> tuple[Candidate, Cluster, float]:
    """Representative of the cluster with the lowest aggregated uncertainty.

    Returns ``(chosen candidate, its cluster, cluster score)``; ties go to the
    earlier-created cluster.
    """
    if not clusters:
        raise ValueError("no clusters to select from")
    scores = [cluster_score(c, aggregation) for c in clusters]
    j = int(np.argmin(scores))  # first minimum
    return clusters[j].representative, clusters[j], scores[j]


def select_response(
    pool: CandidatePool,
    aggregation: str = "sum",
    clustering: bool = True,
    equiv: Callable[[Optional[str], Optional[str]], bool] = _default_equiv,
) -> tuple[Candidate, int, float]:
    """Convenience wrapper returning ``(chosen, K, cluster score)``."""
    clusters = cluster_responses(pool, equiv) if clustering else no_clustering(pool)
    chosen, _, score = score_and_select(clusters, aggregation)
    return chosen, len(clusters), score
