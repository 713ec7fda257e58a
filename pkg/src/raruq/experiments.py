"""In-process synthetic experiments shared by the scripts and the acceptance suite."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .engine import EngineConfig, RAREngine
from .estimators import EstimatorConfig, UQEstimator
from .metrics import HashEmbedder, auarc, auroc, exact_match, query_diversity, unique_docs
from .retrieval import BM25Retriever, build_index
from .synthworld import WorldSpec, build_world


@dataclass(frozen=True)
class MethodScore:
    method: str
    B: int
    seed: int
    em: float
    auroc: float
    auarc: float
    mean_unique_docs: float
    mean_query_diversity: float
    mean_tokens: float


def evaluate_world(
    spec: WorldSpec,
    methods: Sequence[str] = ("R2C", "SelfC"),
    B: int | Sequence[int] = 10,
    master_seed: int = 0,
    max_in_flight: int = 1,
) -> list[MethodScore]:
    """Build the world for ``spec`` and score each method (and each B) on it."""
    world = build_world(spec)
    engine = RAREngine(world.agent(), BM25Retriever(build_index(world.corpus)), EngineConfig())
    est = UQEstimator(engine, master_seed=master_seed, max_in_flight=max_in_flight)
    embedder = HashEmbedder()
    Bs = [B] if isinstance(B, int) else list(B)
    out = []
    for method in methods:
        for b in Bs:
            cfg = EstimatorConfig(method=method, B=b)
            U, y, ud, div, tok = [], [], [], [], []
            for item in world.dataset:
                r = est.estimate(item, cfg)
                U.append(r.uncertainty)
                y.append(exact_match(r.most_likely.response, item.gold_answers))
                ud.append(unique_docs(r.samples))
                qs = [q for s in r.samples for q in s.search_queries()]
                if len(qs) >= 2:
                    div.append(query_diversity(embedder.embed(qs)))
                tok.extend(s.token_count for s in r.samples)
            out.append(
                MethodScore(
                    method, b, master_seed, float(np.mean(y)), auroc(U, y), auarc(U, y),
                    float(np.mean(ud)), float(np.mean(div)) if div else float("nan"),
                    float(np.mean(tok)) if tok else 0.0,
                )
            )
    est.close()
    return out


def seed_sweep(
    spec: WorldSpec, seeds: Sequence[int], methods=("R2C", "SelfC"), B=10
) -> list[MethodScore]:
    """World seed and master seed move together, one world per seed."""
    rows = []
    for s in seeds:
        rows += evaluate_world(replace(spec, seed=s), methods, B, master_seed=s)
    return rows
