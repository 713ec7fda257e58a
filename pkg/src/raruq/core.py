"""Domain types shared across the engine, plus pure path operations.

All types are frozen dataclasses with tuple-valued collections so they can be
shared between worker threads. Every type round-trips through plain dicts
(``to_dict`` / ``from_dict``) for the JSONL run logs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Any, Optional, Union


class PathError(ValueError):
    """Raised when a path operation receives an out-of-range argument."""


@dataclass(frozen=True)
class QAItem:
    id: str
    question: str
    gold_answers: tuple[str, ...]

    def __post_init__(self):
        if not self.gold_answers:
            raise ValueError(f"QAItem {self.id!r} has no gold answers")

    def to_dict(self) -> dict:
        return {"id": self.id, "question": self.question, "golds": list(self.gold_answers)}

    @classmethod
    def from_dict(cls, d: dict) -> "QAItem":
        golds = d.get("golds", d.get("gold_answers"))
        if isinstance(golds, str):
            golds = [golds]
        return cls(id=str(d["id"]), question=d["question"], gold_answers=tuple(golds or ()))


@dataclass(frozen=True)
class Document:
    doc_id: str
    title: str
    text: str
    score: Optional[float] = None

    def to_dict(self) -> dict:
        d = {"doc_id": self.doc_id, "title": self.title, "text": self.text}
        if self.score is not None:
            d["score"] = self.score
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Document":
        return cls(
            doc_id=str(d.get("doc_id", d.get("id"))),
            title=d.get("title", ""),
            text=d["text"],
            score=d.get("score"),
        )


@dataclass(frozen=True)
class SearchQuery:
    query: str
    docs: tuple[Document, ...] = ()


@dataclass(frozen=True)
class Answer:
    text: str


Payload = Union[SearchQuery, Answer]


@dataclass(frozen=True)
class ReasoningState:
    """One step of a reasoning path: a think segment plus a query or an answer."""

    index: int
    think: str
    payload: Payload

    @property
    def is_answer(self) -> bool:
        return isinstance(self.payload, Answer)

    @property
    def query(self) -> Optional[str]:
        return self.payload.query if isinstance(self.payload, SearchQuery) else None

    @property
    def docs(self) -> tuple[Document, ...]:
        return self.payload.docs if isinstance(self.payload, SearchQuery) else ()

    def reindexed(self, index: int) -> "ReasoningState":
        return replace(self, index=index)

    def to_dict(self) -> dict:
        d: dict[str, Any] = {"index": self.index, "think": self.think}
        if isinstance(self.payload, Answer):
            d["answer"] = self.payload.text
        else:
            d["query"] = self.payload.query
            d["docs"] = [doc.to_dict() for doc in self.payload.docs]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ReasoningState":
        if "answer" in d:
            payload: Payload = Answer(d["answer"])
        else:
            payload = SearchQuery(d["query"], tuple(Document.from_dict(x) for x in d.get("docs", [])))
        return cls(index=int(d["index"]), think=d.get("think", ""), payload=payload)


ACTIONS = ("QP", "CR", "AV")


@dataclass(frozen=True)
class PerturbationDescriptor:
    action: str
    state_index: int
    sample_index: int
    forced: bool = False

    def __post_init__(self):
        if self.action not in ACTIONS:
            raise ValueError(f"unknown perturbation action {self.action!r}")

    def to_dict(self) -> dict:
        return {
            "type": "perturbation",
            "action": self.action,
            "state_index": self.state_index,
            "sample_index": self.sample_index,
            "forced": self.forced,
        }


@dataclass(frozen=True)
class TruncationDescriptor:
    """Provenance of a baseline sample regenerated from a truncated prefix."""

    state_index: int
    sample_index: int

    def to_dict(self) -> dict:
        return {"type": "truncation", "state_index": self.state_index, "sample_index": self.sample_index}


MOST_LIKELY = "most-likely"
Provenance = Union[str, PerturbationDescriptor, TruncationDescriptor]


def provenance_to_json(p: Provenance):
    return p if isinstance(p, str) else p.to_dict()


def provenance_from_json(p) -> Provenance:
    if isinstance(p, str):
        return p
    kind = p["type"]
    if kind == "perturbation":
        return PerturbationDescriptor(p["action"], int(p["state_index"]), int(p["sample_index"]), bool(p.get("forced", False)))
    if kind == "truncation":
        return TruncationDescriptor(int(p["state_index"]), int(p["sample_index"]))
    raise ValueError(f"unknown provenance type {kind!r}")


@dataclass(frozen=True)
class ReasoningPath:
    query_id: str
    states: tuple[ReasoningState, ...] = ()
    terminal: bool = False
    provenance: Provenance = MOST_LIKELY
    decode_temperature: float = 0.0
    seed: int = 0
    token_count: int = 0
    flags: tuple[str, ...] = ()

    def __post_init__(self):
        for i, s in enumerate(self.states, start=1):
            if s.index != i:
                raise ValueError(f"state indices must be contiguous from 1; got {s.index} at position {i}")
            if s.is_answer and i != len(self.states):
                raise ValueError("an answer state may only be the last state of a path")
        if self.terminal and not (self.states and self.states[-1].is_answer):
            raise ValueError("a terminal path must end in an answer state")

    @property
    def n(self) -> int:
        return len(self.states)

    @property
    def ends_in_answer(self) -> bool:
        return bool(self.states) and self.states[-1].is_answer

    @property
    def response(self) -> Optional[str]:
        return self.states[-1].payload.text if self.terminal else None

    @property
    def token_count_estimated(self) -> bool:
        return "token_estimate" in self.flags

    def with_flags(self, *flags: str) -> "ReasoningPath":
        merged = tuple(dict.fromkeys(self.flags + tuple(f for f in flags if f)))
        return replace(self, flags=merged)

    def search_queries(self) -> list[str]:
        return [s.query for s in self.states if s.query is not None]

    def doc_ids(self) -> list[str]:
        return [d.doc_id for s in self.states for d in s.docs]

    def to_dict(self) -> dict:
        return {
            "query_id": self.query_id,
            "states": [s.to_dict() for s in self.states],
            "terminal": self.terminal,
            "response": self.response,
            "provenance": provenance_to_json(self.provenance),
            "decode_temperature": self.decode_temperature,
            "seed": self.seed,
            "token_count": self.token_count,
            "flags": list(self.flags),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ReasoningPath":
        return cls(
            query_id=str(d["query_id"]),
            states=tuple(ReasoningState.from_dict(s) for s in d.get("states", [])),
            terminal=bool(d.get("terminal", False)),
            provenance=provenance_from_json(d.get("provenance", MOST_LIKELY)),
            decode_temperature=float(d.get("decode_temperature", 0.0)),
            seed=int(d.get("seed", 0)),
            token_count=int(d.get("token_count", 0)),
            flags=tuple(d.get("flags", ())),
        )


@dataclass(frozen=True)
class UncertaintyResult:
    query_id: str
    method: str
    most_likely: ReasoningPath
    samples: tuple[ReasoningPath, ...]
    consistency: float
    uncertainty: float
    match_flags: tuple[bool, ...]
    flags: tuple[str, ...] = field(default=())

    @property
    def response(self) -> Optional[str]:
        return self.most_likely.response

    def to_dict(self) -> dict:
        return {
            "query_id": self.query_id,
            "method": self.method,
            "most_likely": self.most_likely.to_dict(),
            "samples": [s.to_dict() for s in self.samples],
            "consistency": self.consistency,
            "uncertainty": self.uncertainty,
            "match_flags": list(self.match_flags),
            "flags": list(self.flags),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "UncertaintyResult":
        return cls(
            query_id=str(d["query_id"]),
            method=d["method"],
            most_likely=ReasoningPath.from_dict(d["most_likely"]),
            samples=tuple(ReasoningPath.from_dict(s) for s in d.get("samples", [])),
            consistency=float(d["consistency"]),
            uncertainty=float(d["uncertainty"]),
            match_flags=tuple(bool(x) for x in d.get("match_flags", [])),
            flags=tuple(d.get("flags", ())),
        )


def dumps(obj) -> str:
    """Canonical one-line JSON for run logs (sorted keys, no whitespace)."""
    if hasattr(obj, "to_dict"):
        obj = obj.to_dict()
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def truncate_path(path: ReasoningPath, t: int) -> ReasoningPath:
    """Keep states ``1..t`` of ``path``; the result is never terminal."""
    if t < 0 or t > path.n:
        raise PathError(f"truncation point {t} outside 0..{path.n}")
    return replace(path, states=path.states[:t], terminal=False)


def last_retrieval_index(path: ReasoningPath) -> int:
    for s in reversed(path.states):
        if s.docs:
            return s.index
    return 0
