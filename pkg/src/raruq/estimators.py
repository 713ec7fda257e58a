"""Uncertainty estimators: perturbation-based consistency and its baselines.

All vote-based estimators share one scoring rule: consistency is the share
of sampled responses equivalent to the most-likely response, uncertainty is
one minus that. A sample without a response (failed or budget-exhausted
generation) never matches.
"""

from __future__ import annotations

import logging
import math
import random
import re
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Callable, NamedTuple, Optional, Sequence

from .core import (
    QAItem,
    ReasoningPath,
    TruncationDescriptor,
    UncertaintyResult,
    last_retrieval_index,
    truncate_path,
)
from .engine import RAREngine
from .gateway import AgentBackend, BackendError, PromptTemplate, derive_seed, hash64, render
from .metrics import normalize_answer
from .perturbations import PerturbationActions, complete_perturbed, sample_perturbation
from .prompts import EQUIVALENCE, P_TRUE

log = logging.getLogger(__name__)

METHODS = ("R2C", "SelfC", "ReaC", "RrrC", "PTrue")
EQUIVALENCE_MODES = ("normalized-exact", "judge")


@dataclass(frozen=True)
class EstimatorConfig:
    method: str = "R2C"
    B: int = 10
    sample_temperature: float = 1.0
    equivalence: str = "normalized-exact"
    ptrue_use_samples: bool = True

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.B < 1:
            raise ValueError("B must be >= 1")
        if self.equivalence not in EQUIVALENCE_MODES:
            raise ValueError(f"unknown equivalence mode {self.equivalence!r}")


_YES_NO = re.compile(r"\b(yes|no)\b", re.I)


class AnswerJudge:
    """Response equivalence, either normalized-exact or via an LLM judge.

    The judge sees the pair in a canonical order so the relation is symmetric,
    and verdicts are cached per (question, pair).
    """

    def __init__(
        self,
        mode: str = "normalized-exact",
        backend: Optional[AgentBackend] = None,
        template: PromptTemplate = EQUIVALENCE,
        seed: int = 0,
    ):
        if mode not in EQUIVALENCE_MODES:
            raise ValueError(f"unknown equivalence mode {mode!r}")
        if mode == "judge" and backend is None:
            raise ValueError("judge mode needs a backend")
        self.mode = mode
        self.backend = backend
        self.template = template
        self.seed = seed
        self.fallbacks = 0
        self._cache: dict[tuple[str, str, str], bool] = {}
        self._lock = threading.Lock()

    def __call__(self, item: QAItem, r1: Optional[str], r2: Optional[str]) -> bool:
        if r1 is None or r2 is None:
            return False
        a, b = normalize_answer(r1), normalize_answer(r2)
        if a == b:
            return True
        if self.mode == "normalized-exact":
            return False
        (na, ra), (nb, rb) = sorted([(a, r1), (b, r2)])
        key = (item.question, na, nb)
        with self._lock:
            if key in self._cache:
                return self._cache[key]
        from .gateway import GenerationRequest, generate

        prompt = render(self.template, {"question": item.question, "response_a": ra, "response_b": rb})
        req = GenerationRequest((("user", prompt),), temperature=0.0, max_tokens=8, seed=self.seed, task="equivalence")
        try:
            m = _YES_NO.search(generate(self.backend, req).text)
        except BackendError as exc:
            log.warning("equivalence judge failed: %s", exc)
            m = None
        if m is None:
            with self._lock:
                self.fallbacks += 1
            verdict = False  # normalized-exact already said no
        else:
            verdict = m.group(1).lower() == "yes"
        with self._lock:
            self._cache[key] = verdict
        return verdict


def answers_equivalent(
    item: QAItem, r1: Optional[str], r2: Optional[str], mode: str = "normalized-exact", backend=None
) -> bool:
    return AnswerJudge(mode, backend)(item, r1, r2)


def majority_vote(responses: Sequence[Optional[str]], r: Optional[str], equiv: Callable[[Optional[str], Optional[str]], bool]) -> float:
    """Share of ``responses`` equivalent to ``r``; ``None`` responses never match."""
    if not responses:
        raise ValueError("need at least one sampled response")
    hits = sum(1 for x in responses if r is not None and x is not None and equiv(x, r))
    return hits / len(responses)


def uncertainty_score(consistency: float) -> float:
    if not 0.0 <= consistency <= 1.0 or math.isnan(consistency):
        raise ValueError(f"consistency {consistency} outside [0, 1]")
    return 1.0 - consistency


class PTrueScore(NamedTuple):
    uncertainty: float
    source: str  # "logprob" | "verbalized" | "uninformative"


_LETTER = re.compile(r"[^A-Za-z]")


def _p_true_from_response(text: str, logprobs) -> PTrueScore:
    if logprobs:
        for token, lp in logprobs:
            letter = _LETTER.sub("", token).upper()
            if letter in ("A", "B"):
                p = min(1.0, max(0.0, math.exp(lp)))
                p_a = p if letter == "A" else 1.0 - p
                return PTrueScore(1.0 - p_a, "logprob")
    nums = [int(x) for x in re.findall(r"\b(\d{1,3})\b", text) if int(x) <= 100]
    if nums:
        return PTrueScore(1.0 - nums[-1] / 100.0, "verbalized")
    return PTrueScore(0.5, "uninformative")


def p_true(
    engine: RAREngine,
    item: QAItem,
    r: Optional[str],
    samples: Sequence[Optional[str]],
    seed: int = 0,
    template: PromptTemplate = P_TRUE,
    include_samples: bool = True,
    backend: Optional[AgentBackend] = None,
) -> PTrueScore:
    """Ask the model whether ``r`` is true; uncertainty is 1 - p(A)."""
    if r is None:
        return PTrueScore(1.0, "no_answer")
    listed = [s for s in samples if s is not None] if include_samples else []
    vars = {
        "question": item.question,
        "samples": "\n".join(f"- {s}" for s in listed) if listed else "(none)",
        "answer": r,
    }
    try:
        resp, _, _ = engine.call([("user", render(template, vars))], seed, 0.0, task="p_true", logprobs=True, backend=backend)
    except BackendError as exc:
        log.warning("P(true) call failed: %s", exc)
        return PTrueScore(0.5, "uninformative")
    return _p_true_from_response(resp.text, resp.logprobs)


class UQEstimator:
    """Runs any of the estimators for one query at a time.

    Per-sample seeds are ``derive_seed(master_seed, query_id, method, b)`` so
    results do not depend on how samples are scheduled across threads. The
    most-likely path is cached per query and shared between methods.
    """

    def __init__(
        self,
        engine: RAREngine,
        actions: Optional[PerturbationActions] = None,
        judge_backend: Optional[AgentBackend] = None,
        master_seed: int = 0,
        max_in_flight: int = 1,
        ptrue_template: PromptTemplate = P_TRUE,
        equivalence_template: PromptTemplate = EQUIVALENCE,
    ):
        self.engine = engine
        self.actions = actions or PerturbationActions(engine)
        self.judge_backend = judge_backend
        self.master_seed = master_seed
        self.ptrue_template = ptrue_template
        self.equivalence_template = equivalence_template
        self._pool = ThreadPoolExecutor(max_in_flight) if max_in_flight > 1 else None
        self._ml: dict[str, ReasoningPath] = {}
        self._ml_lock = threading.Lock()
        self._judges: dict[str, AnswerJudge] = {}

    def close(self):
        if self._pool is not None:
            self._pool.shutdown(wait=True)

    def judge(self, mode: str) -> AnswerJudge:
        if mode == "judge" and self.judge_backend is None:
            mode = "normalized-exact"
        if mode not in self._judges:
            backend = self.judge_backend if mode == "judge" else None
            self._judges[mode] = AnswerJudge(mode, backend, self.equivalence_template)
        return self._judges[mode]

    def most_likely(self, item: QAItem) -> ReasoningPath:
        with self._ml_lock:
            cached = self._ml.get(item.id)
        if cached is not None:
            return cached
        path = self.engine.run_most_likely(item)
        with self._ml_lock:
            return self._ml.setdefault(item.id, path)

    def forget(self, query_id: str) -> None:
        """Drop the cached most-likely path once every method has run for a query."""
        with self._ml_lock:
            self._ml.pop(query_id, None)

    def _map(self, fn, n: int) -> list:
        if self._pool is None:
            return [fn(b) for b in range(1, n + 1)]
        return list(self._pool.map(fn, range(1, n + 1)))

    def _engine_for(self, cfg: EstimatorConfig) -> RAREngine:
        if cfg.sample_temperature == self.engine.cfg.sample_temperature:
            return self.engine
        return RAREngine(self.engine.backend, self.engine.retriever, replace(self.engine.cfg, sample_temperature=cfg.sample_temperature))

    def _result(self, item, cfg, ml, samples, flags=()) -> UncertaintyResult:
        judge = self.judge(cfg.equivalence)
        r = ml.response
        matches = tuple(bool(r is not None and judge(item, s.response, r)) for s in samples)
        c = majority_vote([s.response for s in samples], r, lambda x, y: judge(item, x, y))
        if not ml.terminal:
            flags = tuple(flags) + ("most_likely_nonterminal",)
        return UncertaintyResult(
            query_id=item.id,
            method=cfg.method,
            most_likely=ml,
            samples=tuple(samples),
            consistency=c,
            uncertainty=uncertainty_score(c),
            match_flags=matches,
            flags=tuple(flags),
        )

    # -- estimators --

    def r2c(self, item: QAItem, cfg: EstimatorConfig) -> UncertaintyResult:
        ml = self.most_likely(item)
        if not ml.terminal:
            # nothing to perturb; an absent response is inconsistent with every sample
            return UncertaintyResult(item.id, cfg.method, ml, (), 0.0, 1.0, (False,) * cfg.B, ("most_likely_nonterminal",))
        engine = self._engine_for(cfg)
        actions = self.actions if engine is self.engine else PerturbationActions(engine, self.actions.summary_backend, {
            "query_paraphrase": self.actions.qp_template,
            "critical_rethinking": self.actions.cr_template,
            "answer_validation": self.actions.av_template,
            "path_summary": self.actions.summary_template,
        })

        def one(b: int) -> ReasoningPath:
            seed = derive_seed(self.master_seed, item.id, cfg.method, b)
            draw = sample_perturbation(ml, random.Random(hash64(seed, "draw")))
            pp = actions.apply(item, ml, draw.action, draw.state_index, seed, sample_index=b)
            if draw.forced:
                pp = replace(pp, descriptor=replace(pp.descriptor, forced=True),
                             prefix=replace(pp.prefix, provenance=replace(pp.descriptor, forced=True)))
            return complete_perturbed(engine, item, pp, hash64(seed, "continue"))

        return self._result(item, cfg, ml, self._map(one, cfg.B))

    def _fresh_samples(self, item: QAItem, cfg: EstimatorConfig, method: str) -> list[ReasoningPath]:
        engine = self._engine_for(cfg)
        empty = ReasoningPath(query_id=item.id)

        def one(b: int) -> ReasoningPath:
            seed = derive_seed(self.master_seed, item.id, method, b)
            return engine.resume_from(item, empty, seed, provenance=TruncationDescriptor(0, b))

        return self._map(one, cfg.B)

    def self_consistency(self, item: QAItem, cfg: EstimatorConfig) -> UncertaintyResult:
        ml = self.most_likely(item)
        return self._result(item, cfg, ml, self._fresh_samples(item, cfg, cfg.method))

    def reasoning_consistency(self, item: QAItem, cfg: EstimatorConfig) -> UncertaintyResult:
        ml = self.most_likely(item)
        engine = self._engine_for(cfg)
        n_cut = ml.n if not ml.ends_in_answer else ml.n - 1

        def one(b: int) -> ReasoningPath:
            seed = derive_seed(self.master_seed, item.id, cfg.method, b)
            t = random.Random(hash64(seed, "truncate")).randint(0, max(ml.n - 1, 0))
            t = min(t, n_cut)
            prefix = replace(truncate_path(ml, t), provenance=TruncationDescriptor(t, b))
            return engine.resume_from(item, prefix, seed)

        return self._result(item, cfg, ml, self._map(one, cfg.B))

    def rrr_consistency(self, item: QAItem, cfg: EstimatorConfig) -> UncertaintyResult:
        ml = self.most_likely(item)
        engine = self._engine_for(cfg)
        t = last_retrieval_index(ml)

        def one(b: int) -> ReasoningPath:
            seed = derive_seed(self.master_seed, item.id, cfg.method, b)
            prefix = replace(truncate_path(ml, t), provenance=TruncationDescriptor(t, b))
            return engine.resume_from(item, prefix, seed)

        return self._result(item, cfg, ml, self._map(one, cfg.B))

    def p_true(self, item: QAItem, cfg: EstimatorConfig) -> UncertaintyResult:
        """P(true) over brainstormed samples drawn exactly as SelfC draws them."""
        ml = self.most_likely(item)
        samples = self._fresh_samples(item, cfg, "SelfC") if cfg.ptrue_use_samples else []
        score = p_true(
            self.engine,
            item,
            ml.response,
            [s.response for s in samples],
            seed=hash64(self.master_seed, item.id, "PTrue"),
            template=self.ptrue_template,
            include_samples=cfg.ptrue_use_samples,
        )
        flags = [f"ptrue_{score.source}"]
        if not ml.terminal:
            flags.append("most_likely_nonterminal")
        return UncertaintyResult(
            query_id=item.id,
            method=cfg.method,
            most_likely=ml,
            samples=tuple(samples),
            consistency=1.0 - score.uncertainty,
            uncertainty=score.uncertainty,
            match_flags=(),
            flags=tuple(flags),
        )

    def estimate(self, item: QAItem, cfg: EstimatorConfig) -> UncertaintyResult:
        fn = {
            "R2C": self.r2c,
            "SelfC": self.self_consistency,
            "ReaC": self.reasoning_consistency,
            "RrrC": self.rrr_consistency,
            "PTrue": self.p_true,
        }[cfg.method]
        return fn(item, cfg)
