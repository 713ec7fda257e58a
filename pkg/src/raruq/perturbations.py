"""Perturbation actions applied to a most-likely reasoning path.

Each action maps the path and a chosen state to a non-terminal prefix from
which the engine resumes generation:

* QP replaces state t with the same think and a paraphrased query.
* CR keeps states 1..t and appends a state that challenges the evidence.
* AV summarizes the retrieved evidence, then asks the agent to validate the
  final answer; a confirmed answer is emitted as-is, a rejected one turns
  the last state into a new search.
"""

from __future__ import annotations

import logging
import random
import re
from dataclasses import dataclass, replace
from typing import Mapping, NamedTuple, Optional

from .core import (
    Answer,
    Document,
    PathError,
    PerturbationDescriptor,
    QAItem,
    ReasoningPath,
    ReasoningState,
    SearchQuery,
)
from .engine import MalformedOutput, RAREngine, format_docs, parse_agent_output, render_transcript
from .gateway import AgentBackend, BackendError, PromptTemplate, hash64, render
from .prompts import ANSWER_VALIDATION, CRITICAL_RETHINKING, NO_EVIDENCE_SUMMARY, PATH_SUMMARY, QUERY_PARAPHRASE

log = logging.getLogger(__name__)

_NONWORD = re.compile(r"[^\w\s]")


def _norm_query(q: str) -> str:
    return " ".join(_NONWORD.sub(" ", q.lower()).split())


def _extract_query(text: str) -> str:
    m = re.search(r"<search>(.*?)(?:</search>|$)", text, re.S)
    if m:
        return m.group(1).strip()
    lines = [ln.strip() for ln in text.strip().splitlines() if ln.strip()]
    if not lines:
        return ""
    return re.sub(r"^(?:new |rewritten |paraphrased )?(?:search )?query\s*:\s*", "", lines[0], flags=re.I)


@dataclass(frozen=True)
class PerturbedPrefix:
    prefix: ReasoningPath
    descriptor: PerturbationDescriptor
    summary: Optional[str] = None
    # (think, answer) when AV confirmed the answer; no further agent call needed
    final_answer: Optional[tuple[str, str]] = None
    token_count: int = 0
    flags: tuple[str, ...] = ()


class PerturbationDraw(NamedTuple):
    action: str
    state_index: int
    forced: bool = False


def sample_perturbation(path: ReasoningPath, rng: random.Random) -> PerturbationDraw:
    """Uniform action from {QP, CR, AV}; AV always targets the last state.

    QP/CR pick a state uniformly from 1..N-1. With N = 1 only AV applies.
    """
    n = path.n
    if n < 1:
        raise PathError("cannot perturb an empty path")
    if n == 1:
        return PerturbationDraw("AV", 1, True)
    action = rng.choice(("QP", "CR", "AV"))
    if action == "AV":
        return PerturbationDraw("AV", n)
    return PerturbationDraw(action, rng.randint(1, n - 1))


def path_documents(states) -> list[Document]:
    seen: dict[str, Document] = {}
    for s in states:
        for d in s.docs:
            seen.setdefault(d.doc_id, d)
    return list(seen.values())


class PerturbationActions:
    def __init__(
        self,
        engine: RAREngine,
        summary_backend: Optional[AgentBackend] = None,
        templates: Optional[Mapping[str, PromptTemplate]] = None,
    ):
        self.engine = engine
        self.summary_backend = summary_backend
        t = dict(templates or {})
        self.qp_template = t.get("query_paraphrase", QUERY_PARAPHRASE)
        self.cr_template = t.get("critical_rethinking", CRITICAL_RETHINKING)
        self.av_template = t.get("answer_validation", ANSWER_VALIDATION)
        self.summary_template = t.get("path_summary", PATH_SUMMARY)

    @property
    def temperature(self) -> float:
        return self.engine.cfg.sample_temperature

    def _prompt(self, template, vars, seed, task, backend=None):
        text = render(template, vars)
        resp, n, est = self.engine.call([("user", text)], seed, self.temperature, task=task, backend=backend)
        return resp.text, n, est

    def _prefix(self, path: ReasoningPath, states, descriptor, seed) -> ReasoningPath:
        return ReasoningPath(
            query_id=path.query_id,
            states=tuple(states),
            terminal=False,
            provenance=descriptor,
            decode_temperature=self.temperature,
            seed=seed,
        )

    @staticmethod
    def _check_inner_index(path: ReasoningPath, t: int) -> None:
        if not 1 <= t <= path.n - 1:
            raise PathError(f"state index {t} outside 1..{path.n - 1}")

    def apply_qp(self, item: QAItem, path: ReasoningPath, t: int, seed: int, sample_index: int = 1) -> PerturbedPrefix:
        self._check_inner_index(path, t)
        state = path.states[t - 1]
        if state.query is None:
            raise PathError(f"state {t} carries no search query")
        vars = {
            "question": item.question,
            "path": render_transcript(path.states[:t]),
            "think": state.think,
            "query": state.query,
        }
        flags = []
        tokens = 0
        new_q = ""
        for attempt in range(2):
            s = seed if attempt == 0 else hash64(seed, "qp-retry")
            text, n, est = self._prompt(self.qp_template, vars, s, "qp")
            tokens += n
            if est:
                flags.append("token_estimate")
            new_q = _extract_query(text)
            if _norm_query(new_q) and _norm_query(new_q) != _norm_query(state.query):
                break
        else:
            flags.append("degenerate_paraphrase")
            if not _norm_query(new_q):
                new_q = state.query
        replacement = ReasoningState(t, state.think, SearchQuery(new_q, self.engine.search(new_q)))
        desc = PerturbationDescriptor("QP", t, sample_index)
        prefix = self._prefix(path, path.states[: t - 1] + (replacement,), desc, seed)
        return PerturbedPrefix(prefix, desc, token_count=tokens, flags=tuple(dict.fromkeys(flags)))

    def apply_cr(self, item: QAItem, path: ReasoningPath, t: int, seed: int, sample_index: int = 1) -> PerturbedPrefix:
        self._check_inner_index(path, t)
        vars = {"question": item.question, "path": render_transcript(path.states[:t])}
        old_q = path.states[t - 1].query or ""
        flags = []
        tokens = 0
        think, query = "", ""
        for attempt in range(2):
            s = seed if attempt == 0 else hash64(seed, "cr-retry")
            text, n, est = self._prompt(self.cr_template, vars, s, "cr")
            tokens += n
            if est:
                flags.append("token_estimate")
            try:
                parsed = parse_agent_output(text)
                think, query = parsed.think, parsed.query or ""
            except MalformedOutput:
                think, query = "", ""
            if _norm_query(query) and _norm_query(query) != _norm_query(old_q):
                break
        else:
            flags.append("degenerate_rethink")
            if not _norm_query(query):
                query = old_q
        new_state = ReasoningState(t + 1, think, SearchQuery(query, self.engine.search(query)))
        desc = PerturbationDescriptor("CR", t, sample_index)
        prefix = self._prefix(path, path.states[:t] + (new_state,), desc, seed)
        return PerturbedPrefix(prefix, desc, token_count=tokens, flags=tuple(dict.fromkeys(flags)))

    def _summarize(self, item: QAItem, docs: list[Document], seed: int) -> tuple[str, int, list[str]]:
        if not docs:
            return NO_EVIDENCE_SUMMARY, 0, []
        vars = {"question": item.question, "documents": format_docs(docs)}
        try:
            text, n, est = self._prompt(self.summary_template, vars, seed, "summary", backend=self.summary_backend)
        except BackendError as exc:
            log.warning("summary backend failed, using document titles: %s", exc)
            return "; ".join(d.title for d in docs), 0, ["summary_fallback"]
        if not text.strip():
            return "; ".join(d.title for d in docs), n, ["summary_fallback"]
        return text.strip(), n, ["token_estimate"] if est else []

    def summarize_path(self, item: QAItem, docs: list[Document], seed: int) -> str:
        return self._summarize(item, docs, seed)[0]

    def apply_av(self, item: QAItem, path: ReasoningPath, seed: int, sample_index: int = 1) -> PerturbedPrefix:
        if not path.terminal:
            raise PathError("answer validation needs a terminal path")
        n = path.n
        r = path.response
        docs = path_documents(path.states[: n - 1])
        summary, tokens, flags = self._summarize(item, docs, hash64(seed, "summary"))
        vars = {
            "question": item.question,
            "path": render_transcript(path.states),
            "summary": summary,
            "answer": r,
        }
        text, k, est = self._prompt(self.av_template, vars, seed, "av")
        tokens += k
        if est:
            flags.append("token_estimate")
        desc = PerturbationDescriptor("AV", n, sample_index)
        kept = path.states[: n - 1]
        try:
            parsed = parse_agent_output(text)
            if parsed.untagged:
                raise MalformedOutput("untagged verdict")
        except MalformedOutput:
            # unparseable verdict counts as "not validated": regenerate the answer step
            flags.append("av_unparseable")
            return PerturbedPrefix(self._prefix(path, kept, desc, seed), desc, summary, None, tokens, tuple(flags))
        if parsed.is_answer:
            answer = parsed.answer
            if not answer or _norm_query(answer) == _norm_query(r):
                answer = r
            flags.append("av_confirmed")
            return PerturbedPrefix(
                self._prefix(path, kept, desc, seed), desc, summary, (parsed.think, answer), tokens, tuple(flags)
            )
        flags.append("av_rejected")
        new_state = ReasoningState(n, parsed.think, SearchQuery(parsed.query, self.engine.search(parsed.query)))
        return PerturbedPrefix(
            self._prefix(path, kept + (new_state,), desc, seed), desc, summary, None, tokens, tuple(flags)
        )

    def apply(self, item: QAItem, path: ReasoningPath, action: str, t: int, seed: int, sample_index: int = 1) -> PerturbedPrefix:
        if action == "QP":
            return self.apply_qp(item, path, t, seed, sample_index)
        if action == "CR":
            return self.apply_cr(item, path, t, seed, sample_index)
        if action == "AV":
            return self.apply_av(item, path, seed, sample_index)
        raise ValueError(f"unknown action {action!r}")


def complete_perturbed(engine: RAREngine, item: QAItem, pp: PerturbedPrefix, seed: int) -> ReasoningPath:
    """Turn a perturbed prefix into a finished sample path."""
    if pp.final_answer is not None:
        think, answer = pp.final_answer
        states = pp.prefix.states + (ReasoningState(pp.prefix.n + 1, think, Answer(answer)),)
        return replace(
            pp.prefix,
            states=states,
            terminal=True,
            token_count=pp.token_count,
            flags=tuple(sorted(set(pp.flags))),
        )
    out = engine.resume_from(item, pp.prefix, seed, base_tokens=pp.token_count)
    return out.with_flags(*pp.flags)
