"""The think/search/answer loop that turns an agent backend into reasoning paths."""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

from .core import (
    MOST_LIKELY,
    Answer,
    Document,
    PathError,
    Provenance,
    QAItem,
    ReasoningPath,
    ReasoningState,
    SearchQuery,
)
from .gateway import AgentBackend, GenerationRequest, GenerationResponse, PromptTemplate, generate, hash64, render
from .prompts import NO_RESULTS, RAR_SYSTEM
from .retrieval import Retriever

STOP_SEQUENCES = ("</search>", "</answer>")


class MalformedOutput(ValueError):
    pass


@dataclass(frozen=True)
class ParsedOutput:
    think: str
    query: Optional[str] = None
    answer: Optional[str] = None
    untagged: bool = False

    @property
    def is_answer(self) -> bool:
        return self.answer is not None


_THINK = re.compile(r"<think>(.*?)(?:</think>|$)", re.S)
_SEARCH = re.compile(r"<search>(.*?)(?:</search>|$)", re.S)
_ANSWER = re.compile(r"<answer>(.*?)(?:</answer>|$)", re.S)


def parse_agent_output(text: str) -> ParsedOutput:
    """Parse ``[<think>..</think>] (<search>..</search> | <answer>..</answer>)``.

    Closing tags may be missing (stop sequences strip them). Text with no tags
    at all is taken as an untagged answer.
    """
    s = text.strip()
    think = ""
    m = _THINK.search(s)
    if m:
        think = m.group(1).strip()
        rest = s[: m.start()] + s[m.end():]
    else:
        rest = s
    has_search = "<search>" in rest
    has_answer = "<answer>" in rest
    if has_search and has_answer:
        raise MalformedOutput("output contains both <search> and <answer>")
    if has_search:
        q = _SEARCH.search(rest).group(1).strip()
        if not q:
            raise MalformedOutput("empty search query")
        return ParsedOutput(think, query=q)
    if has_answer:
        return ParsedOutput(think, answer=_ANSWER.search(rest).group(1).strip())
    rest = rest.strip()
    if not rest:
        raise MalformedOutput("no action in output")
    return ParsedOutput(think, answer=rest, untagged=True)


def format_docs(docs: Sequence[Document]) -> str:
    if not docs:
        return NO_RESULTS
    return "\n".join(f"Doc {i} (Title: {d.title}) {d.text}" for i, d in enumerate(docs, start=1))


def render_step(state: ReasoningState) -> str:
    head = f"<think>{state.think}</think>\n" if state.think else ""
    if state.is_answer:
        return f"{head}<answer>{state.payload.text}</answer>"
    return f"{head}<search>{state.query}</search>"


def render_information(state: ReasoningState) -> str:
    return f"<information>\n{format_docs(state.docs)}\n</information>"


def render_transcript(states: Sequence[ReasoningState]) -> str:
    """Plain-text transcript of a path, used inside perturbation prompts."""
    parts = []
    for s in states:
        parts.append(render_step(s))
        if not s.is_answer:
            parts.append(render_information(s))
    return "\n".join(parts) if parts else "(no steps yet)"


def count_tokens(resp: GenerationResponse) -> tuple[int, bool]:
    """Generated-token count; falls back to whitespace tokens when usage is missing."""
    if resp.token_usage is not None:
        return int(resp.token_usage), False
    return len(resp.text.split()), True


@dataclass(frozen=True)
class EngineConfig:
    k_docs: int = 3
    max_steps: int = 10
    most_likely_temperature: float = 0.7
    sample_temperature: float = 1.0
    max_tokens: int = 512
    rar_prompt: PromptTemplate = field(default=RAR_SYSTEM)
    retries: int = 2
    backoff: float = 0.5

    def __post_init__(self):
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        if self.k_docs < 1:
            raise ValueError("k_docs must be >= 1")


def most_likely_seed(query_id: str) -> int:
    return hash64("most-likely", query_id)


class RAREngine:
    def __init__(self, backend: AgentBackend, retriever: Retriever, cfg: EngineConfig = EngineConfig()):
        self.backend = backend
        self.retriever = retriever
        self.cfg = cfg

    # -- backend plumbing shared with the perturbation actions --

    def call(
        self,
        messages: Sequence[tuple[str, str]],
        seed: int,
        temperature: float,
        task: str = "rar",
        stop: Sequence[str] = (),
        logprobs: bool = False,
        backend: Optional[AgentBackend] = None,
    ) -> tuple[GenerationResponse, int, bool]:
        req = GenerationRequest(
            messages=tuple(messages),
            temperature=temperature,
            max_tokens=self.cfg.max_tokens,
            stop_sequences=tuple(stop),
            seed=seed,
            logprobs=logprobs,
            task=task,
        )
        resp = generate(backend or self.backend, req, retries=self.cfg.retries, backoff=self.cfg.backoff)
        n, est = count_tokens(resp)
        return resp, n, est

    def search(self, query: str) -> tuple[Document, ...]:
        return tuple(self.retriever.search(query, self.cfg.k_docs))

    def messages(self, item: QAItem, states: Sequence[ReasoningState]) -> list[tuple[str, str]]:
        msgs = [
            ("system", render(self.cfg.rar_prompt, {"question": item.question})),
            ("user", f"Question: {item.question}"),
        ]
        for s in states:
            msgs.append(("assistant", render_step(s)))
            if not s.is_answer:
                msgs.append(("user", render_information(s)))
        return msgs

    # -- the loop --

    def _continue(
        self, item: QAItem, states: list[ReasoningState], seed: int, temperature: float
    ) -> tuple[bool, int, set[str]]:
        tokens = 0
        flags: set[str] = set()
        budget = max(self.cfg.max_steps - len(states), 1)
        for _ in range(budget):
            msgs = self.messages(item, states)
            parsed = None
            for attempt in range(2):
                call_seed = seed if attempt == 0 else hash64(seed, "retry", len(states))
                resp, n, est = self.call(msgs, call_seed, temperature, stop=STOP_SEQUENCES)
                tokens += n
                if est:
                    flags.add("token_estimate")
                try:
                    parsed = parse_agent_output(resp.text)
                    break
                except MalformedOutput:
                    flags.add("malformed_retry")
            if parsed is None:
                flags.add("malformed")
                flags.add("budget_exhausted")
                return False, tokens, flags
            if parsed.untagged:
                flags.add("untagged")
            idx = len(states) + 1
            if parsed.is_answer:
                states.append(ReasoningState(idx, parsed.think, Answer(parsed.answer)))
                return True, tokens, flags
            states.append(ReasoningState(idx, parsed.think, SearchQuery(parsed.query, self.search(parsed.query))))
        flags.add("budget_exhausted")
        return False, tokens, flags

    def run_most_likely(self, item: QAItem, seed: Optional[int] = None) -> ReasoningPath:
        seed = most_likely_seed(item.id) if seed is None else seed
        temperature = self.cfg.most_likely_temperature
        states: list[ReasoningState] = []
        terminal, tokens, flags = self._continue(item, states, seed, temperature)
        return ReasoningPath(
            query_id=item.id,
            states=tuple(states),
            terminal=terminal,
            provenance=MOST_LIKELY,
            decode_temperature=temperature,
            seed=seed,
            token_count=tokens,
            flags=tuple(sorted(flags)),
        )

    def resume_from(
        self,
        item: QAItem,
        prefix: ReasoningPath,
        seed: int,
        temperature: Optional[float] = None,
        provenance: Optional[Provenance] = None,
        base_tokens: int = 0,
    ) -> ReasoningPath:
        """Continue generation after ``prefix``; prefix states are kept verbatim.

        ``token_count`` of the result counts only tokens generated here plus
        ``base_tokens`` (e.g. the perturbation call that built the prefix).
        """
        if prefix.terminal or prefix.ends_in_answer:
            raise PathError("cannot resume from a prefix that already ends in an answer")
        temperature = self.cfg.sample_temperature if temperature is None else temperature
        states = list(prefix.states)
        terminal, tokens, flags = self._continue(item, states, seed, temperature)
        return replace(
            prefix,
            states=tuple(states),
            terminal=terminal,
            provenance=prefix.provenance if provenance is None else provenance,
            decode_temperature=temperature,
            seed=seed,
            token_count=base_tokens + tokens,
            flags=tuple(sorted(set(prefix.flags) | flags)),
        )
