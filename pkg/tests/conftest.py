import os
import re

import pytest
from hypothesis import HealthCheck, settings

from raruq.core import Document, QAItem
from raruq.engine import EngineConfig, RAREngine
from raruq.gateway import ScriptedBackend
from raruq.retrieval import CountingRetriever, StaticRetriever

settings.register_profile("ci", max_examples=200, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("dev", max_examples=50, deadline=None)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "ci"))


def n_assistant(req) -> int:
    return sum(1 for role, _ in req.messages if role == "assistant")


def tagged(think: str = "", query: str | None = None, answer: str | None = None) -> str:
    head = f"<think>{think}</think>" if think else ""
    if query is not None:
        return f"{head}<search>{query}</search>"
    return f"{head}<answer>{answer}</answer>"


def scripted_steps(steps, tasks=None):
    """Backend replaying ``steps[i]`` for the i-th agent turn; other tasks answered from ``tasks``."""
    tasks = tasks or {}

    def script(req):
        if req.task != "rar":
            out = tasks[req.task]
            return out(req) if callable(out) else out
        i = n_assistant(req)
        return steps[min(i, len(steps) - 1)]

    return ScriptedBackend(script)


def docs(*ids) -> tuple:
    return tuple(Document(i, f"title {i}", f"text of {i}") for i in ids)


@pytest.fixture
def item():
    return QAItem("q1", "Which team drafted the first pick in 1997?", ("Orlando Magic",))


@pytest.fixture
def static_retriever():
    table = {
        "q-a": list(docs("a1", "a2", "a3")),
        "q-b": list(docs("b1", "b2", "b3")),
        "q-c": list(docs("c1", "c2", "c3")),
    }
    return CountingRetriever(StaticRetriever(table, default=list(docs("z1"))))


def make_engine(backend, retriever, **kw):
    return RAREngine(backend, retriever, EngineConfig(retries=0, backoff=0.0, **kw))


def search_queries_in(req) -> list[str]:
    return re.findall(r"<search>(.*?)</search>", "\n".join(c for _, c in req.messages))


# acceptance lines are collected here and echoed after the run, so they show
# up in the terminal even when pytest captures per-test stdout
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
