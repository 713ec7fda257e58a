import random
from collections import Counter

import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.stats import chisquare

from conftest import docs, make_engine, scripted_steps, tagged
from raruq.core import Answer, PathError, QAItem, ReasoningPath, ReasoningState, SearchQuery
from raruq.gateway import BackendError, ScriptedBackend
from raruq.perturbations import PerturbationActions, complete_perturbed, path_documents, sample_perturbation
from raruq.prompts import NO_EVIDENCE_SUMMARY
from raruq.retrieval import CountingRetriever, StaticRetriever

ITEM = QAItem("q1", "Which team drafted the first pick in 1997?", ("San Antonio Spurs",))
ORIG_Q = "NBA draft 1997 first pick"
PARA_Q = "first overall pick 1997 NBA draft"


def path_of(n, answer="Orlando Magic"):
    states = [ReasoningState(i, f"think {i}", SearchQuery(f"query {i}", docs(f"o{i}"))) for i in range(1, n)]
    states.append(ReasoningState(n, "final", Answer(answer)))
    return ReasoningPath("q1", tuple(states), terminal=True, seed=1)


def actions(tasks, table=None, rar_steps=(tagged(answer="Resumed"),), summary_backend=None):
    r = CountingRetriever(StaticRetriever(table or {}, default=list(docs("fresh"))))
    eng = make_engine(scripted_steps(list(rar_steps), tasks), r)
    return PerturbationActions(eng, summary_backend=summary_backend), r


# -- sampling law --

def test_n1_always_forced_av():
    p = path_of(1)
    rng = random.Random(0)
    assert all(sample_perturbation(p, rng) == ("AV", 1, True) for _ in range(200))


def test_sampling_law_n5():
    p, rng = path_of(5), random.Random(12345)
    draws = [sample_perturbation(p, rng) for _ in range(30_000)]
    counts = Counter(d.action for d in draws)
    assert chisquare([counts[a] for a in ("QP", "CR", "AV")]).pvalue > 0.01
    assert all(d.state_index == 5 for d in draws if d.action == "AV")
    for a in ("QP", "CR"):
        idx = Counter(d.state_index for d in draws if d.action == a)
        assert set(idx) == {1, 2, 3, 4}
        assert chisquare([idx[i] for i in (1, 2, 3, 4)]).pvalue > 0.01


@given(st.integers(1, 12), st.integers(0, 2**32))
def test_descriptor_invariants(n, seed):
    p, rng = path_of(n), random.Random(seed)
    for _ in range(50):
        d = sample_perturbation(p, rng)
        if d.action == "AV":
            assert d.state_index == n
        else:
            assert 1 <= d.state_index <= n - 1
        assert d.forced == (n == 1)


def test_empty_path_rejected():
    with pytest.raises(PathError):
        sample_perturbation(ReasoningPath("q", ()), random.Random(0))


# -- QP --

def test_qp_keeps_think_and_reretrieves():
    p = ReasoningPath("q1", (
        ReasoningState(1, "look up the draft", SearchQuery(ORIG_Q, docs("orig1", "orig2"))),
        ReasoningState(2, "t2", SearchQuery("second", docs("o2"))),
        ReasoningState(3, "", Answer("Orlando Magic")),
    ), terminal=True)
    acts, r = actions({"qp": f"Search query: {PARA_Q}"}, {PARA_Q: list(docs("new1", "new2"))})
    pp = acts.apply_qp(ITEM, p, 1, seed=3)
    assert pp.prefix.n == 1 and not pp.prefix.terminal
    s = pp.prefix.states[0]
    assert s.think == "look up the draft" and s.query == PARA_Q
    assert [d.doc_id for d in s.docs] == ["new1", "new2"]
    assert not {"orig1", "orig2"} & {d.doc_id for d in s.docs}
    assert r.queries == [PARA_Q]
    assert (pp.descriptor.action, pp.descriptor.state_index) == ("QP", 1)


def test_qp_degenerate_retries_then_accepts():
    p = path_of(3)
    acts, r = actions({"qp": "Search query: Query 1!"})
    pp = acts.apply_qp(ITEM, p, 1, seed=3)
    qp_calls = [q for q in acts.engine.backend.requests if q.task == "qp"]
    assert len(qp_calls) == 2 and qp_calls[0].seed != qp_calls[1].seed
    assert "degenerate_paraphrase" in pp.flags and r.calls == 1


def test_qp_index_bounds():
    acts, _ = actions({"qp": "x"})
    with pytest.raises(PathError):
        acts.apply_qp(ITEM, path_of(3), 3, seed=0)
    with pytest.raises(PathError):
        acts.apply_qp(ITEM, path_of(3), 0, seed=0)


# -- CR --

@given(st.integers(2, 7), st.data())
def test_cr_prefix_length(n, data):
    t = data.draw(st.integers(1, n - 1))
    acts, r = actions({"cr": tagged("the previous documents are irrelevant", query="new angle")})
    pp = acts.apply_cr(ITEM, path_of(n), t, seed=1)
    assert pp.prefix.n == t + 1
    assert pp.prefix.states[:t] == path_of(n).states[:t]
    assert r.calls == 1


def test_cr_appended_state_carries_think_and_query():
    acts, _ = actions({"cr": tagged("the previous documents are irrelevant", query="1997 draft lottery winner")})
    pp = acts.apply_cr(ITEM, path_of(3), 2, seed=1)
    last = pp.prefix.states[-1]
    assert last.think == "the previous documents are irrelevant" and last.query == "1997 draft lottery winner"


def test_cr_at_last_inner_state_may_answer_immediately():
    acts, _ = actions({"cr": tagged("recheck", query="z")}, rar_steps=(tagged(answer="Orlando Magic"),))
    pp = acts.apply_cr(ITEM, path_of(3), 2, seed=1)
    out = complete_perturbed(acts.engine, ITEM, pp, seed=5)
    assert out.terminal and out.n == 4


# -- summary --

def test_summary_empty_docs_sentinel():
    acts, _ = actions({})
    assert acts.summarize_path(ITEM, [], seed=0) == NO_EVIDENCE_SUMMARY


def test_summary_echo_and_inputs_cover_whole_path():
    echo = lambda req: "|".join(line.split("(Title: ")[1].split(")")[0] for line in req.messages[-1][1].splitlines() if "(Title: " in line)
    summ = ScriptedBackend(lambda req: echo(req))
    acts, _ = actions({}, summary_backend=summ)
    p = path_of(4)
    got = acts.summarize_path(ITEM, path_documents(p.states), seed=0)
    assert got == "title o1|title o2|title o3"


def test_summary_backend_failure_falls_back():
    def boom(req):
        raise BackendError("down", 503)

    acts, _ = actions({}, summary_backend=ScriptedBackend(boom))
    text, _, flags = acts._summarize(ITEM, list(docs("a", "b")), seed=0)
    assert text == "title a; title b" and flags == ["summary_fallback"]


# -- AV --

def test_av_confirm_reemits_answer_without_agent_call():
    acts, r = actions({"summary": "evidence", "av": tagged("grounded", answer="Orlando Magic")})
    p = path_of(3)
    pp = acts.apply_av(ITEM, p, seed=1)
    assert pp.descriptor.state_index == 3 and "av_confirmed" in pp.flags
    before = len([q for q in acts.engine.backend.requests if q.task == "rar"])
    out = complete_perturbed(acts.engine, ITEM, pp, seed=2)
    assert out.response == p.response and out.terminal
    assert len([q for q in acts.engine.backend.requests if q.task == "rar"]) == before
    assert r.calls == 0


def test_av_reject_searches_and_continues():
    acts, r = actions(
        {"summary": "evidence", "av": tagged("not supported", query="1997 first pick team")},
        {"1997 first pick team": list(docs("spurs"))},
        rar_steps=(tagged(answer="San Antonio Spurs"),),
    )
    p = path_of(3)
    pp = acts.apply_av(ITEM, p, seed=1)
    assert "av_rejected" in pp.flags and r.queries == ["1997 first pick team"]
    assert pp.prefix.states[-1].query == "1997 first pick team"
    out = complete_perturbed(acts.engine, ITEM, pp, seed=2)
    assert out.response == "San Antonio Spurs" != p.response


def test_av_unparseable_is_not_validated():
    acts, r = actions({"summary": "evidence", "av": "hmm, hard to say"}, rar_steps=(tagged(answer="Other"),))
    pp = acts.apply_av(ITEM, path_of(2), seed=1)
    assert "av_unparseable" in pp.flags and pp.final_answer is None and r.calls == 0
    assert complete_perturbed(acts.engine, ITEM, pp, seed=2).response == "Other"


def test_av_prompt_contains_summary_and_answer():
    acts, _ = actions({"summary": "SUMMARY-TEXT", "av": tagged(answer="Orlando Magic")})
    acts.apply_av(ITEM, path_of(3), seed=1)
    av = [q for q in acts.engine.backend.requests if q.task == "av"][0]
    assert "SUMMARY-TEXT" in av.messages[-1][1] and "Orlando Magic" in av.messages[-1][1]


def test_av_needs_terminal_path():
    acts, _ = actions({})
    with pytest.raises(PathError):
        acts.apply_av(ITEM, ReasoningPath("q1", path_of(3).states[:2]), seed=0)


def test_av_confirming_wrong_answer_agrees_with_most_likely():
    # the validator confirms a wrong most-likely answer, so the sample agrees with it
    acts, _ = actions({"summary": "Docs mention the Orlando Magic.", "av": tagged("consistent with evidence", answer="Orlando Magic")})
    p = path_of(3, answer="Orlando Magic")
    out = complete_perturbed(acts.engine, ITEM, acts.apply_av(ITEM, p, seed=4), seed=5)
    assert out.response == "Orlando Magic"


def test_unknown_action():
    acts, _ = actions({})
    with pytest.raises(ValueError):
        acts.apply(ITEM, path_of(3), "XX", 1, 0)
