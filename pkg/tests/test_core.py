import json

import pytest
from hypothesis import given
from hypothesis import strategies as st

from raruq.core import (
    MOST_LIKELY,
    Answer,
    Document,
    PathError,
    PerturbationDescriptor,
    QAItem,
    ReasoningPath,
    ReasoningState,
    SearchQuery,
    TruncationDescriptor,
    UncertaintyResult,
    dumps,
    last_retrieval_index,
    truncate_path,
)


def _search(i, q="q", ids=("d1",)):
    return ReasoningState(i, f"think {i}", SearchQuery(q, tuple(Document(x, "t", "x") for x in ids)))


def _path(n_search=2, ids=("d1",)):
    states = [_search(i + 1, f"q{i}", ids) for i in range(n_search)]
    states.append(ReasoningState(n_search + 1, "done", Answer("Orlando Magic")))
    return ReasoningPath("q1", tuple(states), terminal=True, decode_temperature=0.7, seed=5, token_count=12)


def test_qaitem_requires_golds():
    with pytest.raises(ValueError):
        QAItem("x", "q", ())


def test_path_response_and_terminal():
    p = _path()
    assert p.n == 3 and p.terminal and p.response == "Orlando Magic"


def test_answer_only_last():
    with pytest.raises(ValueError):
        ReasoningPath("q", (ReasoningState(1, "", Answer("a")), _search(2)))


def test_indices_contiguous():
    with pytest.raises(ValueError):
        ReasoningPath("q", (_search(2),))


def test_terminal_needs_answer():
    with pytest.raises(ValueError):
        ReasoningPath("q", (_search(1),), terminal=True)


def test_truncate_full_clears_terminal_only():
    p = _path(4)
    t = truncate_path(p, p.n)
    assert t.states == p.states and not t.terminal and t.response is None
    assert t.provenance == p.provenance and t.seed == p.seed


def test_truncate_empty():
    assert truncate_path(_path(), 0).states == ()


def test_truncate_middle():
    p = _path(3)  # N = 4
    t = truncate_path(p, 2)
    assert [s.index for s in t.states] == [1, 2] and t.response is None


def test_truncate_out_of_range():
    with pytest.raises(PathError):
        truncate_path(_path(), 9)
    with pytest.raises(PathError):
        truncate_path(_path(), -1)


def test_last_retrieval_index_examples():
    assert last_retrieval_index(_path(2)) == 2
    assert last_retrieval_index(ReasoningPath("q", (ReasoningState(1, "", Answer("a")),), True)) == 0
    empty = ReasoningPath("q", (_search(1, ids=()), ReasoningState(2, "", Answer("a"))), True)
    assert last_retrieval_index(empty) == 0


def test_descriptor_rejects_unknown_action():
    with pytest.raises(ValueError):
        PerturbationDescriptor("XX", 1, 1)


# -- round-trip properties --

_text = st.text(st.characters(blacklist_categories=("Cs",)), max_size=12)
_doc = st.builds(Document, _text, _text, _text.filter(bool), st.one_of(st.none(), st.floats(-5, 5)))


@st.composite
def paths(draw):
    n = draw(st.integers(0, 5))
    states = []
    for i in range(1, n + 1):
        states.append(ReasoningState(i, draw(_text), SearchQuery(draw(_text), tuple(draw(st.lists(_doc, max_size=3))))))
    terminal = draw(st.booleans())
    if terminal:
        states.append(ReasoningState(n + 1, draw(_text), Answer(draw(_text))))
    prov = draw(
        st.one_of(
            st.just(MOST_LIKELY),
            st.builds(PerturbationDescriptor, st.sampled_from(["QP", "CR", "AV"]), st.integers(1, 9), st.integers(1, 10), st.booleans()),
            st.builds(TruncationDescriptor, st.integers(0, 9), st.integers(1, 10)),
        )
    )
    return ReasoningPath(
        draw(_text), tuple(states), terminal, prov, draw(st.floats(0, 2)), draw(st.integers(0, 2**63 - 1)),
        draw(st.integers(0, 10_000)), tuple(draw(st.lists(_text, max_size=2))),
    )


@given(paths())
def test_path_roundtrip(p):
    assert ReasoningPath.from_dict(json.loads(dumps(p))) == p


@given(paths(), st.lists(paths(), max_size=3), st.lists(st.booleans(), min_size=1, max_size=5))
def test_result_roundtrip(ml, samples, flags):
    c = sum(flags) / len(flags)
    r = UncertaintyResult("q", "R2C", ml, tuple(samples), c, 1 - c, tuple(flags), ("x",))
    assert UncertaintyResult.from_dict(json.loads(dumps(r))) == r


@given(st.builds(QAItem, _text, _text, st.lists(_text, min_size=1, max_size=3).map(tuple)))
def test_qaitem_roundtrip(q):
    assert QAItem.from_dict(json.loads(json.dumps(q.to_dict()))) == q


@given(paths())
def test_truncate_at_n_only_touches_terminal(p):
    t = truncate_path(p, p.n)
    assert t.states == p.states
    assert {k: v for k, v in vars(t).items() if k != "terminal"} == {k: v for k, v in vars(p).items() if k != "terminal"}
