"""A deterministic toy world for oracle-checked end-to-end runs.

The world is a set of people, cities and countries linked by two relations:
``P was born in C.`` and ``C is the capital of K.``. One-hop questions ask for
a birthplace, two-hop questions ask for the country whose capital is that
birthplace.

Distractors come in three kinds:

* rival bios (``Q, a rival of P, was born in W.``) which share the person's
  name but state nothing about them, providing plausible wrong answers;
* registry decoys (``Registry entry for P lists birthplace W.``) planted for
  a difficulty-dependent subset of queries. They outrank the true bio for the
  agent's habitual query wording but not for its alternatives, so errors they
  cause are consistent under resampling and only a change of wording exposes
  them;
* filler text and capital facts for non-query cities.

``SyntheticAgent`` is a backend that reads the rendered prompts, so every
decision depends on the documents actually present in its context.
"""

from __future__ import annotations

import json
import random
import re
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

from .core import Document, QAItem
from .gateway import GenerationRequest, GenerationResponse, hash64
from .metrics import normalize_answer

ONE_HOP = "Where was {p} born?"
TWO_HOP = "What country has the birthplace of {p} as its capital?"
_ONE_HOP_RE = re.compile(r"Where was (.+?) born\?")
_TWO_HOP_RE = re.compile(r"What country has the birthplace of (.+?) as its capital\?")

# hop-1 wordings; index 0 is the agent's habit and the one decoys are built against
HOP1_WORDINGS = ("{p} birthplace", "{p} born", "where was {p} born", "{p} was born in which city")
HOP2_WORDINGS = ("{c} capital", "capital of which country is {c}", "{c} is the capital of", "country with capital {c}")

_BIO_RE = re.compile(r"([A-Z][a-z]+ [A-Z][a-z]+) was born in ([A-Z][a-z]+)\.")
_DECOY_RE = re.compile(r"Registry entry for ([A-Z][a-z]+ [A-Z][a-z]+) lists birthplace ([A-Z][a-z]+)\.")
_RIVAL_RE = re.compile(r"([A-Z][a-z]+ [A-Z][a-z]+), a rival of ([A-Z][a-z]+ [A-Z][a-z]+), was born in ([A-Z][a-z]+)\.")
_CAPITAL_RE = re.compile(r"([A-Z][a-z]+) is the capital of ([A-Z][a-z]+)\.")
_PROFILE_RE = re.compile(r"(?:settled in|lakes of|city of) ([A-Z][a-z]+)")
_SEARCH_RE = re.compile(r"<search>(.*?)(?:</search>|$)", re.S)
_INFO_RE = re.compile(r"<information>(.*?)</information>", re.S)
_ANSWER_RE = re.compile(r"<answer>(.*?)(?:</answer>|$)", re.S)

_ONSETS = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "dr", "kr", "st", "tr", "gl"]
_VOWELS = ["a", "e", "i", "o", "u", "ai", "ou", "ea"]
_CODAS = ["", "n", "r", "l", "s", "th", "m", "x"]
_FILLER = [
    "The {c} river festival draws visitors every spring.",
    "Farmers near {c} grow barley and flax on terraced hills.",
    "A narrow gauge railway once linked {c} with the coast.",
    "Old stone bridges in {c} date from the merchant era.",
]
# background facts about a person, each sharing a token with one alternative wording
_PROFILES = [
    "{p}, born into a merchant family, later settled in {c}.",
    "{p} spent long summers where the lakes of {c} lie.",
    "{p} moved to the city of {c} as an adult.",
]
# background facts about a city, again one per alternative hop-2 wording
_CITY_PROFILES = [
    "Travellers still debate which road into {c} is the oldest.",
    "{c} sits in the country's fertile southern valley.",
    "{c} is twinned with a harbour town with a famous lighthouse.",
]


@dataclass(frozen=True)
class WorldSpec:
    n_queries: int = 200
    two_hop_fraction: float = 0.5
    corpus_size: int = 3000
    distractor_rate: float = 1.0
    err_scale: float = 0.6
    trap_scale: float = 0.6
    rivals_per_query: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.n_queries < 1:
            raise ValueError("n_queries must be >= 1")
        if not 0.0 <= self.distractor_rate <= 1.0:
            raise ValueError("distractor_rate must lie in [0, 1]")
        if not 0.0 <= self.two_hop_fraction <= 1.0:
            raise ValueError("two_hop_fraction must lie in [0, 1]")


@dataclass(frozen=True)
class QueryFacts:
    id: str
    person: str
    hops: int
    difficulty: float
    city: str
    country: str
    trap: bool = False
    decoy_city: Optional[str] = None


@dataclass
class World:
    spec: WorldSpec
    facts: list[QueryFacts]
    dataset: list[QAItem]
    corpus: list[Document]
    capitals: dict[str, str]  # city -> country
    people: list[str] = field(default_factory=list)

    def agent(self, err_scale: Optional[float] = None) -> "SyntheticAgent":
        return SyntheticAgent(self, self.spec.err_scale if err_scale is None else err_scale)

    def to_json(self) -> dict:
        return {
            "spec": asdict(self.spec),
            "facts": [asdict(f) for f in self.facts],
            "capitals": self.capitals,
            "people": self.people,
        }

    @classmethod
    def from_json(cls, d: dict, dataset: Sequence[QAItem] = (), corpus: Sequence[Document] = ()) -> "World":
        return cls(
            spec=WorldSpec(**d["spec"]),
            facts=[QueryFacts(**f) for f in d["facts"]],
            dataset=list(dataset),
            corpus=list(corpus),
            capitals=dict(d["capitals"]),
            people=list(d.get("people", [])),
        )


def _word_factory(rng: random.Random):
    used: set[str] = set()

    def word(min_syl: int = 2, max_syl: int = 3) -> str:
        while True:
            w = "".join(
                rng.choice(_ONSETS) + rng.choice(_VOWELS) + rng.choice(_CODAS)
                for _ in range(rng.randint(min_syl, max_syl))
            ).capitalize()
            if w.lower() not in used and len(w) >= 4:
                used.add(w.lower())
                return w

    return word


def bio_text(person: str, city: str) -> str:
    return f"{person} was born in {city}."


def decoy_text(person: str, city: str) -> str:
    return f"Registry entry for {person} lists birthplace {city}."


def rival_text(rival: str, person: str, city: str) -> str:
    return f"{rival}, a rival of {person}, was born in {city}."


def capital_text(city: str, country: str) -> str:
    return f"{city} is the capital of {country}."


def build_world(spec: WorldSpec) -> World:
    rng = random.Random(hash64("world", spec.seed))
    word = _word_factory(rng)

    facts: list[QueryFacts] = []
    capitals: dict[str, str] = {}
    people: list[str] = []
    for i in range(spec.n_queries):
        person = f"{word()} {word()}"
        city, country = word(), word() + "ia"
        capitals[city] = country
        hops = 2 if rng.random() < spec.two_hop_fraction else 1
        difficulty = rng.random()
        trap = rng.random() < difficulty * spec.trap_scale
        facts.append(QueryFacts(f"q{i:04d}", person, hops, difficulty, city, country, trap))
        people.append(person)

    support: list[Document] = []
    for f in facts:
        support.append(Document(f"bio-{f.id}", f.person, bio_text(f.person, f.city)))
        if f.hops == 2:
            support.append(Document(f"cap-{f.id}", f.city, capital_text(f.city, f.country)))

    budget = round(spec.distractor_rate * max(spec.corpus_size - len(support), 0))
    distractors: list[Document] = []

    def add(doc: Document) -> bool:
        if len(distractors) >= budget:
            return False
        distractors.append(doc)
        return True

    def new_city() -> str:
        c = word()
        capitals[c] = word() + "ia"
        return c

    # decoys first: they are what makes a query a trap
    facts_out = []
    for f in facts:
        if f.trap and len(distractors) < budget:
            w = new_city()
            add(Document(f"decoy-{f.id}", f"{f.person} registry", decoy_text(f.person, w)))
            f = QueryFacts(**{**asdict(f), "decoy_city": w})
        else:
            f = QueryFacts(**{**asdict(f), "trap": False})
        facts_out.append(f)
    facts = facts_out

    for f in facts:
        for j, tmpl in enumerate(_PROFILES):
            add(Document(f"profile-{f.id}-{j}", f"{f.person} life", tmpl.format(p=f.person, c=new_city())))

    for f in facts:
        if f.hops == 2:
            for j, tmpl in enumerate(_CITY_PROFILES):
                add(Document(f"city-{f.id}-{j}", f"{f.city} guide", tmpl.format(c=f.city)))

    for r in range(spec.rivals_per_query):
        for f in facts:
            rival = f"{word()} {word()}"
            people.append(rival)
            add(Document(f"rival-{f.id}-{r}", rival, rival_text(rival, f.person, new_city())))

    extra_cities = [c for c in capitals if not any(c == f.city and f.hops == 2 for f in facts)]
    for c in sorted(extra_cities, key=lambda c: hash64(spec.seed, c)):
        add(Document(f"cap-x-{c.lower()}", c, capital_text(c, capitals[c])))

    k = 0
    while len(distractors) < budget:
        c = rng.choice(list(capitals))
        add(Document(f"fill-{k:05d}", f"{c} notes", rng.choice(_FILLER).format(c=c)))
        k += 1

    corpus = support + distractors
    dataset = [
        QAItem(f.id, (ONE_HOP if f.hops == 1 else TWO_HOP).format(p=f.person), (f.city if f.hops == 1 else f.country,))
        for f in facts
    ]
    return World(spec, facts, dataset, corpus, capitals, people)


# -- agent --


@dataclass
class _Context:
    person: str
    hops: int
    steps: list[tuple[str, str]]  # (query, information text)


def _claims_about(person: str, text: str) -> list[str]:
    """Birthplace claims about ``person`` in document order (bios and decoys)."""
    out: list[tuple[int, str]] = []
    for rx in (_BIO_RE, _DECOY_RE):
        for m in rx.finditer(text):
            if m.group(1) == person:
                out.append((m.start(), m.group(2)))
    return [c for _, c in sorted(out)]


def _cities_in(text: str) -> list[str]:
    seen = []
    for rx, g in ((_BIO_RE, 2), (_DECOY_RE, 2), (_RIVAL_RE, 3), (_CAPITAL_RE, 1), (_PROFILE_RE, 1)):
        for m in rx.finditer(text):
            seen.append((m.start(), m.group(g)))
    return list(dict.fromkeys(c for _, c in sorted(seen)))


def _capitals_in(text: str) -> dict[str, str]:
    return {m.group(1): m.group(2) for m in _CAPITAL_RE.finditer(text)}


def _wording_index(query: str, person: str) -> int:
    for i, w in enumerate(HOP1_WORDINGS):
        if normalize_answer(w.format(p=person)) == normalize_answer(query):
            return i
    return -1


class SyntheticAgent:
    """Rule-based agent backend for a :class:`World`.

    Every call draws ``u`` from ``hash64(seed, request digest)``; the step is
    erroneous iff ``u < difficulty * err_scale``. Identical context and seed
    therefore always give identical output.
    """

    def __init__(self, world: World, err_scale: float = 0.6):
        self.world = world
        self.err_scale = err_scale
        self._by_person = {f.person: f for f in world.facts}
        self._cities = sorted(world.capitals)
        self._countries = sorted(set(world.capitals.values()))

    # -- public API --

    def complete(self, req: GenerationRequest) -> GenerationResponse:
        if req.task == "equivalence":
            text = self._equivalence(req)
        elif req.task == "p_true":
            return self._p_true(req)
        elif req.task == "summary":
            text = self._summary(req)
        else:
            facts = self._facts_for(req)
            text, _ = self.step(req.messages, req.seed, facts.difficulty if facts else 0.0, task=req.task)
        return GenerationResponse(text, token_usage=len(text.split()))

    def step(self, messages, seed: int, difficulty: float, task: str = "rar") -> tuple[str, bool]:
        """One agent decision; returns ``(text, erred)``."""
        digest = GenerationRequest(tuple(messages), seed=seed).digest()
        u = hash64(seed, digest) / float(1 << 63)
        erred = u < difficulty * self.err_scale
        rng = random.Random(hash64(seed, digest, "choice"))
        ctx = self._parse(messages, task)
        if ctx is None:
            return "<answer>unknown</answer>", erred
        handler = {"rar": self._rar, "qp": self._qp, "cr": self._cr, "av": self._av}[task]
        return handler(ctx, messages, erred, rng), erred

    # -- parsing --

    def _question(self, messages) -> Optional[tuple[str, int]]:
        blob = "\n".join(c for _, c in messages)
        m = _TWO_HOP_RE.search(blob)
        if m:
            return m.group(1), 2
        m = _ONE_HOP_RE.search(blob)
        if m:
            return m.group(1), 1
        return None

    def _facts_for(self, req: GenerationRequest) -> Optional[QueryFacts]:
        q = self._question(req.messages)
        return self._by_person.get(q[0]) if q else None

    def _parse(self, messages, task: str) -> Optional[_Context]:
        q = self._question(messages)
        if q is None:
            return None
        person, hops = q
        if task == "rar":
            steps = []
            for i, (role, content) in enumerate(messages):
                if role != "assistant":
                    continue
                m = _SEARCH_RE.search(content)
                if not m:
                    continue
                info = messages[i + 1][1] if i + 1 < len(messages) else ""
                steps.append((m.group(1).strip(), info))
        else:
            text = messages[-1][1]
            path = text.split("Reasoning so far:", 1)[-1]
            queries = [m.group(1).strip() for m in _SEARCH_RE.finditer(path.split("Current thought:")[0])]
            infos = _INFO_RE.findall(path)
            steps = list(zip(queries, infos + [""] * (len(queries) - len(infos))))
        return _Context(person, hops, steps)

    def _bridge(self, ctx: _Context) -> Optional[str]:
        """Current belief about the birthplace; the latest hop-2 query commits to its city."""
        bridge = None
        for query, info in ctx.steps:
            if ctx.person.lower() in query.lower():
                claims = _claims_about(ctx.person, info)
                if claims:
                    bridge = claims[0]
            else:
                cities = self._city_tokens(query)
                if cities:
                    bridge = cities[0]
        return bridge

    def _city_tokens(self, query: str) -> list[str]:
        return [w.capitalize() for w in re.findall(r"[A-Za-z]+", query) if w.capitalize() in self.world.capitals]

    def _all_info(self, ctx: _Context) -> str:
        return "\n".join(info for _, info in ctx.steps)

    # -- decisions --

    def _hop1_query(self, ctx: _Context, rng: random.Random, avoid: Sequence[int] = ()) -> str:
        options = [i for i in range(1, len(HOP1_WORDINGS)) if i not in avoid] or list(range(1, len(HOP1_WORDINGS)))
        return HOP1_WORDINGS[rng.choice(options)].format(p=ctx.person)

    def _other(self, pool: Sequence[str], not_this: Optional[str], universe: Sequence[str], rng: random.Random) -> str:
        cands = [c for c in pool if c != not_this]
        if cands:
            return cands[0]
        cands = [c for c in universe if c != not_this]
        return rng.choice(cands)

    @staticmethod
    def _search(think: str, query: str) -> str:
        return f"<think>{think}</think>\n<search>{query}</search>"

    @staticmethod
    def _answer(think: str, answer: str) -> str:
        return f"<think>{think}</think>\n<answer>{answer}</answer>"

    def _rar(self, ctx: _Context, messages, erred: bool, rng: random.Random) -> str:
        p = ctx.person
        info = self._all_info(ctx)
        bridge = self._bridge(ctx)
        n_search = len(ctx.steps)
        if bridge is None:
            if n_search >= 4:
                guess = self._other(_cities_in(info), None, self._cities, rng)
                return self._answer("I could not find it; guessing.", guess if ctx.hops == 1 else self.world.capitals.get(guess, guess))
            if erred and ctx.hops == 2:
                # wrong hop: asks for the capital relation on the person directly
                return self._search(f"Which country is linked to {p}?", f"{p} capital")
            return self._search(f"I need to find where {p} was born.", HOP1_WORDINGS[0].format(p=p))
        if ctx.hops == 1:
            answer = self._other(_cities_in(info), bridge, self._cities, rng) if erred else bridge
            return self._answer(f"The documents say {p} was born in {bridge}.", answer)
        caps = _capitals_in(info)
        last_q = ctx.steps[-1][0] if ctx.steps else ""
        looked_up = any(bridge.lower() in q.lower() and p.lower() not in q.lower() for q, _ in ctx.steps)
        if bridge not in caps and not (looked_up and n_search >= 4):
            if erred:
                wrong = self._other(_cities_in(info), bridge, self._cities, rng)
                return self._search(f"{p} was born in {wrong}; which country is it the capital of?", HOP2_WORDINGS[0].format(c=wrong))
            if looked_up and bridge.lower() in last_q.lower():
                return self._search(f"Still need the country whose capital is {bridge}.", HOP2_WORDINGS[1].format(c=bridge))
            return self._search(f"{p} was born in {bridge}. Which country has it as capital?", HOP2_WORDINGS[0].format(c=bridge))
        country = caps.get(bridge) or self.world.capitals.get(bridge, "unknown")
        if erred:
            country = self._other(list(dict.fromkeys(caps.values())), country, self._countries, rng)
        return self._answer(f"{bridge} is the capital of {caps.get(bridge, country)}.", country)

    def _qp(self, ctx: _Context, messages, erred: bool, rng: random.Random) -> str:
        text = messages[-1][1]
        m = re.search(r"^Search query: (.*)$", text, re.M)
        query = m.group(1).strip() if m else ""
        if ctx.person.lower() in query.lower():
            idx = _wording_index(query, ctx.person)
            return f"<search>{self._hop1_query(ctx, rng, avoid=[idx])}</search>"
        cities = self._city_tokens(query)
        if cities:
            c = cities[0]
            idx = next((i for i, w in enumerate(HOP2_WORDINGS) if normalize_answer(w.format(c=c)) == normalize_answer(query)), -1)
            options = [i for i in range(len(HOP2_WORDINGS)) if i != idx]
            return f"<search>{HOP2_WORDINGS[rng.choice(options)].format(c=c)}</search>"
        return f"<search>{query} information</search>"

    def _cr(self, ctx: _Context, messages, erred: bool, rng: random.Random) -> str:
        bridge = self._bridge(ctx)
        if erred and bridge is not None and ctx.hops == 2:
            return self._search(
                f"Let me double-check the country for {bridge}.", HOP2_WORDINGS[3].format(c=bridge)
            )
        last_idx = [_wording_index(q, ctx.person) for q, _ in ctx.steps if ctx.person.lower() in q.lower()]
        return self._search(
            f"The retrieved documents may be misleading. Re-check where {ctx.person} was born.",
            self._hop1_query(ctx, rng, avoid=last_idx[-1:]),
        )

    def _av(self, ctx: _Context, messages, erred: bool, rng: random.Random) -> str:
        text = messages[-1][1]
        m = re.search(r"^Candidate answer: (.*)$", text, re.M)
        answer = m.group(1).strip() if m else ""
        s = re.search(r"Evidence summary:\n(.*?)\n\nCandidate answer:", text, re.S)
        evidence = s.group(1) if s else ""
        claims = list(dict.fromkeys(_claims_about(ctx.person, evidence)))
        if ctx.hops == 1:
            valid = len(claims) == 1 and normalize_answer(claims[0]) == normalize_answer(answer)
        else:
            caps = _capitals_in(evidence)
            valid = len(claims) == 1 and normalize_answer(caps.get(claims[0], "")) == normalize_answer(answer)
        if valid != erred:
            return self._answer("The answer is supported by the evidence.", answer)
        if ctx.hops == 2 and len(claims) == 1 and claims[0] not in _capitals_in(evidence):
            return self._search(
                f"The evidence does not say which country has {claims[0]} as capital.",
                HOP2_WORDINGS[rng.randint(1, len(HOP2_WORDINGS) - 1)].format(c=claims[0]),
            )
        hop1 = [_wording_index(q, ctx.person) for q, _ in ctx.steps if ctx.person.lower() in q.lower()]
        return self._search(
            f"The evidence about where {ctx.person} was born is not conclusive.",
            self._hop1_query(ctx, rng, avoid=hop1),
        )

    # -- auxiliary tasks --

    def _summary(self, req: GenerationRequest) -> str:
        text = req.messages[-1][1]
        docs = text.split("Documents:", 1)[-1]
        sentences = re.findall(r"\(Title: [^)]*\) (.*)", docs)
        return " ".join(s.strip() for s in sentences)

    def _equivalence(self, req: GenerationRequest) -> str:
        text = req.messages[-1][1]
        a = re.search(r"^Response 1: (.*)$", text, re.M)
        b = re.search(r"^Response 2: (.*)$", text, re.M)
        same = a and b and normalize_answer(a.group(1)) == normalize_answer(b.group(1))
        return "Yes" if same else "No"

    def _p_true(self, req: GenerationRequest) -> GenerationResponse:
        import math

        text = req.messages[-1][1]
        m = re.search(r"^Possible answer: (.*)$", text, re.M)
        answer = normalize_answer(m.group(1)) if m else ""
        block = text.split("Brainstormed answers:", 1)[-1].split("Possible answer:", 1)[0]
        samples = [normalize_answer(s) for s in re.findall(r"^- (.*)$", block, re.M)]
        k = sum(1 for s in samples if s == answer)
        p = (k + 1) / (len(samples) + 2)
        return GenerationResponse("A", token_usage=1, logprobs=(("A", math.log(p)),))


def write_world(world: World, out_dir) -> dict:
    """Write ``corpus.jsonl``, ``dataset.jsonl`` and ``world.json`` into ``out_dir``."""
    from pathlib import Path

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"corpus": out / "corpus.jsonl", "dataset": out / "dataset.jsonl", "world": out / "world.json"}
    with paths["corpus"].open("w") as fh:
        for d in world.corpus:
            fh.write(json.dumps({"id": d.doc_id, "title": d.title, "text": d.text}, sort_keys=True) + "\n")
    with paths["dataset"].open("w") as fh:
        for q in world.dataset:
            fh.write(json.dumps(q.to_dict(), sort_keys=True) + "\n")
    paths["world"].write_text(json.dumps(world.to_json(), sort_keys=True, indent=1))
    return {k: str(v) for k, v in paths.items()}


def load_world(path) -> World:
    from pathlib import Path

    return World.from_json(json.loads(Path(path).read_text()))
