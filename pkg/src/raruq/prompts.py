"""Default prompt templates. Every one can be replaced through the config file."""

from .gateway import PromptTemplate

RAR_SYSTEM = PromptTemplate(
    "rar_system",
    """Answer the given question. You must reason inside <think> and </think> every time you get new information.
After reasoning, if you find you lack some knowledge, call a search engine with <search> query </search>; it returns the top results between <information> and </information>.
You can search as many times as you want. If no further external knowledge is needed, give the final answer inside <answer> and </answer> without detailed explanation, for example <answer> Beijing </answer>.""",
)

QUERY_PARAPHRASE = PromptTemplate(
    "query_paraphrase",
    """You are helping a search agent. Rewrite the search query below so it keeps the same intent but uses different wording, so that a search engine may return different relevant documents.

Question: {question}

Reasoning so far:
{path}

Current thought: {think}
Search query: {query}

Return only the rewritten query inside <search> and </search>.""",
)

CRITICAL_RETHINKING = PromptTemplate(
    "critical_rethinking",
    """You are reviewing the reasoning of a search agent. Assume the information retrieved so far may be unhelpful, irrelevant or misleading. Critically reassess it, then propose a new search query that would verify or correct the reasoning.

Question: {question}

Reasoning so far:
{path}

Write your reassessment inside <think> and </think>, then the new query inside <search> and </search>.""",
)

ANSWER_VALIDATION = PromptTemplate(
    "answer_validation",
    """You are validating the final answer of a search agent against two criteria.
Groundedness: is the answer supported by the retrieved documents?
Correctness: does the answer appropriately and sufficiently address the question, given the available evidence?

Question: {question}

Reasoning so far:
{path}

Evidence summary:
{summary}

Candidate answer: {answer}

Reason inside <think> and </think>. If the answer is valid, repeat it inside <answer> and </answer>. Otherwise write a search query that would help find the right answer inside <search> and </search>.""",
)

PATH_SUMMARY = PromptTemplate(
    "path_summary",
    """Summarize the documents below with respect to the question. Keep every fact that helps answer it and drop the rest.

Question: {question}

Documents:
{documents}

Summary:""",
)

EQUIVALENCE = PromptTemplate(
    "equivalence",
    """Evaluate the semantic equivalence between two responses to the same question. Consider them equivalent if they refer to the same entity or fact.

Question: {question}
Response 1: {response_a}
Response 2: {response_b}

Are the two responses equivalent? Answer with Yes or No only.""",
)

P_TRUE = PromptTemplate(
    "p_true",
    """Question: {question}
Brainstormed answers:
{samples}
Possible answer: {answer}
Is the possible answer:
 (A) True
 (B) False
The possible answer is: (reply with A or B, then your confidence from 0 to 100 that the possible answer is true)""",
)

NO_EVIDENCE_SUMMARY = "No evidence was retrieved for this question."
NO_RESULTS = "No results found."

DEFAULTS = {
    t.name: t
    for t in (RAR_SYSTEM, QUERY_PARAPHRASE, CRITICAL_RETHINKING, ANSWER_VALIDATION, PATH_SUMMARY, EQUIVALENCE, P_TRUE)
}
