"""Generator backends, prompt templates and the ``generate`` call path.

Two backends ship here: ``RemoteBackend`` speaks the chat-completions wire
protocol over HTTP, ``ScriptedBackend`` answers from a table or a Python
callable. The synthetic world agent lives in :mod:`raruq.synthworld`.

Determinism holds only for backends that honour the seed field; hosted APIs
usually do not, so reproducibility guarantees apply to the scripted and
synthetic backends.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import threading
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Optional, Protocol, Union

import httpx

log = logging.getLogger(__name__)

ROLES = ("system", "user", "assistant")


class BackendError(RuntimeError):
    def __init__(self, message: str, status: Optional[int] = None):
        super().__init__(message)
        self.status = status


class TransientBackendError(BackendError):
    """Retryable failure: timeouts, connection errors, 429 and 5xx."""


class ProtocolError(BackendError):
    """The backend answered, but not in the expected shape."""


class RenderError(KeyError):
    pass


def hash64(*parts) -> int:
    """Stable 63-bit hash of ``parts``; identical across processes and platforms."""
    h = hashlib.blake2b(digest_size=8)
    for p in parts:
        h.update(repr(p).encode("utf-8"))
        h.update(b"\x1f")
    return int.from_bytes(h.digest(), "big") & ((1 << 63) - 1)


def derive_seed(master_seed: int, query_id: str, method: str, b: int) -> int:
    return hash64(master_seed, query_id, method, b)


@dataclass(frozen=True)
class GenerationRequest:
    messages: tuple[tuple[str, str], ...]
    temperature: float = 0.7
    max_tokens: int = 512
    stop_sequences: tuple[str, ...] = ()
    seed: int = 0
    logprobs: bool = False
    # local routing hint for scripted/synthetic backends; never sent on the wire
    task: str = "rar"

    def __post_init__(self):
        if not 0.0 <= self.temperature <= 2.0:
            raise ValueError(f"temperature {self.temperature} outside [0, 2]")
        if len(self.stop_sequences) > 4:
            raise ValueError("at most 4 stop sequences")
        for role, _ in self.messages:
            if role not in ROLES:
                raise ValueError(f"bad role {role!r}")

    def digest(self) -> str:
        blob = json.dumps([list(m) for m in self.messages], ensure_ascii=False)
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()

    def to_wire(self, model: str) -> dict:
        return {
            "model": model,
            "messages": [{"role": r, "content": c} for r, c in self.messages],
            "temperature": self.temperature,
            "max_tokens": self.max_tokens,
            "stop": list(self.stop_sequences),
            "seed": self.seed,
            "logprobs": self.logprobs,
        }


@dataclass(frozen=True)
class GenerationResponse:
    text: str
    token_usage: Optional[int] = None
    logprobs: Optional[tuple[tuple[str, float], ...]] = None
    finish_reason: str = "stop"


class AgentBackend(Protocol):
    def complete(self, req: GenerationRequest) -> GenerationResponse: ...


_PLACEHOLDER = re.compile(r"\{\{|\}\}|\{([A-Za-z_]\w*)\}")


def placeholders(body: str) -> list[str]:
    return list(dict.fromkeys(m.group(1) for m in _PLACEHOLDER.finditer(body) if m.group(1)))


@dataclass(frozen=True)
class PromptTemplate:
    name: str
    body: str
    required_vars: tuple[str, ...] = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        found = placeholders(self.body)
        if self.required_vars is None:
            object.__setattr__(self, "required_vars", tuple(found))
        elif set(self.required_vars) != set(found):
            raise ValueError(
                f"template {self.name!r}: placeholders {sorted(found)} != required_vars {sorted(self.required_vars)}"
            )


def render(template: PromptTemplate, vars: Mapping[str, str]) -> str:
    """Substitute ``{name}`` placeholders. ``{{``/``}}`` are literal braces; values are inserted verbatim."""
    for name in template.required_vars:
        if name not in vars:
            raise RenderError(name)

    def sub(m: re.Match) -> str:
        if m.group(1) is None:
            return m.group(0)[0]
        return str(vars[m.group(1)])

    return _PLACEHOLDER.sub(sub, template.body)


def _apply_stop(text: str, stops: tuple[str, ...]) -> tuple[str, bool]:
    """Cut ``text`` just after the earliest stop marker, keeping the marker."""
    hits = [(i, len(s)) for s in stops if (i := text.find(s)) >= 0]
    if not hits:
        return text, False
    i, n = min(hits)
    return text[: i + n], True


def generate(
    backend: AgentBackend,
    req: GenerationRequest,
    retries: int = 2,
    backoff: float = 0.5,
) -> GenerationResponse:
    """Call ``backend`` with retry on transient failures; enforce stop sequences.

    Output is cut just after the first stop marker. Hosted APIs usually drop
    the marker itself, so callers must accept text with or without it.
    """
    attempt = 0
    while True:
        try:
            resp = backend.complete(req)
            break
        except TransientBackendError as exc:
            if attempt >= retries:
                raise BackendError(f"backend failed after {attempt + 1} attempts: {exc}", exc.status) from exc
            delay = backoff * (2**attempt)
            log.info("transient backend failure (%s); retry %d in %.2fs", exc, attempt + 1, delay)
            if delay > 0:
                time.sleep(delay)
            attempt += 1
    if not isinstance(resp, GenerationResponse) or not isinstance(resp.text, str):
        raise ProtocolError(f"backend returned {type(resp).__name__}, expected GenerationResponse")
    text, stopped = _apply_stop(resp.text, req.stop_sequences)
    if stopped:
        resp = replace(resp, text=text, finish_reason="stop")
    return resp


Script = Union[Callable[[GenerationRequest], Union[str, GenerationResponse]], Mapping]


class ScriptedBackend:
    """Deterministic backend for tests.

    ``script`` is either a callable ``req -> str | GenerationResponse`` or a
    mapping keyed by ``(req.digest(), req.seed)``, ``req.digest()`` or
    ``req.task``, tried in that order.
    """

    def __init__(self, script: Script, default: Optional[str] = None):
        self.script = script
        self.default = default
        self.requests: list[GenerationRequest] = []
        self._lock = threading.Lock()

    def complete(self, req: GenerationRequest) -> GenerationResponse:
        with self._lock:
            self.requests.append(req)
        if callable(self.script):
            out = self.script(req)
        else:
            digest = req.digest()
            for key in ((digest, req.seed), digest, req.task):
                if key in self.script:
                    out = self.script[key]
                    break
            else:
                if self.default is None:
                    raise ProtocolError(f"no scripted response for task {req.task!r}")
                out = self.default
        if isinstance(out, GenerationResponse):
            return out
        return GenerationResponse(text=str(out))


class RemoteBackend:
    """Chat-completions client over HTTP with bearer-token auth."""

    def __init__(
        self,
        url: str,
        model: str,
        token_env: Optional[str] = None,
        timeout: float = 120.0,
        client: Optional[httpx.Client] = None,
    ):
        self.url = url
        self.model = model
        headers = {"Content-Type": "application/json"}
        if token_env:
            token = os.environ.get(token_env)
            if token:
                headers["Authorization"] = f"Bearer {token}"
        self._client = client or httpx.Client(timeout=timeout)
        self._headers = headers

    def complete(self, req: GenerationRequest) -> GenerationResponse:
        try:
            resp = self._client.post(self.url, json=req.to_wire(self.model), headers=self._headers)
        except (httpx.TimeoutException, httpx.TransportError) as exc:
            raise TransientBackendError(f"transport error: {exc}") from exc
        if resp.status_code == 429 or resp.status_code >= 500:
            raise TransientBackendError(f"HTTP {resp.status_code}", resp.status_code)
        if resp.status_code >= 400:
            raise BackendError(f"HTTP {resp.status_code}: {resp.text[:200]}", resp.status_code)
        try:
            body = resp.json()
            choice = body["choices"][0]
            text = choice["message"]["content"]
            if not isinstance(text, str):
                raise TypeError("content is not a string")
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise ProtocolError(f"malformed completion payload: {exc}") from exc
        usage = (body.get("usage") or {}).get("completion_tokens")
        lp = None
        content = (choice.get("logprobs") or {}).get("content")
        if content:
            lp = tuple((c["token"], float(c["logprob"])) for c in content)
        finish = choice.get("finish_reason") or "stop"
        if finish not in ("stop", "length"):
            finish = "stop"
        return GenerationResponse(text=text, token_usage=usage, logprobs=lp, finish_reason=finish)


class BoundedBackend:
    """Limits the number of in-flight calls to ``inner``."""

    def __init__(self, inner: AgentBackend, max_in_flight: int = 8):
        self.inner = inner
        self._sem = threading.BoundedSemaphore(max(1, max_in_flight))

    def complete(self, req: GenerationRequest) -> GenerationResponse:
        with self._sem:
            return self.inner.complete(req)
