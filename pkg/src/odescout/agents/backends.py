"""Chat-completion backends and the retrying ``complete`` call.

A backend turns ``(messages, temperature, max_tokens)`` into a
:class:`Completion`.  The HTTP backend talks to any OpenAI-compatible
``/chat/completions`` endpoint; the scripted backends replay canned replies so
whole searches can run offline and deterministically.
"""

from __future__ import annotations

import logging
import os
import time
from dataclasses import dataclass
from typing import Callable, Mapping, Protocol, Sequence

import httpx

from ..errors import BudgetExceeded, MalformedResponse, ScriptExhausted, TransportError
from ..fitted import parse_dim_name
from .parsing import ScientistResponse, TermAssessment, render_sampler_response, render_scientist_response
from .prompts import PromptBundle

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Completion:
    text: str
    input_tokens: int = 0
    output_tokens: int = 0


class Backend(Protocol):
    def send(self, bundle: PromptBundle) -> Completion: ...


@dataclass
class TokenTally:
    """Running token counts; ``budget`` caps input plus output tokens."""

    input_tokens: int = 0
    output_tokens: int = 0
    calls: int = 0
    budget: int | None = None

    @property
    def total(self) -> int:
        return self.input_tokens + self.output_tokens

    def add(self, c: Completion) -> None:
        self.input_tokens += int(c.input_tokens)
        self.output_tokens += int(c.output_tokens)
        self.calls += 1

    def to_dict(self) -> dict:
        return {"input_tokens": self.input_tokens, "output_tokens": self.output_tokens,
                "total_tokens": self.total, "calls": self.calls}


@dataclass(frozen=True)
class RetryPolicy:
    retries: int = 3
    backoff: float = 1.0  # seconds before the first retry, doubled each time


def complete(backend: Backend, bundle: PromptBundle, tally: TokenTally | None = None,
             retry: RetryPolicy | None = None,
             sleep: Callable[[float], None] = time.sleep) -> Completion:
    """One completion with exponential-backoff retries on transport failures."""
    retry = retry or RetryPolicy()
    if tally is not None and tally.budget is not None and tally.total >= tally.budget:
        raise BudgetExceeded(f"token budget of {tally.budget} exhausted")
    delay = retry.backoff
    for attempt in range(retry.retries + 1):
        try:
            result = backend.send(bundle)
            break
        except TransportError as exc:
            if attempt == retry.retries:
                raise TransportError(f"giving up after {retry.retries} retries: {exc}") from exc
            log.warning("transport failure (%s), retrying in %.1fs", exc, delay)
            sleep(delay)
            delay *= 2
    if tally is not None:
        tally.add(result)
    return result


class HttpChatBackend:
    """OpenAI-compatible chat endpoint; the API key comes from an environment variable."""

    def __init__(self, endpoint: str, model: str, api_key_env: str = "ODESCOUT_API_KEY",
                 timeout: float = 120.0, transport: httpx.BaseTransport | None = None):
        self.url = endpoint.rstrip("/")
        if not self.url.endswith("/chat/completions"):
            self.url += "/chat/completions"
        self.model = model
        self.api_key_env = api_key_env
        self.timeout = timeout
        self.transport = transport

    def _headers(self) -> dict:
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(self.api_key_env)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        return headers

    def send(self, bundle: PromptBundle) -> Completion:
        body = {
            "model": self.model,
            "messages": bundle.messages(),
            "temperature": bundle.temperature,
            "max_tokens": bundle.max_tokens,
        }
        try:
            # a fresh client per call keeps the backend free of shared mutable state
            with httpx.Client(timeout=self.timeout, transport=self.transport) as client:
                resp = client.post(self.url, json=body, headers=self._headers())
        except httpx.HTTPError as exc:
            raise TransportError(str(exc)) from exc
        if resp.status_code >= 400:
            raise TransportError(f"HTTP {resp.status_code}: {resp.text[:200]}")
        try:
            data = resp.json()
            text = data["choices"][0]["message"]["content"] or ""
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise MalformedResponse(f"unexpected completion payload: {exc}") from exc
        usage = data.get("usage") or {}
        return Completion(text, int(usage.get("prompt_tokens", 0)), int(usage.get("completion_tokens", 0)))


def _estimate_tokens(text: str) -> int:
    return max(1, len(text) // 4)


class ScriptedBackend:
    """Replays canned replies in order."""

    def __init__(self, replies: Sequence[str], input_tokens: int | None = None,
                 output_tokens: int | None = None):
        self.replies = list(replies)
        self.position = 0
        self.input_tokens = input_tokens
        self.output_tokens = output_tokens

    def _usage(self, bundle: PromptBundle, text: str) -> Completion:
        n_in = self.input_tokens if self.input_tokens is not None else _estimate_tokens(bundle.text)
        n_out = self.output_tokens if self.output_tokens is not None else _estimate_tokens(text)
        return Completion(text, n_in, n_out)

    def send(self, bundle: PromptBundle) -> Completion:
        if self.position >= len(self.replies):
            raise ScriptExhausted(f"no scripted reply left after {self.position} calls")
        text = self.replies[self.position]
        self.position += 1
        return self._usage(bundle, text)


Schedule = Sequence[Sequence[Mapping[int, Sequence[str]]]]


class ScriptedSampler(ScriptedBackend):
    """Sampler double: ``schedule[i]`` lists the hypotheses for iteration ``i + 1``.

    Each hypothesis maps a dimension index to its term strings.  With
    ``cycle=True`` the schedule wraps around instead of running out.
    """

    def __init__(self, schedule: Schedule, cycle: bool = False, **usage):
        super().__init__([], **usage)
        self.schedule = [list(h) for h in schedule]
        self.cycle = cycle

    def send(self, bundle: PromptBundle) -> Completion:
        it = int(bundle.context.get("iteration", 1))
        if not self.schedule or (it > len(self.schedule) and not self.cycle):
            raise ScriptExhausted(f"sampler script has no entry for iteration {it}")
        hyps = self.schedule[(it - 1) % len(self.schedule)]
        return self._usage(bundle, render_sampler_response(hyps))


class ScriptedScientist(ScriptedBackend):
    """Scientist double grading terms with a fixed rule.

    ``grades`` maps a skeleton key to a semantic grade, optionally per
    dimension (``{dim: {key: grade}}``); anything else gets ``default``.
    """

    def __init__(self, grades: Mapping | Callable[[int, str], str] | None = None,
                 default: str = "neutral", insight: str = "", **usage):
        super().__init__([], **usage)
        self.grades = grades or {}
        self.default = default
        self.insight = insight

    def grade(self, j: int, key: str) -> str:
        if callable(self.grades):
            return self.grades(j, key)
        per_dim = self.grades.get(j)
        if isinstance(per_dim, Mapping):
            return per_dim.get(key, self.default)
        return self.grades.get(key, self.default)

    def send(self, bundle: PromptBundle) -> Completion:
        keys = bundle.context.get("keys")
        if keys is None:
            raise ScriptExhausted("scientist double needs the current-attempt keys")
        assessments = {}
        for name, ks in keys.items():
            j = parse_dim_name(name)
            assessments[j] = tuple(TermAssessment(k, self.grade(j, k), "scripted") for k in ks)
        text = render_scientist_response(ScientistResponse(assessments, self.insight))
        return self._usage(bundle, text)


__all__ = [
    "Backend", "Completion", "HttpChatBackend", "RetryPolicy", "ScriptedBackend",
    "ScriptedSampler", "ScriptedScientist", "TokenTally", "complete",
]
