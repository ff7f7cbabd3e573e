"""Advisors map a text context to a structured reply.

Reply wire format (JSON, possibly surrounded by prose):

* plan: ``{"tasks": [{"task": "...", "model": "...", "input": "..."}], "combine": "..."}``
  where ``model``, ``input`` and ``combine`` are optional;
* FL proposal: ``{"patch": {"lr": 0.01, "optimizer": {"name": "adam"}, ...}}``;
* no modification: the bare token ``NO_CHANGE``.
"""

from __future__ import annotations

import json
import os
import re
import time
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping, Protocol, Sequence

import httpx

from .domain import TaskPlan, normalize_patch, patch_to_dict, plan_from_dict, plan_to_dict
from .errors import AdvisorTimeout, InvalidPlan, MalformedReply, TransportError, ValidationError

PLAN = "plan"
FL_PROPOSAL = "fl_proposal"
NO_CHANGE = "no_change"
NO_CHANGE_TOKEN = "NO_CHANGE"

# build_context puts the user's request after the last occurrence of this line
REQUEST_MARKER = "### Request"

_NO_CHANGE_RE = re.compile(r"(?<![A-Za-z0-9_])NO_CHANGE(?![A-Za-z0-9_])")


@dataclass(frozen=True)
class AdvisorReply:
    kind: str
    raw_text: str
    plan: TaskPlan | None = None
    patch: Mapping[str, Any] | None = field(default=None, hash=False)

    @classmethod
    def for_plan(cls, plan: TaskPlan) -> "AdvisorReply":
        return cls(PLAN, serialize_reply(PLAN, plan), plan=plan)

    @classmethod
    def for_patch(cls, patch: Mapping[str, Any]) -> "AdvisorReply":
        patch = dict(patch)
        return cls(FL_PROPOSAL, serialize_reply(FL_PROPOSAL, patch), patch=patch)

    @classmethod
    def no_change(cls) -> "AdvisorReply":
        return cls(NO_CHANGE, NO_CHANGE_TOKEN)


def serialize_reply(kind: str, payload: Any = None) -> str:
    if kind == PLAN:
        return json.dumps(plan_to_dict(payload))
    if kind == FL_PROPOSAL:
        return json.dumps({"patch": patch_to_dict(payload)})
    if kind == NO_CHANGE:
        return NO_CHANGE_TOKEN
    raise ValueError(f"unknown reply kind {kind!r}")


def _first_object(text: str) -> dict | None:
    decoder = json.JSONDecoder()
    start = text.find("{")
    while start != -1:
        try:
            obj, _ = decoder.raw_decode(text, start)
        except (ValueError, RecursionError):
            obj = None
        if isinstance(obj, dict):
            return obj
        start = text.find("{", start + 1)
    return None


def parse_reply(raw_text: str, expect: str) -> AdvisorReply:
    """Extract the first JSON object from ``raw_text`` and read it as ``expect``.

    Raises MalformedReply when there is no usable block; never anything else.
    """
    if expect not in (PLAN, FL_PROPOSAL):
        raise ValueError(f"expect must be {PLAN!r} or {FL_PROPOSAL!r}")
    if not isinstance(raw_text, str):
        raise MalformedReply(repr(raw_text), "reply is not text")
    block = _first_object(raw_text)
    if block is None:
        if _NO_CHANGE_RE.search(raw_text):
            return AdvisorReply(NO_CHANGE, raw_text)
        raise MalformedReply(raw_text)
    try:
        if expect == PLAN:
            return AdvisorReply(PLAN, raw_text, plan=plan_from_dict(block, "reply"))
        if not isinstance(block.get("patch"), Mapping):
            raise ValidationError("reply.patch", "missing")
        return AdvisorReply(FL_PROPOSAL, raw_text, patch=normalize_patch(block["patch"], "reply.patch"))
    except ValidationError as exc:
        raise MalformedReply(raw_text, str(exc)) from None


def extract_request(context: str) -> str:
    head, marker, tail = context.rpartition(REQUEST_MARKER)
    return tail.strip() if marker else context


class Advisor(Protocol):
    def ask(self, context: str, expect: str) -> AdvisorReply: ...


@dataclass(frozen=True)
class KeywordAdvisor:
    """Offline stand-in for an LLM planner.

    The first rule whose keywords all occur (case-insensitively) in the
    request fires; FL questions always get NO_CHANGE.
    """

    rules: tuple[tuple[frozenset[str], TaskPlan], ...]

    def ask(self, context: str, expect: str = PLAN) -> AdvisorReply:
        if expect != PLAN:
            return AdvisorReply.no_change()
        request = extract_request(context).lower()
        for keywords, plan in self.rules:
            if all(k in request for k in keywords):
                return AdvisorReply.for_plan(plan)
        raise InvalidPlan("no keyword rule matches the request")


class ScriptedAdvisor:
    """Replays a fixed program of raw replies.

    ``program`` is either a sequence of reply texts, returned in order and then
    NO_CHANGE forever, or a function from context to reply text. The sequence
    form keeps a cursor, so concurrent callers must serialize their calls.
    """

    def __init__(self, program: Sequence[str] | Callable[[str], str]):
        self.program = program if callable(program) else tuple(program)
        self.cursor = 0

    def ask(self, context: str, expect: str = PLAN) -> AdvisorReply:
        if callable(self.program):
            return parse_reply(self.program(context), expect)
        if self.cursor < len(self.program):
            raw = self.program[self.cursor]
            self.cursor += 1
            return parse_reply(raw, expect)
        return parse_reply(NO_CHANGE_TOKEN, expect)

    def reset(self) -> None:
        self.cursor = 0


class RemoteAdvisor:
    """Chat-completion client: POST ``<endpoint>/chat/completions``.

    The bearer token comes from ``EDGEPLAN_API_KEY`` unless ``api_key`` is
    given. Transport failures and 5xx/429 responses are retried up to
    ``max_retries`` times with a fixed backoff.
    """

    def __init__(self, endpoint: str, model_name: str, timeout: float = 30.0, max_retries: int = 2,
                 temperature: float = 0.0, api_key: str | None = None, backoff_s: float = 1.0,
                 transport: httpx.BaseTransport | None = None):
        if not timeout > 0:
            raise ValueError("timeout must be > 0")
        if max_retries < 0:
            raise ValueError("max_retries must be >= 0")
        self.endpoint = endpoint.rstrip("/")
        self.model_name = model_name
        self.timeout = timeout
        self.max_retries = max_retries
        self.temperature = temperature
        self.api_key = api_key if api_key is not None else os.environ.get("EDGEPLAN_API_KEY")
        self.backoff_s = backoff_s
        self.transport = transport

    def request_body(self, context: str) -> dict:
        return {
            "model": self.model_name,
            "messages": [{"role": "user", "content": context}],
            "temperature": self.temperature,
        }

    def complete(self, context: str) -> str:
        """Raw text of the first choice."""
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        body = self.request_body(context)
        last: Exception | None = None
        with httpx.Client(timeout=self.timeout, transport=self.transport) as client:
            for attempt in range(self.max_retries + 1):
                if attempt:
                    time.sleep(self.backoff_s)
                try:
                    resp = client.post(f"{self.endpoint}/chat/completions", json=body, headers=headers)
                except httpx.TimeoutException as exc:
                    last = AdvisorTimeout(f"advisor timed out after {self.timeout} s: {exc}")
                    continue
                except httpx.HTTPError as exc:
                    last = TransportError(f"advisor unreachable: {exc}")
                    continue
                if resp.status_code >= 500 or resp.status_code == 429:
                    last = TransportError(f"advisor returned HTTP {resp.status_code}")
                    continue
                if resp.status_code >= 400:
                    raise TransportError(f"advisor returned HTTP {resp.status_code}: {resp.text[:200]}")
                try:
                    content = resp.json()["choices"][0]["message"]["content"]
                except (ValueError, KeyError, IndexError, TypeError):
                    raise MalformedReply(resp.text, "response lacks choices[0].message.content") from None
                if not isinstance(content, str):
                    raise MalformedReply(resp.text, "message content is not text")
                return content
        raise last

    def ask(self, context: str, expect: str = PLAN) -> AdvisorReply:
        return parse_reply(self.complete(context), expect)


def ask(advisor: Advisor, context: str, expect: str = PLAN) -> AdvisorReply:
    if not context:
        raise ValueError("context must be non-empty")
    return advisor.ask(context, expect)
