"""Talking to the model under test: prompt construction, a chat-completions
client with retries and a content-addressed response cache, response parsing
into (thought, keywords, answer), and a scripted mock for offline runs.
"""

from __future__ import annotations

import hashlib
import json
import os
import re
import tempfile
import threading
import time
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import requests

SYSTEM_MESSAGE = (
    "To answer the given question, first generate a thought that explains the "
    "answer according to the text, then identify the most important words "
    "(keywords) from the text that helped you with your thought, and finally "
    "provide a short answer."
)
_CONTEXT_PREFIX = "The following text might be useful in answering the question: "
_QUESTION_PREFIX = "Question: "

STAGE_NO_CONTEXT = "no_context"
STAGE_ORIGINAL_CONTEXT = "original_context"
STAGE_SR = "sr"
STAGE_NK = "nk"

_ROLES = ("system", "user", "assistant")
_QUOTE_CHARS = "\"'‘’“”"
_KEYWORD_LENGTH_CAP = 40


class ProviderError(RuntimeError):
    """Transport-level failure after retries, or a malformed payload."""


class ParseError(ValueError):
    """Model output does not contain a usable short answer."""


@dataclass(frozen=True)
class ChatMessage:
    role: str
    content: str

    def __post_init__(self) -> None:
        if self.role not in _ROLES:
            raise ValueError(f"role must be one of {_ROLES}, got {self.role!r}")
        if self.content is None:
            raise ValueError("content must not be None")


@dataclass(frozen=True)
class ModelResponse:
    thought: str
    keywords: tuple[str, ...]
    answer: str
    raw: str
    warnings: tuple[str, ...] = ()


@dataclass(frozen=True)
class ProviderConfig:
    base_url: str
    model_id: str
    temperature: float = 0.0
    max_retries: int = 3
    retry_backoff: tuple[float, ...] = (0.5, 1.0, 2.0)
    cache_dir: Path | None = None
    request_timeout: float = 60.0
    api_key_env: str = "LLM_API_KEY"

    def __post_init__(self) -> None:
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")
        if self.request_timeout <= 0:
            raise ValueError("request_timeout must be positive")


_STAGE_FIELDS = {
    STAGE_NO_CONTEXT: "calls_no_context",
    STAGE_ORIGINAL_CONTEXT: "calls_original_context",
    STAGE_SR: "calls_sr",
    STAGE_NK: "calls_nk",
}


@dataclass
class CallLedger:
    """Per-sample accounting: network calls by pipeline stage, plus cache hits."""

    calls_no_context: int = 0
    calls_original_context: int = 0
    calls_sr: int = 0
    calls_nk: int = 0
    cache_hits: int = 0
    _lock: threading.Lock = field(
        default_factory=threading.Lock, init=False, repr=False, compare=False
    )

    @property
    def total(self) -> int:
        return (
            self.calls_no_context
            + self.calls_original_context
            + self.calls_sr
            + self.calls_nk
        )

    def record_call(self, stage: str) -> None:
        name = _STAGE_FIELDS.get(stage)
        if name is None:
            raise ValueError(f"unknown stage {stage!r}")
        with self._lock:
            setattr(self, name, getattr(self, name) + 1)

    def record_cache_hit(self) -> None:
        with self._lock:
            self.cache_hits += 1

    def to_dict(self) -> dict[str, int]:
        return {
            "no_context": self.calls_no_context,
            "original_context": self.calls_original_context,
            "sr": self.calls_sr,
            "nk": self.calls_nk,
            "cache_hits": self.cache_hits,
            "total": self.total,
        }


def build_prompt(
    question: str,
    context: str | None = None,
    few_shot: Sequence[tuple[str, str]] = (),
) -> list[ChatMessage]:
    """System message plus the user turn, with optional demonstration pairs.

    Demonstrations are (user content, assistant content) pairs inserted
    between the system message and the real user turn.
    """
    if not question.strip():
        raise ValueError("question must be non-empty")
    messages = [ChatMessage("system", SYSTEM_MESSAGE)]
    for demo_user, demo_assistant in few_shot:
        messages.append(ChatMessage("user", demo_user))
        messages.append(ChatMessage("assistant", demo_assistant))
    if context is not None:
        user = f"{_CONTEXT_PREFIX}{context} {_QUESTION_PREFIX}{question}"
    else:
        user = f"{_QUESTION_PREFIX}{question}"
    messages.append(ChatMessage("user", user))
    return messages


def _find_label(raw: str, label: str, start: int) -> tuple[int, int] | None:
    m = re.compile(re.escape(label), re.IGNORECASE).search(raw, start)
    if m is None:
        return None
    return m.start(), m.end()


def _strip_wrapping(text: str) -> str:
    # surrounding quotes and trailing periods
    text = text.strip()
    while text and text[0] in _QUOTE_CHARS:
        text = text[1:].lstrip()
    while text and (text[-1] in _QUOTE_CHARS or text[-1] == "."):
        text = text[:-1].rstrip()
    return text


def parse_response(raw: str) -> ModelResponse:
    """Extract the thought / keywords / short-answer triplet from raw output.

    Labels are matched case-insensitively and in order. A missing short-answer
    label (or an empty answer) is a ParseError; missing thought or keywords
    labels degrade gracefully with a recorded warning.
    """
    warnings: list[str] = []

    thought_span = _find_label(raw, "thought:", 0)
    after_thought = thought_span[1] if thought_span else 0
    keywords_span = _find_label(raw, "keywords:", after_thought)
    after_keywords = keywords_span[1] if keywords_span else after_thought
    answer_span = _find_label(raw, "short answer:", after_keywords)
    if answer_span is None:
        raise ParseError("missing 'Short answer:' label")

    if thought_span is None:
        warnings.append("missing 'Thought:' label")
        thought = ""
    else:
        end = keywords_span[0] if keywords_span else answer_span[0]
        thought = raw[thought_span[1] : end].strip()
        if thought.endswith(","):
            thought = thought[:-1].rstrip()

    if keywords_span is None:
        warnings.append("missing 'Keywords:' label")
        keywords: tuple[str, ...] = ()
    else:
        section = raw[keywords_span[1] : answer_span[0]]
        items = [_strip_wrapping(item) for item in section.split(",")]
        keywords = tuple(item for item in items if item)
        for item in keywords:
            if len(item) > _KEYWORD_LENGTH_CAP:
                warnings.append(f"keyword exceeds {_KEYWORD_LENGTH_CAP} chars: {item[:50]!r}")

    answer = _strip_wrapping(raw[answer_span[1] :])
    if not answer:
        raise ParseError("empty short answer")

    return ModelResponse(
        thought=thought,
        keywords=keywords,
        answer=answer,
        raw=raw,
        warnings=tuple(warnings),
    )


def render_response(response: ModelResponse) -> str:
    """Format a triplet back into the assistant template (inverse of parsing)."""
    keywords = ", ".join(response.keywords)
    return f"Thought: {response.thought}, Keywords: {keywords}, Short answer: {response.answer}"


class ChatModel(ABC):
    """Shared completion path: content-addressed cache in front of a transport.

    Stage counters in the ledger count actual transport calls; cache hits are
    tracked separately, so replaying a cached run performs zero new calls.
    """

    model_id: str
    cache_dir: Path | None

    def digest(self, messages: Sequence[ChatMessage]) -> str:
        canonical = json.dumps(
            {"model": self.model_id, "messages": [[m.role, m.content] for m in messages]},
            sort_keys=True,
            ensure_ascii=True,
            separators=(",", ":"),
        )
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    def complete(
        self,
        messages: Sequence[ChatMessage],
        ledger: CallLedger | None = None,
        stage: str = STAGE_ORIGINAL_CONTEXT,
    ) -> str:
        if not messages:
            raise ValueError("messages must be non-empty")
        key = self.digest(messages)
        cached = self._cache_read(key)
        if cached is not None:
            if ledger is not None:
                ledger.record_cache_hit()
            return cached
        raw = self._request(messages)
        self._cache_write(key, raw, messages)
        if ledger is not None:
            ledger.record_call(stage)
        return raw

    @abstractmethod
    def _request(self, messages: Sequence[ChatMessage]) -> str: ...

    def _cache_read(self, key: str) -> str | None:
        if self.cache_dir is None:
            return None
        path = Path(self.cache_dir) / f"{key}.txt"
        if not path.exists():
            return None
        return path.read_text(encoding="utf-8")

    def _cache_write(self, key: str, raw: str, messages: Sequence[ChatMessage]) -> None:
        if self.cache_dir is None:
            return
        cache_dir = Path(self.cache_dir)
        cache_dir.mkdir(parents=True, exist_ok=True)
        meta = {
            "model": self.model_id,
            "messages": [{"role": m.role, "content": m.content} for m in messages],
        }
        # Atomic writes keep concurrent duplicate writers benign.
        self._atomic_write(cache_dir / f"{key}.txt", raw)
        self._atomic_write(cache_dir / f"{key}.json", json.dumps(meta, ensure_ascii=False))

    @staticmethod
    def _atomic_write(path: Path, text: str) -> None:
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-")
        try:
            with os.fdopen(fd, "w", encoding="utf-8") as fh:
                fh.write(text)
            os.replace(tmp, path)
        except BaseException:
            try:
                os.unlink(tmp)
            except OSError:
                pass
            raise


class HttpChatModel(ChatModel):
    """Chat-completions HTTP client with bounded retries on transient failures."""

    def __init__(self, config: ProviderConfig, post=requests.post, sleep=time.sleep):
        self.config = config
        self.model_id = config.model_id
        self.cache_dir = config.cache_dir
        self._post = post
        self._sleep = sleep

    def _request(self, messages: Sequence[ChatMessage]) -> str:
        url = self.config.base_url.rstrip("/") + "/chat/completions"
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(self.config.api_key_env)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        body = {
            "model": self.config.model_id,
            "messages": [{"role": m.role, "content": m.content} for m in messages],
            "temperature": self.config.temperature,
        }

        backoff = self.config.retry_backoff
        last_error = "no attempts made"
        for attempt in range(self.config.max_retries + 1):
            if attempt and backoff:
                self._sleep(backoff[min(attempt - 1, len(backoff) - 1)])
            try:
                resp = self._post(url, json=body, headers=headers, timeout=self.config.request_timeout)
            except requests.RequestException as exc:
                last_error = f"request failed: {exc}"
                continue
            if resp.status_code == 429 or resp.status_code >= 500:
                last_error = f"HTTP {resp.status_code}"
                continue
            if resp.status_code != 200:
                raise ProviderError(f"HTTP {resp.status_code}: {resp.text[:200]}")
            try:
                content = resp.json()["choices"][0]["message"]["content"]
            except Exception as exc:
                raise ProviderError(f"malformed response payload: {exc}") from exc
            if not isinstance(content, str):
                raise ProviderError("malformed response payload: content is not a string")
            return content
        raise ProviderError(
            f"gave up after {self.config.max_retries + 1} attempts: {last_error}"
        )


def context_digest(context: str) -> str:
    return hashlib.sha256(context.encode("utf-8")).hexdigest()


def mock_entry(question: str, context: str | None, response: str) -> dict:
    """One mock fixture record; context is stored as a digest, not verbatim."""
    return {
        "question": question,
        "context_sha256": context_digest(context) if context is not None else None,
        "response": response,
    }


def load_mock_fixture(path: str | Path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        entries = json.load(fh)
    if not isinstance(entries, list):
        raise ValueError("mock fixture must be a JSON list")
    return entries


def save_mock_fixture(path: str | Path, entries: Sequence[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(list(entries), fh, ensure_ascii=False, indent=2)


class MockChatModel(ChatModel):
    """Lookup-table model keyed on (question, context digest).

    Unscripted inputs get ``default_response``, so a partial script still
    drives the full pipeline deterministically.
    """

    def __init__(
        self,
        entries: Sequence[dict],
        default_response: str = "Short answer: UNKNOWN",
        cache_dir: Path | None = None,
        model_id: str = "mock",
    ):
        self.model_id = model_id
        self.cache_dir = cache_dir
        self.default_response = default_response
        self._table: dict[tuple[str, str | None], str] = {}
        for entry in entries:
            self._table[(entry["question"], entry.get("context_sha256"))] = entry["response"]

    @classmethod
    def from_script(
        cls,
        script: dict[tuple[str, str | None], str],
        **kwargs,
    ) -> "MockChatModel":
        """Build from {(question, context or None): response} pairs."""
        entries = [mock_entry(q, ctx, resp) for (q, ctx), resp in script.items()]
        return cls(entries, **kwargs)

    @classmethod
    def from_fixture(cls, path: str | Path, **kwargs) -> "MockChatModel":
        return cls(load_mock_fixture(path), **kwargs)

    def _request(self, messages: Sequence[ChatMessage]) -> str:
        question, context = self._parse_user_message(messages)
        digest = context_digest(context) if context is not None else None
        return self._table.get((question, digest), self.default_response)

    @staticmethod
    def _parse_user_message(messages: Sequence[ChatMessage]) -> tuple[str, str | None]:
        user = next((m for m in reversed(messages) if m.role == "user"), None)
        if user is None:
            raise ProviderError("no user message to answer")
        content = user.content
        if content.startswith(_CONTEXT_PREFIX):
            body = content[len(_CONTEXT_PREFIX) :]
            context, sep, question = body.rpartition(f" {_QUESTION_PREFIX}")
            if not sep:
                raise ProviderError("user message lacks a question part")
            return question, context
        if content.startswith(_QUESTION_PREFIX):
            return content[len(_QUESTION_PREFIX) :], None
        raise ProviderError("unrecognized user message shape")
