"""Hybrid QA answer correctness: exact, normalized, fuzzy, embedding, and
date-aware matching combined into one verdict.

The combined rule is::

    correct = exact or ((norm_exact or fuzzy or embed) and date)

where the date clause only bites when both strings actually parse as dates;
otherwise it is vacuously true. That keeps "1964" from fuzzily passing as
"1965" while leaving non-date answers alone.
"""

from __future__ import annotations

import datetime
import hashlib
import os
import re
import string
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np
import requests

DEFAULT_ARTICLES = frozenset({"a", "an", "the"})

_PUNCT = set(string.punctuation) | set("‘’“”—–…")


class EmbeddingUnavailable(RuntimeError):
    """The embedding provider failed; the embed sub-metric degrades to false."""


class EmbeddingProvider(Protocol):
    """Deterministic text-to-vector provider. Same input, same vector."""

    dimension: int

    def embed(self, text: str) -> Sequence[float]: ...


@dataclass(frozen=True)
class EvalConfig:
    fuzzy_threshold: int = 90
    embed_threshold: float = 0.9
    articles_to_strip: frozenset[str] = DEFAULT_ARTICLES

    def __post_init__(self) -> None:
        if not 0 <= self.fuzzy_threshold <= 100:
            raise ValueError(f"fuzzy_threshold must be in [0, 100], got {self.fuzzy_threshold}")
        if not 0.0 <= self.embed_threshold <= 1.0:
            raise ValueError(f"embed_threshold must be in [0, 1], got {self.embed_threshold}")


@dataclass(frozen=True)
class EvalVerdict:
    """Outcome of the combined metric for one (gold set, answer) pair.

    ``sub_results`` holds the five per-metric booleans for the gold answer
    that decided the verdict (the first matching one, or the last tried).
    ``embed_similarity`` is None when the embed metric was skipped (decided
    without it) or the provider failed.
    """

    correct: bool
    sub_results: dict[str, bool]
    fuzzy_score: int
    embed_similarity: float | None
    gold: str
    embed_error: str | None = None

    def recompute(self) -> bool:
        """The combined formula re-applied to the recorded sub-results."""
        s = self.sub_results
        return s["exact"] or ((s["norm_exact"] or s["fuzzy"] or s["embed"]) and s["date"])


def normalize(text: str, articles: frozenset[str] = DEFAULT_ARTICLES) -> str:
    """Lowercase, drop punctuation and standalone articles, collapse whitespace."""
    lowered = "".join(ch for ch in text.lower() if ch not in _PUNCT)
    words = [w for w in lowered.split() if w not in articles]
    return " ".join(words)


def exact_match(gold: str, answer: str) -> bool:
    return gold == answer


def levenshtein(a: str, b: str) -> int:
    """Edit distance (insert/delete/substitute), two-row DP."""
    if a == b:
        return 0
    if not a:
        return len(b)
    if not b:
        return len(a)
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, start=1):
        cur = [i]
        for j, cb in enumerate(b, start=1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def fuzzy_score(gold: str, answer: str, articles: frozenset[str] = DEFAULT_ARTICLES) -> int:
    """Normalized edit-distance ratio in [0, 100] over normalized strings."""
    a = normalize(gold, articles)
    b = normalize(answer, articles)
    return round(100 * (1 - levenshtein(a, b) / max(len(a), len(b), 1)))


def cosine_similarity(u: Sequence[float], v: Sequence[float]) -> float:
    ua = np.asarray(u, dtype=float)
    va = np.asarray(v, dtype=float)
    denom = float(np.linalg.norm(ua) * np.linalg.norm(va))
    if denom == 0.0:
        return 0.0
    return float(np.dot(ua, va) / denom)


def embed_similarity(gold: str, answer: str, provider: EmbeddingProvider) -> float:
    """Cosine similarity of the two embeddings; zero vectors compare as 0."""
    try:
        u = provider.embed(gold)
        v = provider.embed(answer)
    except EmbeddingUnavailable:
        raise
    except Exception as exc:  # provider-specific failures all degrade the same way
        raise EmbeddingUnavailable(str(exc)) from exc
    return cosine_similarity(u, v)


_MONTHS = {
    name: i
    for i, name in enumerate(
        ["january", "february", "march", "april", "may", "june", "july",
         "august", "september", "october", "november", "december"],
        start=1,
    )
}
_MONTHS.update({name[:3]: num for name, num in _MONTHS.items()})
_MONTHS["sept"] = 9

_DATE_PATTERNS: list[tuple[re.Pattern[str], tuple[str, str, str]]] = [
    # Month D, YYYY
    (re.compile(r"^([a-z]+)\.? (\d{1,2}),? (\d{4})$"), ("month", "day", "year")),
    # D Month YYYY
    (re.compile(r"^(\d{1,2}) ([a-z]+)\.?,? (\d{4})$"), ("day", "month", "year")),
    # ISO
    (re.compile(r"^(\d{4})-(\d{1,2})-(\d{1,2})$"), ("year", "month_num", "day")),
    # MM/DD/YYYY
    (re.compile(r"^(\d{1,2})/(\d{1,2})/(\d{4})$"), ("month_num", "day", "year")),
    # Month YYYY
    (re.compile(r"^([a-z]+)\.?,? (\d{4})$"), ("month", "year")),
    # bare year
    (re.compile(r"^(\d{4})$"), ("year",)),
]


def normalize_date(text: str) -> str | None:
    """Canonical ISO date for a fixed set of date shapes, else None.

    Missing day or month default to 01. Impossible dates (Feb 30) fail.
    """
    s = re.sub(r"\s+", " ", text.strip().lower()).rstrip(".")
    for pattern, roles in _DATE_PATTERNS:
        m = pattern.match(s)
        if not m:
            continue
        parts = dict(zip(roles, m.groups()))
        if "month" in parts:
            month = _MONTHS.get(parts["month"])
            if month is None:
                continue
        else:
            month = int(parts["month_num"]) if "month_num" in parts else 1
        day = int(parts.get("day", 1))
        year = int(parts["year"])
        try:
            d = datetime.date(year, month, day)
        except ValueError:
            continue
        return d.isoformat()
    return None


def _evaluate_single(
    gold: str,
    answer: str,
    config: EvalConfig,
    provider: EmbeddingProvider | None,
) -> EvalVerdict:
    exact = exact_match(gold, answer)
    norm_gold = normalize(gold, config.articles_to_strip)
    norm_answer = normalize(answer, config.articles_to_strip)
    norm_exact = norm_gold == norm_answer
    score = fuzzy_score(gold, answer, config.articles_to_strip)
    fuzzy = score >= config.fuzzy_threshold

    gold_date = normalize_date(gold)
    answer_date = normalize_date(answer)
    date_applies = gold_date is not None and answer_date is not None
    date_ok = gold_date == answer_date if date_applies else True

    # The embed metric costs a provider call, so only ask when it can still
    # change the outcome.
    embed_ok = False
    similarity: float | None = None
    embed_error: str | None = None
    if not exact and date_ok and not (norm_exact or fuzzy):
        if provider is not None:
            try:
                similarity = embed_similarity(norm_gold, norm_answer, provider)
                embed_ok = similarity >= config.embed_threshold
            except EmbeddingUnavailable as exc:
                embed_error = str(exc) or exc.__class__.__name__

    sub = {
        "exact": exact,
        "norm_exact": norm_exact,
        "fuzzy": fuzzy,
        "embed": embed_ok,
        "date": date_ok,
    }
    correct = exact or ((norm_exact or fuzzy or embed_ok) and date_ok)
    return EvalVerdict(
        correct=correct,
        sub_results=sub,
        fuzzy_score=score,
        embed_similarity=similarity,
        gold=gold,
        embed_error=embed_error,
    )


def evaluate(
    gold_set: Sequence[str],
    answer: str,
    config: EvalConfig | None = None,
    provider: EmbeddingProvider | None = None,
) -> EvalVerdict:
    """Combined verdict against a set of gold answers (OR over the set).

    Records the sub-results of the first gold that matches, or of the last
    gold tried when none do. A failing embedding provider only disables the
    embed sub-metric; it never raises out of here.
    """
    if not gold_set:
        raise ValueError("gold_set must be non-empty")
    config = config or EvalConfig()
    verdict = None
    for gold in gold_set:
        verdict = _evaluate_single(gold, answer, config, provider)
        if verdict.correct:
            return verdict
    return verdict


class AnswerEvaluator:
    """Config + embedding provider bundled behind a single evaluate() call."""

    def __init__(self, config: EvalConfig | None = None, provider: EmbeddingProvider | None = None):
        self.config = config or EvalConfig()
        self.provider = provider if provider is not None else HashedNgramEmbedder()

    def evaluate(self, gold_set: Sequence[str], answer: str) -> EvalVerdict:
        return evaluate(gold_set, answer, self.config, self.provider)


class HashedNgramEmbedder:
    """Offline fallback embedder: hashed character trigram counts, L2-normalized.

    Deterministic across processes (hashing uses blake2b, not the salted
    builtin hash), so cached runs and tests reproduce exactly.
    """

    def __init__(self, dimension: int = 256, ngram: int = 3):
        if dimension < 1 or ngram < 1:
            raise ValueError("dimension and ngram must be positive")
        self.dimension = dimension
        self.ngram = ngram
        self._cache: dict[str, tuple[float, ...]] = {}

    def embed(self, text: str) -> tuple[float, ...]:
        cached = self._cache.get(text)
        if cached is not None:
            return cached
        padded = f" {text} "
        vec = np.zeros(self.dimension)
        if len(padded) >= self.ngram:
            for i in range(len(padded) - self.ngram + 1):
                gram = padded[i : i + self.ngram]
                digest = hashlib.blake2b(gram.encode("utf-8"), digest_size=8).digest()
                vec[int.from_bytes(digest, "big") % self.dimension] += 1.0
        norm = float(np.linalg.norm(vec))
        if norm > 0:
            vec /= norm
        result = tuple(float(x) for x in vec)
        self._cache[text] = result
        return result


class RemoteEmbedder:
    """Client for an HTTP embedding endpoint.

    Wire shape: POST {"model": ..., "input": [text]} -> {"data": [{"embedding": [...]}]}.
    The bearer token comes from an environment variable so configs stay shareable.
    """

    def __init__(
        self,
        url: str,
        model_id: str,
        api_key_env: str = "EMBED_API_KEY",
        timeout: float = 30.0,
        post=requests.post,
    ):
        self.url = url
        self.model_id = model_id
        self.api_key_env = api_key_env
        self.timeout = timeout
        self.dimension = 0  # fixed by the first successful response
        self._post = post
        self._cache: dict[str, tuple[float, ...]] = {}

    def embed(self, text: str) -> tuple[float, ...]:
        cached = self._cache.get(text)
        if cached is not None:
            return cached
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(self.api_key_env)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        try:
            resp = self._post(
                self.url,
                json={"model": self.model_id, "input": [text]},
                headers=headers,
                timeout=self.timeout,
            )
            resp.raise_for_status()
            vector = tuple(float(x) for x in resp.json()["data"][0]["embedding"])
        except EmbeddingUnavailable:
            raise
        except Exception as exc:
            raise EmbeddingUnavailable(f"embedding request failed: {exc}") from exc
        if not vector:
            raise EmbeddingUnavailable("embedding endpoint returned an empty vector")
        if self.dimension == 0:
            self.dimension = len(vector)
        elif len(vector) != self.dimension:
            raise EmbeddingUnavailable(
                f"embedding dimension changed: {len(vector)} != {self.dimension}"
            )
        self._cache[text] = vector
        return vector
