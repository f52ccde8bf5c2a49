"""Loading QA samples (question / context / gold answers) from JSONL and
persisting per-sample result records in a canonical, diff-stable form.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

logger = logging.getLogger(__name__)

STATUS_OK = "ok"
STATUS_NOT_RETRIEVAL_HARD = "not_retrieval_hard"
STATUS_WRONG_WITH_CONTEXT = "wrong_with_context"
STATUS_NO_SUFFICIENT_REGION = "no_sufficient_region"
STATUS_NO_NECESSARY_KEYWORDS = "no_necessary_keywords"
STATUS_PROVIDER_ERROR = "provider_error"
STATUS_PARSE_ERROR = "parse_error"

STATUSES = frozenset(
    {
        STATUS_OK,
        STATUS_NOT_RETRIEVAL_HARD,
        STATUS_WRONG_WITH_CONTEXT,
        STATUS_NO_SUFFICIENT_REGION,
        STATUS_NO_NECESSARY_KEYWORDS,
        STATUS_PROVIDER_ERROR,
        STATUS_PARSE_ERROR,
    }
)

FLOAT_DECIMALS = 6


class EmptyDataset(ValueError):
    """The input file produced zero valid samples."""


@dataclass(frozen=True)
class Sample:
    id: str
    question: str
    context: str
    gold_answers: tuple[str, ...]

    def __post_init__(self) -> None:
        if not self.question or not self.context:
            raise ValueError("question and context must be non-empty")
        if not self.gold_answers or any(not a for a in self.gold_answers):
            raise ValueError("gold_answers must be a non-empty list of non-empty strings")


@dataclass
class Dataset:
    samples: list[Sample] = field(default_factory=list)
    skipped: int = 0

    @property
    def n(self) -> int:
        return len(self.samples)

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self) -> Iterator[Sample]:
        return iter(self.samples)


def load_dataset(path: str | Path) -> Dataset:
    """Parse JSONL with fields {id?, question, context, answers: [str]}.

    Invalid lines are skipped with a logged diagnostic and counted; a file
    with zero valid samples raises EmptyDataset.
    """
    samples: list[Sample] = []
    skipped = 0
    seen_ids: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                logger.warning("%s line %d: invalid JSON (%s)", path, lineno, exc)
                skipped += 1
                continue
            sample = _parse_sample(obj, lineno)
            if sample is None:
                logger.warning("%s line %d: missing or invalid fields, skipped", path, lineno)
                skipped += 1
                continue
            if sample.id in seen_ids:
                logger.warning("%s line %d: duplicate id %r, skipped", path, lineno, sample.id)
                skipped += 1
                continue
            seen_ids.add(sample.id)
            samples.append(sample)
    if not samples:
        raise EmptyDataset(f"no valid samples in {path}")
    return Dataset(samples=samples, skipped=skipped)


def _parse_sample(obj: object, lineno: int) -> Sample | None:
    if not isinstance(obj, dict):
        return None
    question = obj.get("question")
    context = obj.get("context")
    answers = obj.get("answers")
    if not isinstance(question, str) or not question.strip():
        return None
    if not isinstance(context, str) or not context.strip():
        return None
    if (
        not isinstance(answers, list)
        or not answers
        or not all(isinstance(a, str) and a for a in answers)
    ):
        return None
    raw_id = obj.get("id")
    sample_id = str(raw_id) if raw_id is not None else f"line-{lineno}"
    return Sample(id=sample_id, question=question, context=context, gold_answers=tuple(answers))


def _round_floats(value):
    if isinstance(value, float):
        return round(value, FLOAT_DECIMALS)
    if isinstance(value, list):
        return [_round_floats(v) for v in value]
    if isinstance(value, dict):
        return {k: _round_floats(v) for k, v in value.items()}
    return value


def canonical_record(record: dict) -> dict:
    """Fixed field order and 6-decimal floats, so serialized records are
    byte-stable across load/save cycles."""
    status = record.get("status")
    if status not in STATUSES:
        raise ValueError(f"record {record.get('id')!r} has unknown status {status!r}")

    answers = record.get("answers") or {}
    regions = record.get("sufficient_regions") or []
    nk = record.get("necessary_keywords") or []
    calls = record.get("calls") or {}
    faith = record.get("faithfulness")

    out = {
        "id": record["id"],
        "status": status,
        "retrieval_hard": record.get("retrieval_hard"),
        "answers": {
            "no_context": answers.get("no_context"),
            "original": answers.get("original"),
        },
        "sufficient_regions": [
            {
                "part_index": r["part_index"],
                "char_span": list(r["char_span"]),
                "text": r["text"],
            }
            for r in regions
        ],
        "necessary_keywords": [
            {
                "part_index": entry["part_index"],
                "groups": [
                    {
                        "group_index": g["group_index"],
                        "char_span": list(g["char_span"]),
                        "text": g["text"],
                    }
                    for g in entry["groups"]
                ],
            }
            for entry in nk
        ],
        "model_keywords": list(record.get("model_keywords") or []),
        "model_thought": record.get("model_thought") or "",
        "faithfulness": None,
        "calls": {
            "no_context": calls.get("no_context", 0),
            "original_context": calls.get("original_context", 0),
            "sr": calls.get("sr", 0),
            "nk": calls.get("nk", 0),
            "cache_hits": calls.get("cache_hits", 0),
            "total": calls.get("total", 0),
        },
    }
    if faith is not None:
        out["faithfulness"] = {
            "f_i": faith["f_i"],
            "argmax_part_index": faith["argmax_part_index"],
            "regions": [
                {
                    "part_index": r["part_index"],
                    "f_sr": r["f_sr"],
                    "f_nk": r["f_nk"],
                    "combined": r["combined"],
                }
                for r in faith["regions"]
            ],
        }
    return _round_floats(out)


def save_results(path: str | Path, records: Sequence[dict]) -> None:
    """Write result records as canonical JSONL, one record per sample."""
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(canonical_record(record), ensure_ascii=False) + "\n")


def append_result(path: str | Path, record: dict) -> None:
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(json.dumps(canonical_record(record), ensure_ascii=False) + "\n")


def load_results(path: str | Path) -> list[dict]:
    return read_jsonl(path)


def read_jsonl(path: str | Path) -> list[dict]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                rows.append(json.loads(line))
    return rows


def write_jsonl(path: str | Path, rows: Sequence[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, ensure_ascii=False) + "\n")
