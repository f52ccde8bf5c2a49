"""Per-sample explanation pipeline.

Four stages with early exit: (1) check the model actually needs the context,
(2) get the with-context answer and the model's self-reported keywords,
(3) find sufficient regions by answering from each context part alone,
(4) find necessary keyword groups by masking word groups inside each
sufficient region. Every stage's model calls are tallied in a ledger.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .answer_eval import AnswerEvaluator
from .dataset_io import (
    STATUS_NO_NECESSARY_KEYWORDS,
    STATUS_NO_SUFFICIENT_REGION,
    STATUS_NOT_RETRIEVAL_HARD,
    STATUS_OK,
    STATUS_PARSE_ERROR,
    STATUS_PROVIDER_ERROR,
    STATUS_WRONG_WITH_CONTEXT,
    Sample,
)
from .provider import (
    STAGE_NK,
    STAGE_NO_CONTEXT,
    STAGE_ORIGINAL_CONTEXT,
    STAGE_SR,
    CallLedger,
    ChatModel,
    ParseError,
    ProviderError,
    build_prompt,
    parse_response,
)
from .text_ops import MaskGroup, Region, mask_group, split_into_groups, split_into_parts, tokenize

NK_ON_ALL = "all_sufficient_regions"
NK_ON_FIRST = "first_sufficient_region"


@dataclass(frozen=True)
class ExplainConfig:
    p: int = 3
    q: int = 5
    run_nk_on: str = NK_ON_ALL
    few_shot: tuple[tuple[str, str], ...] = ()

    def __post_init__(self) -> None:
        if self.p < 1 or self.q < 1:
            raise ValueError("p and q must be >= 1")
        if self.run_nk_on not in (NK_ON_ALL, NK_ON_FIRST):
            raise ValueError(f"run_nk_on must be one of {NK_ON_ALL!r}, {NK_ON_FIRST!r}")


@dataclass
class ExplanationResult:
    """Outcome of the pipeline for one sample; exactly one status applies."""

    sample_id: str
    status: str
    retrieval_hard: bool | None = None
    self_thought: str = ""
    self_keywords: tuple[str, ...] = ()
    no_context_answer: str | None = None
    original_answer: str | None = None
    sufficient_regions: tuple[Region, ...] = ()
    nk_by_region: dict[Region, tuple[MaskGroup, ...]] = field(default_factory=dict)
    ledger: CallLedger = field(default_factory=CallLedger)


def _try_answer(raw: str) -> str | None:
    """Parsed short answer, or None when the output has no usable one.

    During region and mask probes an unparseable response counts as a wrong
    answer: a model that cannot produce the format has not demonstrated
    anything.
    """
    try:
        return parse_response(raw).answer
    except ParseError:
        return None


def is_retrieval_hard(
    sample: Sample,
    model: ChatModel,
    evaluator: AnswerEvaluator,
    ledger: CallLedger | None = None,
    few_shot: tuple[tuple[str, str], ...] = (),
) -> tuple[bool, str | None]:
    """Ask the question without any context; hard means the answer is wrong."""
    raw = model.complete(build_prompt(sample.question, None, few_shot), ledger, STAGE_NO_CONTEXT)
    answer = _try_answer(raw)
    if answer is None:
        return True, None
    verdict = evaluator.evaluate(sample.gold_answers, answer)
    return not verdict.correct, answer


def sufficient_regions(
    sample: Sample,
    model: ChatModel,
    evaluator: AnswerEvaluator,
    config: ExplainConfig | None = None,
    ledger: CallLedger | None = None,
) -> list[Region]:
    """Regions of the split context that alone still yield a correct answer."""
    config = config or ExplainConfig()
    candidates = split_into_parts(tokenize(sample.context), config.p, parent_id=sample.id)
    found = []
    for region in candidates:
        raw = model.complete(
            build_prompt(sample.question, region.text, config.few_shot), ledger, STAGE_SR
        )
        answer = _try_answer(raw)
        if answer is not None and evaluator.evaluate(sample.gold_answers, answer).correct:
            found.append(region)
    return found


def necessary_keywords(
    sample: Sample,
    region: Region,
    model: ChatModel,
    evaluator: AnswerEvaluator,
    config: ExplainConfig | None = None,
    ledger: CallLedger | None = None,
) -> list[MaskGroup]:
    """Word groups whose masking flips the region's answer to incorrect."""
    config = config or ExplainConfig()
    found = []
    for group in split_into_groups(region, config.q):
        masked = mask_group(region, group.group_index, config.q)
        raw = model.complete(
            build_prompt(sample.question, masked, config.few_shot), ledger, STAGE_NK
        )
        answer = _try_answer(raw)
        if answer is None or not evaluator.evaluate(sample.gold_answers, answer).correct:
            found.append(group)
    return found


def explain_sample(
    sample: Sample,
    model: ChatModel,
    evaluator: AnswerEvaluator,
    config: ExplainConfig | None = None,
) -> ExplanationResult:
    """Run all stages for one sample. Never raises for per-sample failures;
    the failure mode lands in the status field instead."""
    config = config or ExplainConfig()
    ledger = CallLedger()
    result = ExplanationResult(sample_id=sample.id, status=STATUS_PROVIDER_ERROR, ledger=ledger)

    # Stage 1: does the model need the context at all?
    try:
        hard, no_context_answer = is_retrieval_hard(
            sample, model, evaluator, ledger, few_shot=config.few_shot
        )
    except ProviderError:
        return result
    result.retrieval_hard = hard
    result.no_context_answer = no_context_answer
    if not hard:
        result.status = STATUS_NOT_RETRIEVAL_HARD
        return result

    # Stage 2: with-context answer; this is where the self-explanation
    # keywords come from.
    try:
        raw = model.complete(
            build_prompt(sample.question, sample.context, config.few_shot),
            ledger,
            STAGE_ORIGINAL_CONTEXT,
        )
    except ProviderError:
        return result
    try:
        response = parse_response(raw)
    except ParseError:
        result.status = STATUS_PARSE_ERROR
        return result
    result.self_thought = response.thought
    result.self_keywords = response.keywords
    result.original_answer = response.answer
    if not evaluator.evaluate(sample.gold_answers, response.answer).correct:
        result.status = STATUS_WRONG_WITH_CONTEXT
        return result

    # Stage 3: sufficient regions.
    try:
        regions = sufficient_regions(sample, model, evaluator, config, ledger)
    except ProviderError:
        return result
    result.sufficient_regions = tuple(regions)
    if not regions:
        result.status = STATUS_NO_SUFFICIENT_REGION
        return result

    # Stage 4: necessary keywords inside each (or only the first) region.
    targets = regions if config.run_nk_on == NK_ON_ALL else regions[:1]
    try:
        for region in targets:
            groups = necessary_keywords(sample, region, model, evaluator, config, ledger)
            result.nk_by_region[region] = tuple(groups)
    except ProviderError:
        result.status = STATUS_PROVIDER_ERROR
        return result
    if not any(result.nk_by_region.values()):
        result.status = STATUS_NO_NECESSARY_KEYWORDS
        return result

    result.status = STATUS_OK
    return result


def to_record(result: ExplanationResult) -> dict:
    """Result record dict (faithfulness left null; scoring fills it in)."""
    nk_entries = []
    for region in sorted(result.nk_by_region, key=lambda r: r.part_index):
        groups = result.nk_by_region[region]
        nk_entries.append(
            {
                "part_index": region.part_index,
                "groups": [
                    {
                        "group_index": g.group_index,
                        "char_span": list(g.char_span),
                        "text": g.text,
                    }
                    for g in groups
                ],
            }
        )
    return {
        "id": result.sample_id,
        "status": result.status,
        "retrieval_hard": result.retrieval_hard,
        "answers": {
            "no_context": result.no_context_answer,
            "original": result.original_answer,
        },
        "sufficient_regions": [
            {"part_index": r.part_index, "char_span": list(r.char_span), "text": r.text}
            for r in result.sufficient_regions
        ],
        "necessary_keywords": nk_entries,
        "model_keywords": list(result.self_keywords),
        "model_thought": result.self_thought,
        "faithfulness": None,
        "calls": result.ledger.to_dict(),
    }


def explanation_from_record(record: dict) -> ExplanationResult:
    """Rebuild the typed explanation from a saved record (spans and texts are
    stored, so no re-splitting or model access is needed)."""
    sample_id = record["id"]
    regions = tuple(
        Region(
            parent_id=sample_id,
            part_index=r["part_index"],
            words=tuple(r["text"].split()),
            char_span=tuple(r["char_span"]),
        )
        for r in record.get("sufficient_regions") or []
    )
    by_part = {r.part_index: r for r in regions}
    nk_by_region: dict[Region, tuple[MaskGroup, ...]] = {}
    for entry in record.get("necessary_keywords") or []:
        region = by_part[entry["part_index"]]
        nk_by_region[region] = tuple(
            MaskGroup(
                region=region,
                group_index=g["group_index"],
                words=tuple(g["text"].split()),
                char_span=tuple(g["char_span"]),
            )
            for g in entry["groups"]
        )
    calls = record.get("calls") or {}
    ledger = CallLedger(
        calls_no_context=calls.get("no_context", 0),
        calls_original_context=calls.get("original_context", 0),
        calls_sr=calls.get("sr", 0),
        calls_nk=calls.get("nk", 0),
        cache_hits=calls.get("cache_hits", 0),
    )
    answers = record.get("answers") or {}
    return ExplanationResult(
        sample_id=sample_id,
        status=record["status"],
        retrieval_hard=record.get("retrieval_hard"),
        self_thought=record.get("model_thought") or "",
        self_keywords=tuple(record.get("model_keywords") or ()),
        no_context_answer=answers.get("no_context"),
        original_answer=answers.get("original"),
        sufficient_regions=regions,
        nk_by_region=nk_by_region,
        ledger=ledger,
    )
