"""Rendering explanations as highlighted text and runs as stage-funnel tables.

Sufficient regions get a green background, necessary word groups a blue one
(blue wins where they overlap), and occurrences of the model's own keywords
are bold on top of either. One segment computation feeds both the HTML and
the ANSI serializers.
"""

from __future__ import annotations

import html as html_lib
from dataclasses import dataclass
from typing import Sequence

from .dataset_io import (
    STATUS_NO_NECESSARY_KEYWORDS,
    STATUS_NO_SUFFICIENT_REGION,
    STATUS_OK,
)
from .explain import ExplanationResult
from .faithfulness import SampleFaithfulness
from .text_ops import keyword_occurrences, normalized_text

KIND_SUFFICIENT = "sufficient"
KIND_NECESSARY = "necessary"
KIND_MODEL_KEYWORD = "model_keyword"

GREEN_BG = "#c8e6c9"
BLUE_BG = "#bbdefb"
_ANSI_CODES = {KIND_SUFFICIENT: "42", KIND_NECESSARY: "44"}
_HTML_COLORS = {KIND_SUFFICIENT: GREEN_BG, KIND_NECESSARY: BLUE_BG}


class InvariantViolation(ValueError):
    """Stats that break the stage funnel ordering are refused, not rendered."""


@dataclass(frozen=True)
class HighlightSpan:
    start: int
    end: int
    kind: str


@dataclass(frozen=True)
class StageStats:
    retrieval_hard: int
    correct_with_context: int
    with_sufficient_regions: int
    with_necessary_keywords: int
    common_successful: int
    faithfulness_common: float | None = None

    def validate(self) -> None:
        funnel = (
            self.retrieval_hard,
            self.correct_with_context,
            self.with_sufficient_regions,
            self.with_necessary_keywords,
            self.common_successful,
        )
        if any(count < 0 for count in funnel):
            raise InvariantViolation(f"negative stage count in {funnel}")
        if any(a < b for a, b in zip(funnel, funnel[1:])):
            raise InvariantViolation(f"stage counts must be non-increasing, got {funnel}")


def _merge_spans(spans: list[tuple[int, int]]) -> list[tuple[int, int]]:
    merged: list[tuple[int, int]] = []
    for start, end in sorted(spans):
        if merged and start <= merged[-1][1]:
            merged[-1] = (merged[-1][0], max(merged[-1][1], end))
        else:
            merged.append((start, end))
    return merged


def build_highlight_spans(explanation: ExplanationResult, context: str) -> list[HighlightSpan]:
    """Spans (into the whitespace-normalized context) for the three layers."""
    spans: list[HighlightSpan] = []
    for region in explanation.sufficient_regions:
        spans.append(HighlightSpan(*region.char_span, KIND_SUFFICIENT))
    necessary = [g.char_span for groups in explanation.nk_by_region.values() for g in groups]
    for start, end in _merge_spans([tuple(s) for s in necessary]):
        spans.append(HighlightSpan(start, end, KIND_NECESSARY))
    keyword_spans: list[tuple[int, int]] = []
    for keyword in explanation.self_keywords:
        keyword_spans.extend(keyword_occurrences(context, keyword))
    for start, end in _merge_spans(keyword_spans):
        spans.append(HighlightSpan(start, end, KIND_MODEL_KEYWORD))
    return spans


def highlight_segments(
    text: str, spans: Sequence[HighlightSpan]
) -> list[tuple[str, str | None, bool]]:
    """Flatten overlapping layers into (segment, color kind, bold) runs.

    Necessary beats sufficient within a segment; bold composes with both.
    """
    cuts = {0, len(text)}
    for span in spans:
        cuts.add(max(0, min(span.start, len(text))))
        cuts.add(max(0, min(span.end, len(text))))
    ordered = sorted(cuts)
    segments = []
    for a, b in zip(ordered, ordered[1:]):
        if a == b:
            continue
        active = {s.kind for s in spans if s.start <= a and b <= s.end}
        if KIND_NECESSARY in active:
            color = KIND_NECESSARY
        elif KIND_SUFFICIENT in active:
            color = KIND_SUFFICIENT
        else:
            color = None
        segments.append((text[a:b], color, KIND_MODEL_KEYWORD in active))
    return segments


def _html_segment(text: str, color: str | None, bold: bool) -> str:
    escaped = html_lib.escape(text)
    styles = []
    if color:
        styles.append(f"background-color:{_HTML_COLORS[color]}")
    if bold:
        styles.append("font-weight:bold")
    if not styles:
        return escaped
    return f'<span style="{";".join(styles)}">{escaped}</span>'


def _ansi_segment(text: str, color: str | None, bold: bool) -> str:
    codes = []
    if bold:
        codes.append("1")
    if color:
        codes.append(_ANSI_CODES[color])
    if not codes:
        return text
    return f"\x1b[{';'.join(codes)}m{text}\x1b[0m"


_FAILURE_NOTES = {
    STATUS_NO_SUFFICIENT_REGION: "no context part alone produced a correct answer",
    STATUS_NO_NECESSARY_KEYWORDS: "no masked word group flipped the answer",
}


def render_sample_html(sample, explanation: ExplanationResult, score: SampleFaithfulness | None) -> str:
    """Self-contained HTML card for one sample.

    For non-ok statuses this is a failure card naming the status; otherwise
    the context is shown with the full highlight markup plus the model's
    thought, keywords, answer, and the per-region score breakdown.
    """
    question = html_lib.escape(sample.question)
    if explanation.status != STATUS_OK:
        note = _FAILURE_NOTES.get(explanation.status, "")
        note_html = f" <span class=\"note\">({html_lib.escape(note)})</span>" if note else ""
        return (
            f'<div class="sample-card failure" id="sample-{html_lib.escape(sample.id)}">\n'
            f"<h3>{question}</h3>\n"
            f'<p class="status">Explanation failed: <strong>{html_lib.escape(explanation.status)}</strong>{note_html}</p>\n'
            "</div>"
        )

    context = normalized_text(sample.context)
    spans = build_highlight_spans(explanation, context)
    context_html = "".join(
        _html_segment(seg, color, bold) for seg, color, bold in highlight_segments(context, spans)
    )
    keywords = ", ".join(html_lib.escape(k) for k in explanation.self_keywords) or "(none)"
    rows = ""
    if score is not None:
        for rf in score.per_region:
            rows += (
                f"<tr><td>{rf.region.part_index}</td><td>{rf.f_sr}</td>"
                f"<td>{rf.f_nk:.3f}</td><td>{rf.combined:.3f}</td></tr>\n"
            )
    score_html = (
        f'<p class="score">Faithfulness f = <strong>{score.f_i:.3f}</strong> '
        f"(best region: part {score.argmax_region.part_index})</p>\n"
        '<table class="regions"><tr><th>part</th><th>sufficiency hit</th>'
        "<th>necessity fraction</th><th>combined</th></tr>\n" + rows + "</table>\n"
        if score is not None
        else ""
    )
    return (
        f'<div class="sample-card" id="sample-{html_lib.escape(sample.id)}">\n'
        f"<h3>{question}</h3>\n"
        f'<div class="context">{context_html}</div>\n'
        f'<p class="thought">Thought: {html_lib.escape(explanation.self_thought)}</p>\n'
        f'<p class="keywords">Model keywords: {keywords}</p>\n'
        f'<p class="answer">Answer: {html_lib.escape(explanation.original_answer or "")}</p>\n'
        f"{score_html}"
        "</div>"
    )


def render_sample_ansi(sample, explanation: ExplanationResult, score: SampleFaithfulness | None) -> str:
    """Terminal rendering of the same highlight layout."""
    lines = [f"Q: {sample.question}"]
    if explanation.status != STATUS_OK:
        lines.append(f"  explanation failed: {explanation.status}")
        return "\n".join(lines)
    context = normalized_text(sample.context)
    spans = build_highlight_spans(explanation, context)
    rendered = "".join(
        _ansi_segment(seg, color, bold) for seg, color, bold in highlight_segments(context, spans)
    )
    lines.append(rendered)
    lines.append(f"  keywords: {', '.join(explanation.self_keywords) or '(none)'}")
    lines.append(f"  answer: {explanation.original_answer}")
    if score is not None:
        lines.append(f"  faithfulness: {score.f_i:.3f}")
    return "\n".join(lines)


_STAT_ROWS = [
    ("Retrieval-hard samples", lambda s: str(s.retrieval_hard)),
    ("Correct with original context", lambda s: str(s.correct_with_context)),
    ("Sufficient regions found", lambda s: str(s.with_sufficient_regions)),
    ("Necessary keywords found", lambda s: str(s.with_necessary_keywords)),
    ("Common successful samples", lambda s: str(s.common_successful)),
    (
        "Faithfulness (common subset)",
        lambda s: f"{s.faithfulness_common:.3f}" if s.faithfulness_common is not None else "—",
    ),
]


def render_stats_table(stats_by_model: dict[str, StageStats]) -> tuple[str, str]:
    """Stage funnel as (plain text, HTML), one column per model."""
    for stats in stats_by_model.values():
        stats.validate()

    models = list(stats_by_model)
    header = ["Stage"] + models
    body = [[label] + [cell(stats_by_model[m]) for m in models] for label, cell in _STAT_ROWS]

    widths = [max(len(row[i]) for row in [header] + body) for i in range(len(header))]
    def fmt(row: list[str]) -> str:
        left = row[0].ljust(widths[0])
        rest = "  ".join(cell.rjust(widths[i + 1]) for i, cell in enumerate(row[1:]))
        return (left + "  " + rest).rstrip()

    rule = "-" * (sum(widths) + 2 * len(widths) - 2)
    text = "\n".join([fmt(header), rule] + [fmt(row) for row in body]) + "\n"

    head_html = "".join(f"<th>{html_lib.escape(h)}</th>" for h in header)
    rows_html = "\n".join(
        "<tr>" + "".join(f"<td>{html_lib.escape(cell)}</td>" for cell in row) + "</tr>"
        for row in body
    )
    table_html = f'<table class="stats">\n<tr>{head_html}</tr>\n{rows_html}\n</table>'
    return text, table_html


def stage_stats_from_records(records_by_model: dict[str, list[dict]]) -> dict[str, StageStats]:
    """Per-model funnel counts plus the cross-model common successful subset."""
    ok_ids = {
        model: {r["id"] for r in records if r["status"] == STATUS_OK}
        for model, records in records_by_model.items()
    }
    common: set[str] = set.intersection(*ok_ids.values()) if ok_ids else set()

    reached_sr = {STATUS_NO_SUFFICIENT_REGION, STATUS_NO_NECESSARY_KEYWORDS, STATUS_OK}
    reached_nk = {STATUS_NO_NECESSARY_KEYWORDS, STATUS_OK}
    out = {}
    for model, records in records_by_model.items():
        f_values = [
            r["faithfulness"]["f_i"]
            for r in records
            if r["id"] in common and r.get("faithfulness")
        ]
        out[model] = StageStats(
            retrieval_hard=sum(1 for r in records if r.get("retrieval_hard") is True),
            correct_with_context=sum(1 for r in records if r["status"] in reached_sr),
            with_sufficient_regions=sum(1 for r in records if r["status"] in reached_nk),
            with_necessary_keywords=sum(1 for r in records if r["status"] == STATUS_OK),
            common_successful=len(common),
            faithfulness_common=sum(f_values) / len(f_values) if f_values else None,
        )
    return out


_PAGE_TEMPLATE = """<!DOCTYPE html>
<html>
<head>
<meta charset="utf-8">
<title>Context explanation report</title>
<style>
body {{ font-family: sans-serif; max-width: 60em; margin: 2em auto; }}
.sample-card {{ border: 1px solid #ccc; border-radius: 6px; padding: 1em; margin: 1em 0; }}
.sample-card.failure {{ border-color: #e0b4b4; background: #fff6f6; }}
.context {{ line-height: 1.7; margin: 0.5em 0; }}
table {{ border-collapse: collapse; }}
td, th {{ border: 1px solid #ccc; padding: 0.25em 0.6em; text-align: right; }}
th:first-child, td:first-child {{ text-align: left; }}
</style>
</head>
<body>
<h1>Context explanation report</h1>
{stats}
{cards}
</body>
</html>
"""


def render_report_html(cards: Sequence[str], stats_html: str = "") -> str:
    return _PAGE_TEMPLATE.format(stats=stats_html, cards="\n".join(cards))
