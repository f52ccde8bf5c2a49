"""Command-line pipeline: filter -> explain -> score -> report, runnable end
to end (``run``) or one stage at a time. Per-sample failures never abort a
run; they land in the record's status and the stage funnel.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from . import dataset_io
from .answer_eval import AnswerEvaluator, EvalConfig, HashedNgramEmbedder, RemoteEmbedder
from .dataset_io import STATUS_OK, Dataset, EmptyDataset, Sample, load_dataset
from .explain import (
    NK_ON_ALL,
    NK_ON_FIRST,
    ExplainConfig,
    explain_sample,
    explanation_from_record,
    is_retrieval_hard,
    to_record,
)
from .faithfulness import corpus_faithfulness, sample_faithfulness
from .provider import (
    CallLedger,
    HttpChatModel,
    MockChatModel,
    ProviderConfig,
    ProviderError,
    load_mock_fixture,
)
from .report import (
    render_report_html,
    render_sample_html,
    render_stats_table,
    stage_stats_from_records,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_DATASET = 2
EXIT_PROVIDER = 3

DEFAULT_FEW_SHOT: tuple[tuple[str, str], ...] = ()


class SetupError(RuntimeError):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _load_dataset(args) -> Dataset:
    try:
        dataset = load_dataset(args.dataset)
    except (OSError, EmptyDataset) as exc:
        raise SetupError(f"cannot load dataset: {exc}", EXIT_DATASET) from exc
    if args.limit is not None:
        dataset = Dataset(samples=dataset.samples[: args.limit], skipped=dataset.skipped)
    return dataset


def _build_model(args, out_dir: Path):
    cache_dir = Path(args.cache_dir) if args.cache_dir else out_dir / "cache"
    if args.mock:
        try:
            entries = load_mock_fixture(args.mock)
        except (OSError, ValueError, json.JSONDecodeError) as exc:
            raise SetupError(f"cannot load mock fixture: {exc}", EXIT_PROVIDER) from exc
        return MockChatModel(entries, cache_dir=cache_dir)
    if not args.model or not args.base_url:
        raise SetupError("--model and --base-url are required without --mock", EXIT_PROVIDER)
    if not os.environ.get(args.api_key_env):
        raise SetupError(f"credential variable {args.api_key_env} is not set", EXIT_PROVIDER)
    config = ProviderConfig(
        base_url=args.base_url,
        model_id=args.model,
        temperature=args.temperature,
        max_retries=args.max_retries,
        cache_dir=cache_dir,
        request_timeout=args.timeout,
        api_key_env=args.api_key_env,
    )
    return HttpChatModel(config)


def _build_evaluator(args) -> AnswerEvaluator:
    config = EvalConfig(
        fuzzy_threshold=args.fuzzy_threshold, embed_threshold=args.embed_threshold
    )
    if args.embed_url:
        provider = RemoteEmbedder(args.embed_url, args.embed_model, api_key_env=args.embed_key_env)
    else:
        provider = HashedNgramEmbedder()
    return AnswerEvaluator(config, provider)


def _load_few_shot(args) -> tuple[tuple[str, str], ...]:
    if not args.few_shot:
        return DEFAULT_FEW_SHOT
    try:
        with open(args.few_shot, encoding="utf-8") as fh:
            demos = json.load(fh)
        return tuple((d["user"], d["assistant"]) for d in demos)
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise SetupError(f"cannot load few-shot demos: {exc}", EXIT_ERROR) from exc


def _build_explain_config(args) -> ExplainConfig:
    return ExplainConfig(p=args.p, q=args.q, run_nk_on=args.nk_on, few_shot=_load_few_shot(args))


def _echo_config(args, out_dir: Path) -> None:
    effective = {
        "dataset": str(args.dataset),
        "out": str(out_dir),
        "provider": {
            "mock": str(args.mock) if args.mock else None,
            "model": args.model,
            "base_url": args.base_url,
            "api_key_env": args.api_key_env,
            "temperature": args.temperature,
            "max_retries": args.max_retries,
            "timeout": args.timeout,
            "cache_dir": str(Path(args.cache_dir) if args.cache_dir else out_dir / "cache"),
        },
        "eval": {
            "fuzzy_threshold": args.fuzzy_threshold,
            "embed_threshold": args.embed_threshold,
            "embed_url": args.embed_url,
            "embed_model": args.embed_model,
        },
        "explain": {"p": args.p, "q": args.q, "nk_on": args.nk_on, "few_shot": str(args.few_shot) if args.few_shot else None},
        "concurrency": args.concurrency,
        "limit": args.limit,
        "resume": args.resume,
    }
    (out_dir / "config.json").write_text(
        json.dumps(effective, indent=2, ensure_ascii=False) + "\n", encoding="utf-8"
    )


def _run_explanations(dataset, model, evaluator, explain_cfg, args, out_dir: Path, with_scores: bool) -> list[dict]:
    """Explain every sample, appending records as they complete (in dataset
    order) so interrupted runs can resume by id."""
    results_path = out_dir / "results.jsonl"
    done_ids: set[str] = set()
    if args.resume and results_path.exists():
        done_ids = {r["id"] for r in dataset_io.load_results(results_path)}
    else:
        results_path.write_text("", encoding="utf-8")

    todo = [s for s in dataset if s.id not in done_ids]

    def worker(sample: Sample) -> dict:
        explanation = explain_sample(sample, model, evaluator, explain_cfg)
        record = to_record(explanation)
        if with_scores and explanation.status == STATUS_OK:
            record["faithfulness"] = sample_faithfulness(explanation).to_dict()
        return record

    with ThreadPoolExecutor(max_workers=args.concurrency) as pool:
        for record in pool.map(worker, todo):
            dataset_io.append_result(results_path, record)

    return dataset_io.load_results(results_path)


def _model_label(args) -> str:
    if args.mock:
        return "mock"
    return args.model or "model"


def _write_report(dataset, records: list[dict], stats_by_model, out_dir: Path, cards_for: list[dict] | None = None) -> None:
    samples_by_id = {s.id: s for s in dataset}
    text, table_html = render_stats_table(stats_by_model)
    (out_dir / "stats.txt").write_text(text, encoding="utf-8")
    (out_dir / "stats.html").write_text(table_html + "\n", encoding="utf-8")

    cards = []
    for record in cards_for if cards_for is not None else records:
        sample = samples_by_id.get(record["id"])
        if sample is None:
            logger.warning("record %r has no matching dataset sample, skipped", record["id"])
            continue
        explanation = explanation_from_record(record)
        score = sample_faithfulness(explanation) if record["status"] == STATUS_OK else None
        cards.append(render_sample_html(sample, explanation, score))
    (out_dir / "report.html").write_text(render_report_html(cards, table_html), encoding="utf-8")


def _print_summary(records: list[dict], stats_by_model) -> None:
    text, _ = render_stats_table(stats_by_model)
    print(text)
    by_status: dict[str, int] = {}
    for record in records:
        by_status[record["status"]] = by_status.get(record["status"], 0) + 1
    print("statuses:", json.dumps(by_status, sort_keys=True))
    f_values = [r["faithfulness"]["f_i"] for r in records if r.get("faithfulness")]
    if f_values:
        print(f"faithfulness F = {sum(f_values) / len(f_values):.3f} over {len(f_values)} samples")
    else:
        print("faithfulness F: no scored samples")


def cmd_run(args) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    dataset = _load_dataset(args)
    model = _build_model(args, out_dir)
    evaluator = _build_evaluator(args)
    explain_cfg = _build_explain_config(args)
    _echo_config(args, out_dir)

    records = _run_explanations(dataset, model, evaluator, explain_cfg, args, out_dir, with_scores=True)
    stats = stage_stats_from_records({_model_label(args): records})
    _write_report(dataset, records, stats, out_dir)
    _print_summary(records, stats)
    return EXIT_OK


def cmd_filter_hard(args) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    dataset = _load_dataset(args)
    model = _build_model(args, out_dir)
    evaluator = _build_evaluator(args)
    few_shot = _load_few_shot(args)

    def worker(sample: Sample) -> dict:
        ledger = CallLedger()
        try:
            hard, answer = is_retrieval_hard(sample, model, evaluator, ledger, few_shot=few_shot)
        except ProviderError as exc:
            logger.warning("sample %s: provider error (%s)", sample.id, exc)
            return {"id": sample.id, "retrieval_hard": None, "no_context_answer": None}
        return {"id": sample.id, "retrieval_hard": hard, "no_context_answer": answer}

    with ThreadPoolExecutor(max_workers=args.concurrency) as pool:
        rows = list(pool.map(worker, dataset.samples))
    path = out_dir / "retrieval_hard.jsonl"
    dataset_io.write_jsonl(path, rows)
    hard_count = sum(1 for r in rows if r["retrieval_hard"] is True)
    print(f"{hard_count} of {len(rows)} samples are retrieval-hard ({path})")
    return EXIT_OK


def cmd_explain(args) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    dataset = _load_dataset(args)
    model = _build_model(args, out_dir)
    evaluator = _build_evaluator(args)
    explain_cfg = _build_explain_config(args)
    _echo_config(args, out_dir)

    records = _run_explanations(dataset, model, evaluator, explain_cfg, args, out_dir, with_scores=False)
    stats = stage_stats_from_records({_model_label(args): records})
    _print_summary(records, stats)
    return EXIT_OK


def cmd_score(args) -> int:
    path = Path(args.results)
    try:
        records = dataset_io.load_results(path)
    except OSError as exc:
        raise SetupError(f"cannot load results: {exc}", EXIT_DATASET) from exc
    scores = []
    for record in records:
        if record["status"] != STATUS_OK:
            continue
        if record.get("faithfulness") is None or args.rescore:
            score = sample_faithfulness(explanation_from_record(record))
            record["faithfulness"] = score.to_dict()
    dataset_io.save_results(args.out_file or path, records)
    scored = [r["faithfulness"]["f_i"] for r in records if r.get("faithfulness")]
    corpus = corpus_faithfulness_from_values(scored)
    if corpus is None:
        print("no scorable samples")
    else:
        print(f"faithfulness F = {corpus:.3f} over {len(scored)} samples")
    return EXIT_OK


def corpus_faithfulness_from_values(values: list[float]) -> float | None:
    return sum(values) / len(values) if values else None


def cmd_report(args) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    dataset = _load_dataset(args)

    records_by_model: dict[str, list[dict]] = {}
    for spec_arg in args.results:
        name, _, path = spec_arg.rpartition("=")
        if not name:
            name = Path(path).stem
        try:
            records_by_model[name] = dataset_io.load_results(path)
        except OSError as exc:
            raise SetupError(f"cannot load results {path!r}: {exc}", EXIT_DATASET) from exc

    stats = stage_stats_from_records(records_by_model)
    first = next(iter(records_by_model.values()))
    _write_report(dataset, first, stats, out_dir, cards_for=first)
    text, _ = render_stats_table(stats)
    print(text)
    print(f"report written to {out_dir / 'report.html'}")
    return EXIT_OK


def _add_common_flags(sub: argparse.ArgumentParser, with_dataset: bool = True) -> None:
    if with_dataset:
        sub.add_argument("--dataset", required=True, help="input JSONL with question/context/answers")
    sub.add_argument("--out", default="out", help="output directory")
    sub.add_argument("--limit", type=int, default=None, help="process at most N samples")
    sub.add_argument("--concurrency", type=int, default=1, help="parallel samples in flight")


def _add_provider_flags(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--model", default=None, help="model identifier for the chat endpoint")
    sub.add_argument("--base-url", default=None, help="chat endpoint base URL")
    sub.add_argument("--api-key-env", default="LLM_API_KEY", help="env var holding the API key")
    sub.add_argument("--mock", default=None, help="scripted mock fixture (JSON) instead of HTTP")
    sub.add_argument("--temperature", type=float, default=0.0)
    sub.add_argument("--max-retries", type=int, default=3)
    sub.add_argument("--timeout", type=float, default=60.0)
    sub.add_argument("--cache-dir", default=None, help="response cache (default: <out>/cache)")
    sub.add_argument("--few-shot", default=None, help="JSON file with demonstration pairs")


def _add_eval_flags(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--fuzzy-threshold", type=int, default=90)
    sub.add_argument("--embed-threshold", type=float, default=0.9)
    sub.add_argument("--embed-url", default=None, help="remote embedding endpoint (default: offline n-gram embedder)")
    sub.add_argument("--embed-model", default="", help="embedding model identifier")
    sub.add_argument("--embed-key-env", default="EMBED_API_KEY")


def _add_explain_flags(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--p", type=int, default=3, help="number of candidate context regions")
    sub.add_argument("--q", type=int, default=5, help="number of mask groups per region")
    sub.add_argument("--nk-on", choices=[NK_ON_ALL, NK_ON_FIRST], default=NK_ON_ALL)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ctxprobe",
        description="Explain context-dependent QA answers of a black-box model "
        "and score how faithful its self-reported keywords are.",
    )
    subs = parser.add_subparsers(dest="command", required=True)

    run = subs.add_parser("run", help="full pipeline: explain, score, report")
    _add_common_flags(run)
    _add_provider_flags(run)
    _add_eval_flags(run)
    _add_explain_flags(run)
    group = run.add_mutually_exclusive_group()
    group.add_argument("--resume", action="store_true", help="skip samples already in results.jsonl")
    group.add_argument("--force", action="store_true", help="recompute everything (default)")
    run.set_defaults(func=cmd_run)

    filt = subs.add_parser("filter-hard", help="no-context answer check only")
    _add_common_flags(filt)
    _add_provider_flags(filt)
    _add_eval_flags(filt)
    filt.set_defaults(func=cmd_filter_hard, few_shot=None)

    explain = subs.add_parser("explain", help="explanations without scores or report")
    _add_common_flags(explain)
    _add_provider_flags(explain)
    _add_eval_flags(explain)
    _add_explain_flags(explain)
    group = explain.add_mutually_exclusive_group()
    group.add_argument("--resume", action="store_true")
    group.add_argument("--force", action="store_true")
    explain.set_defaults(func=cmd_explain)

    score = subs.add_parser("score", help="fill faithfulness scores into a results file")
    score.add_argument("--results", required=True, help="results.jsonl to score")
    score.add_argument("--out-file", default=None, help="write here instead of in place")
    score.add_argument("--rescore", action="store_true", help="recompute existing scores")
    score.set_defaults(func=cmd_score)

    report = subs.add_parser("report", help="render report.html and stats tables")
    _add_common_flags(report)
    report.add_argument(
        "--results",
        action="append",
        required=True,
        help="results file, optionally as name=path; repeat for multi-model stats",
    )
    report.set_defaults(func=cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except SetupError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
