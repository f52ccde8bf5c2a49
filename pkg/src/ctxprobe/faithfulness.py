"""Scoring how well the model's self-reported keywords line up with the
causally important context parts.

Per region: a 0/1 sufficiency hit (some keyword appears in the region) and a
necessity fraction (share of necessary word groups containing a keyword).
Per sample: the best region's average of the two. Per corpus: the mean.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from .dataset_io import STATUS_OK
from .explain import ExplanationResult
from .text_ops import MaskGroup, Region, contains_keyword


class NotScorable(ValueError):
    """The explanation did not complete, so no faithfulness score exists."""


@dataclass(frozen=True)
class RegionFaithfulness:
    region: Region
    f_sr: int
    f_nk: float
    hits: tuple[int, ...]

    @property
    def combined(self) -> float:
        return (self.f_sr + self.f_nk) / 2


@dataclass(frozen=True)
class SampleFaithfulness:
    sample_id: str
    f_i: float
    argmax_region: Region
    per_region: tuple[RegionFaithfulness, ...]

    def to_dict(self) -> dict:
        return {
            "f_i": self.f_i,
            "argmax_part_index": self.argmax_region.part_index,
            "regions": [
                {
                    "part_index": r.region.part_index,
                    "f_sr": r.f_sr,
                    "f_nk": r.f_nk,
                    "combined": r.combined,
                }
                for r in self.per_region
            ],
        }


@dataclass(frozen=True)
class CorpusFaithfulness:
    f: float | None
    n_scored: int
    sample_ids: tuple[str, ...]


def f_sr(region: Region, keywords: Sequence[str]) -> int:
    """1 iff any model keyword occurs in the region text."""
    return int(any(contains_keyword(region.text, k) for k in keywords))


def f_nk(region: Region, nk: Sequence[MaskGroup], keywords: Sequence[str]) -> float:
    """Fraction of necessary groups whose text contains some model keyword."""
    if not nk:
        raise ValueError("f_nk is undefined for an empty group list")
    hits = group_hits(nk, keywords)
    return sum(hits) / len(hits)


def group_hits(nk: Sequence[MaskGroup], keywords: Sequence[str]) -> tuple[int, ...]:
    return tuple(int(any(contains_keyword(g.text, k) for k in keywords)) for g in nk)


def region_faithfulness(
    region: Region, nk: Sequence[MaskGroup], keywords: Sequence[str]
) -> RegionFaithfulness:
    hits = group_hits(nk, keywords)
    if not hits:
        raise ValueError("region has no necessary groups to score")
    return RegionFaithfulness(
        region=region,
        f_sr=f_sr(region, keywords),
        f_nk=sum(hits) / len(hits),
        hits=hits,
    )


def sample_faithfulness(result: ExplanationResult) -> SampleFaithfulness:
    """Best combined score over the regions that have necessary keywords.

    Regions with an empty group set carry no defined necessity score and are
    excluded; ties pick the earliest region.
    """
    if result.status != STATUS_OK:
        raise NotScorable(f"sample {result.sample_id} has status {result.status!r}")
    scored = [
        region_faithfulness(region, groups, result.self_keywords)
        for region, groups in sorted(result.nk_by_region.items(), key=lambda kv: kv[0].part_index)
        if groups
    ]
    if not scored:
        raise NotScorable(f"sample {result.sample_id} has no scorable regions")
    best = max(scored, key=lambda r: r.combined)
    return SampleFaithfulness(
        sample_id=result.sample_id,
        f_i=best.combined,
        argmax_region=best.region,
        per_region=tuple(scored),
    )


def corpus_faithfulness(scores: Sequence[SampleFaithfulness]) -> CorpusFaithfulness:
    if not scores:
        return CorpusFaithfulness(f=None, n_scored=0, sample_ids=())
    return CorpusFaithfulness(
        f=sum(s.f_i for s in scores) / len(scores),
        n_scored=len(scores),
        sample_ids=tuple(s.sample_id for s in scores),
    )
