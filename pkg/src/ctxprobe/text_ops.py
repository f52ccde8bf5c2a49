"""Word-level text operations: tokenization, balanced splitting, group masking,
and normalized keyword containment.

Everything here is deterministic and pure; these primitives underpin both the
perturbation procedures (region splitting, group masking) and the keyword
alignment scores.
"""

from __future__ import annotations

import string
from dataclasses import dataclass

MASK_TOKEN = "_"

# ASCII punctuation plus the unicode quotes/dashes that show up in Wikipedia text.
_PUNCT = set(string.punctuation) | set("‘’“”—–…")


class InvalidParameter(ValueError):
    """Raised when a split/mask parameter is out of range."""


def tokenize(text: str) -> list[str]:
    """Split text on runs of whitespace; punctuation stays attached to words."""
    return text.split()


def normalized_text(text: str) -> str:
    """Whitespace-normalized form: tokens joined by single spaces."""
    return " ".join(tokenize(text))


@dataclass(frozen=True)
class Region:
    """One contiguous slice of a split context.

    ``char_span`` indexes into the whitespace-normalized parent text, so the
    regions of one parent tile it exactly.
    """

    parent_id: str
    part_index: int
    words: tuple[str, ...]
    char_span: tuple[int, int]

    @property
    def text(self) -> str:
        return " ".join(self.words)


@dataclass(frozen=True)
class MaskGroup:
    """A contiguous word group within a region, the unit that gets masked."""

    region: Region
    group_index: int
    words: tuple[str, ...]
    char_span: tuple[int, int]

    @property
    def text(self) -> str:
        return " ".join(self.words)


def _balanced_bounds(n: int, parts: int) -> list[tuple[int, int]]:
    """Start/end word indices for splitting n words into min(parts, n) runs.

    The first n % parts runs get the extra word, so run sizes differ by at
    most one and order is preserved.
    """
    count = min(parts, n)
    if count == 0:
        return []
    base, extra = divmod(n, count)
    bounds = []
    start = 0
    for i in range(count):
        size = base + (1 if i < extra else 0)
        bounds.append((start, start + size))
        start += size
    return bounds


def _char_span(words: tuple[str, ...], start: int, end: int, offset: int = 0) -> tuple[int, int]:
    # Offsets into " ".join(words): each earlier word contributes len + 1 separator.
    begin = sum(len(w) + 1 for w in words[:start])
    length = len(" ".join(words[start:end]))
    return (offset + begin, offset + begin + length)


def split_into_parts(words: list[str] | tuple[str, ...], p: int, parent_id: str = "") -> list[Region]:
    """Split a word sequence into up to p balanced, order-preserving regions."""
    if p < 1:
        raise InvalidParameter(f"p must be >= 1, got {p}")
    seq = tuple(words)
    regions = []
    for i, (a, b) in enumerate(_balanced_bounds(len(seq), p)):
        regions.append(
            Region(
                parent_id=parent_id,
                part_index=i,
                words=seq[a:b],
                char_span=_char_span(seq, a, b),
            )
        )
    return regions


def split_into_groups(region: Region, q: int) -> list[MaskGroup]:
    """Partition a region's words into up to q balanced mask groups."""
    if q < 1:
        raise InvalidParameter(f"q must be >= 1, got {q}")
    groups = []
    for i, (a, b) in enumerate(_balanced_bounds(len(region.words), q)):
        groups.append(
            MaskGroup(
                region=region,
                group_index=i,
                words=region.words[a:b],
                char_span=_char_span(region.words, a, b, offset=region.char_span[0]),
            )
        )
    return groups


def mask_group(region: Region, group_index: int, q: int) -> str:
    """Region text with the selected word group replaced by a single mask token.

    The whole group collapses to one "_", so the result has
    ``len(region.words) - len(group.words) + 1`` words.
    """
    if not region.words:
        raise InvalidParameter("cannot mask an empty region")
    bounds = _balanced_bounds(len(region.words), q)
    if not 0 <= group_index < len(bounds):
        raise InvalidParameter(
            f"group_index {group_index} out of range for {len(bounds)} groups"
        )
    a, b = bounds[group_index]
    masked = list(region.words[:a]) + [MASK_TOKEN] + list(region.words[b:])
    return " ".join(masked)


def _normalize_word(word: str) -> str:
    return "".join(ch for ch in word.lower() if ch not in _PUNCT)


def keyword_occurrences(haystack: str, keyword: str) -> list[tuple[int, int]]:
    """Char spans (into the whitespace-normalized haystack) where the keyword
    occurs as a contiguous word-bounded run, ignoring case and punctuation.

    Punctuation-only tokens in the haystack are transparent: "August , 11"
    still matches "august 11". Returned spans cover the original tokens.
    """
    needle = [w for w in (_normalize_word(t) for t in tokenize(keyword)) if w]
    if not needle:
        return []
    tokens = tokenize(haystack)
    # (normalized word, original token index) with punctuation-only tokens dropped
    hay = [(w, i) for i, w in enumerate(_normalize_word(t) for t in tokens) if w]
    if len(hay) < len(needle):
        return []

    starts = []
    pos = 0
    for t in tokens:
        starts.append(pos)
        pos += len(t) + 1

    spans = []
    for i in range(len(hay) - len(needle) + 1):
        if all(hay[i + j][0] == needle[j] for j in range(len(needle))):
            first = hay[i][1]
            last = hay[i + len(needle) - 1][1]
            spans.append((starts[first], starts[last] + len(tokens[last])))
    return spans


def contains_keyword(haystack: str, keyword: str) -> bool:
    """True iff the normalized keyword occurs word-bounded in the normalized
    haystack. Keywords that normalize to nothing never match."""
    return bool(keyword_occurrences(haystack, keyword))
