"""Confidence scores for parsed detections from per-token probabilities.

A generated sequence arrives as a token trace: the text split into the
fragments the model emitted, each with its conditional probability. For
every detection in the parsed sequence we take the product of probabilities
over the label's tokens (label score) and over the four coordinate numerals'
tokens (localization score), then combine the two as a weighted geometric
mean. Products are accumulated in natural-log space.

Delimiter characters (brackets, commas, hyphens, '&') contribute to no
score on their own; a token that straddles a field boundary counts fully
toward every field it touches.
"""
from __future__ import annotations

import json
import math
from bisect import bisect_right
from dataclasses import dataclass, replace
from typing import Iterable, Iterator, Sequence

from . import codec
from .codec import ParsedSegment, PredictionSet, SequenceOrder

PROB_FLOOR = 1e-30  # substituted for zero probabilities at ingest


class ScoringError(ValueError):
    """Base class for scoring failures."""


class AlignmentError(ScoringError):
    """Token fragments could not be aligned with the parsed detections."""


@dataclass(frozen=True)
class PromptContext:
    """The visual reference and instruction a sequence was generated for."""

    image_ref: str
    instruction: str

    def __post_init__(self):
        if not self.instruction:
            raise ScoringError("instruction must be non-empty")


@dataclass(frozen=True)
class TokenTrace:
    """Generated text as (fragment, conditional probability) pairs.

    Fragment concatenation is the full generated sequence. Probabilities
    must lie in (0, 1]; zero probabilities are rejected here and should be
    floored (see PROB_FLOOR) by whatever produced the trace. Empty fragments
    are rejected so that any character range maps to a contiguous token run.
    """

    tokens: tuple[tuple[str, float], ...]
    context: PromptContext

    def __post_init__(self):
        for i, (fragment, prob) in enumerate(self.tokens):
            if not fragment:
                raise ScoringError(f"token {i} has an empty fragment")
            if not 0.0 < prob <= 1.0:
                raise ScoringError(f"token {i} probability {prob!r} outside (0, 1]")

    @property
    def text(self) -> str:
        return "".join(fragment for fragment, _ in self.tokens)

    def __len__(self) -> int:
        return len(self.tokens)


@dataclass(frozen=True)
class TokenSpan:
    """Half-open run of token indices belonging to one field."""

    start: int
    stop: int

    def __post_init__(self):
        if self.start < 0 or self.stop <= self.start:
            raise ScoringError(f"empty or negative token span [{self.start}, {self.stop})")

    def indices(self) -> range:
        return range(self.start, self.stop)


@dataclass(frozen=True)
class DetectionSpans:
    """Token spans of one detection: its label and four coordinates."""

    label_span: TokenSpan
    coord_spans: tuple[TokenSpan, TokenSpan, TokenSpan, TokenSpan]

    def __post_init__(self):
        if len(self.coord_spans) != 4:
            raise ScoringError("exactly four coordinate spans required")


@dataclass(frozen=True)
class ScoringConfig:
    """Controls for combining label and localization scores.

    ``q`` is the geometric-mean exponent on the label score. With both
    toggles off every detection gets ``default_score``.
    """

    q: float = 0.5
    use_label_score: bool = True
    use_loc_score: bool = True
    default_score: float = 0.99

    def __post_init__(self):
        if not 0.0 <= self.q <= 1.0:
            raise ScoringError(f"q={self.q!r} outside [0, 1]")
        if not 0.0 < self.default_score <= 1.0:
            raise ScoringError(f"default_score {self.default_score!r} outside (0, 1]")


@dataclass(frozen=True)
class ScoreBreakdown:
    label_score: float
    loc_score: float
    final_score: float


def sequence_prob(trace: TokenTrace) -> float:
    """Joint probability of the whole generated sequence."""
    if not trace.tokens:
        raise ScoringError("cannot score an empty trace")
    return math.exp(sum(math.log(p) for _, p in trace.tokens))


def _span_log_prob(trace: TokenTrace, span: TokenSpan) -> float:
    if span.stop > len(trace.tokens):
        raise ScoringError(f"span {span} exceeds trace length {len(trace.tokens)}")
    return sum(math.log(trace.tokens[j][1]) for j in span.indices())


def label_score(trace: TokenTrace, span: TokenSpan) -> float:
    """Product of conditional probabilities over the label's tokens."""
    return math.exp(_span_log_prob(trace, span))


def loc_score(trace: TokenTrace, coord_spans: Sequence[TokenSpan]) -> float:
    """Product over the four coordinates of their span probabilities.

    A token shared between two coordinate spans contributes its full
    probability to each.
    """
    if len(coord_spans) != 4:
        raise ScoringError("loc_score requires exactly four coordinate spans")
    return math.exp(sum(_span_log_prob(trace, s) for s in coord_spans))


def confidence(label: float, loc: float, config: ScoringConfig) -> ScoreBreakdown:
    """Combine label and localization scores per the config toggles."""
    for name, value in (("label", label), ("loc", loc)):
        if not 0.0 < value <= 1.0:
            raise ScoringError(f"{name} score {value!r} outside (0, 1]")
    if config.use_label_score and config.use_loc_score:
        final = label**config.q * loc ** (1.0 - config.q)
    elif config.use_loc_score:
        final = loc
    elif config.use_label_score:
        final = label
    else:
        final = config.default_score
    return ScoreBreakdown(label_score=label, loc_score=loc, final_score=final)


def _token_starts(trace: TokenTrace) -> list[int]:
    starts = []
    pos = 0
    for fragment, _ in trace.tokens:
        starts.append(pos)
        pos += len(fragment)
    return starts


def _char_range_to_span(starts: list[int], text_len: int, a: int, b: int) -> TokenSpan:
    """Minimal contiguous token run whose fragments intersect chars [a, b)."""
    if not starts or a >= b or a < 0 or b > text_len:
        raise AlignmentError(f"character range [{a}, {b}) maps to no tokens")
    first = bisect_right(starts, a) - 1      # token containing char a
    last = bisect_right(starts, b - 1) - 1   # token containing char b-1
    return TokenSpan(first, last + 1)


def align_spans(
    trace: TokenTrace, parsed: PredictionSet, order: SequenceOrder
) -> list[DetectionSpans]:
    """Locate each detection's label and coordinate tokens in the trace.

    The trace text must strict-parse to exactly ``parsed``. Character
    extents come from the parser; each extent is mapped to every token whose
    fragment intersects it, so a token overlapping a boundary is assigned to
    both neighboring fields with its full probability.
    """
    text = trace.text
    try:
        segments = codec.parse_segments(text, order)
    except codec.ParseError as exc:
        raise AlignmentError(f"trace text does not parse: {exc}") from exc

    if segments is None:
        if not parsed.is_none:
            raise AlignmentError("trace text is the sentinel but parsed is not")
        return []
    reparsed = PredictionSet.of(seg.detection for seg in segments)
    if reparsed != parsed:
        raise AlignmentError("parsed predictions do not match the trace text")

    starts = _token_starts(trace)
    text_len = len(text)
    spans = []
    for seg in segments:
        label = _char_range_to_span(starts, text_len, *seg.label_chars)
        coords = tuple(
            _char_range_to_span(starts, text_len, a, b) for a, b in seg.coord_chars
        )
        spans.append(DetectionSpans(label_span=label, coord_spans=coords))
    return spans


def scored_detections(
    trace: TokenTrace,
    order: SequenceOrder,
    config: ScoringConfig = ScoringConfig(),
) -> list[tuple[codec.Detection, ScoreBreakdown]]:
    """Parse, align, and score a trace; sorted by final score descending.

    Ties keep the original sequence position (earlier detections first).
    Raises ParseError/AlignmentError on malformed traces; the caller handles
    the sentinel before calling (see ``score_trace``).
    """
    segments = codec.parse_segments(trace.text, order)
    if segments is None:
        return []
    parsed = PredictionSet.of(seg.detection for seg in segments)
    spans = align_spans(trace, parsed, order)
    scored = []
    for position, (seg, span) in enumerate(zip(segments, spans)):
        breakdown = confidence(
            label_score(trace, span.label_span),
            loc_score(trace, span.coord_spans),
            config,
        )
        det = replace(seg.detection, score=breakdown.final_score)
        scored.append((position, det, breakdown))
    scored.sort(key=lambda item: (-item[2].final_score, item[0]))
    return [(det, breakdown) for _, det, breakdown in scored]


def score_trace(
    trace: TokenTrace,
    order: SequenceOrder,
    config: ScoringConfig = ScoringConfig(),
) -> PredictionSet:
    """Score every detection in a trace and return them ranked by confidence."""
    if trace.text.strip() == codec.NONE_SENTINEL:
        return PredictionSet.none_sentinel()
    return PredictionSet.of(det for det, _ in scored_detections(trace, order, config))


# --- JSON Lines interchange -------------------------------------------------

def trace_to_json(trace: TokenTrace) -> dict:
    return {
        "image_id": trace.context.image_ref,
        "instruction": trace.context.instruction,
        "tokens": [{"text": t, "prob": p} for t, p in trace.tokens],
    }


def trace_from_json(obj: dict, floor_zero_probs: bool = True) -> TokenTrace:
    """Build a TokenTrace from its record form.

    Producers occasionally emit exact zeros for saturated tokens; with
    ``floor_zero_probs`` those are replaced by PROB_FLOOR instead of being
    rejected. Negative or >1 probabilities are always errors.
    """
    try:
        context = PromptContext(str(obj["image_id"]), str(obj["instruction"]))
        raw = obj["tokens"]
    except KeyError as exc:
        raise ScoringError(f"trace record missing field {exc}") from None
    tokens = []
    for entry in raw:
        try:
            text, prob = str(entry["text"]), float(entry["prob"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ScoringError(f"bad token entry: {exc}") from None
        if prob == 0.0 and floor_zero_probs:
            prob = PROB_FLOOR
        tokens.append((text, prob))
    return TokenTrace(tuple(tokens), context)


def read_traces(lines: Iterable[str]) -> Iterator[TokenTrace]:
    for n, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            yield trace_from_json(json.loads(line))
        except json.JSONDecodeError as exc:
            raise ScoringError(f"line {n}: invalid JSON: {exc}") from None
