"""Text codec for multi-object localization sequences.

A detection set is rendered as ``label-[x1,y1,x2,y2]`` segments joined by
``&``, or the bare word ``None`` when nothing is localized. Coordinates are
fractions of the image size quantized to a 0.001 grid and printed with
exactly three decimals. The parser is the exact inverse of the serializer on
well-formed text and offers a lenient mode that skips malformed segments
while recording diagnostics.
"""
from __future__ import annotations

import enum
import re
from dataclasses import dataclass
from typing import Iterable, Iterator, Sequence

NONE_SENTINEL = "None"
COORD_SCALE = 1000  # grid resolution: thousandths of image width/height

_NUMERAL_RE = re.compile(r"\d+(?:\.\d+)?")


class CodecError(ValueError):
    """Base class for codec failures."""


class ValidationError(CodecError):
    """A domain value violates its invariants."""


class SerializationError(CodecError):
    """The prediction set cannot be rendered as text."""


class ParseError(CodecError):
    """Strict parsing failed; ``offset`` is the character position."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (offset {offset})")
        self.offset = offset


class SequenceOrder(enum.Enum):
    """Field order of one serialized detection."""

    LABEL_FIRST = "label_first"   # label-[x1,y1,x2,y2]
    COORD_FIRST = "coord_first"   # [x1,y1,x2,y2]-label


def quantize_coord(value: float) -> int:
    """Snap a fraction in [0, 1] to the nearest thousandth, as an integer.

    Ties round away from zero. The rounding decision is made in exact
    rational arithmetic so it is correct for every representable input.
    """
    value = float(value)
    if not 0.0 <= value <= 1.0:
        raise ValidationError(f"coordinate {value!r} outside [0, 1]")
    num, den = value.as_integer_ratio()
    whole, rem = divmod(num * COORD_SCALE, den)
    if 2 * rem >= den:  # midpoint goes up; inputs are non-negative
        whole += 1
    return int(whole)


def _format_coord(thousandths: int) -> str:
    return f"{thousandths // COORD_SCALE}.{thousandths % COORD_SCALE:03d}"


@dataclass(frozen=True)
class NormBox:
    """Axis-aligned box in normalized coordinates, stored as thousandths.

    ``x1 <= x2`` and ``y1 <= y2``; degenerate (zero-width or zero-height)
    boxes are allowed because quantizing a sub-grid box can collapse it.
    """

    x1: int
    y1: int
    x2: int
    y2: int

    def __post_init__(self):
        for name in ("x1", "y1", "x2", "y2"):
            v = getattr(self, name)
            if not isinstance(v, int) or isinstance(v, bool):
                raise ValidationError(f"{name} must be an integer thousandth, got {v!r}")
            if not 0 <= v <= COORD_SCALE:
                raise ValidationError(f"{name}={v} outside [0, {COORD_SCALE}]")
        if self.x1 > self.x2 or self.y1 > self.y2:
            raise ValidationError(
                f"inverted box: ({self.x1},{self.y1},{self.x2},{self.y2})"
            )

    @classmethod
    def from_fractions(cls, x1: float, y1: float, x2: float, y2: float) -> "NormBox":
        """Build from raw fractions in [0, 1], quantizing each coordinate."""
        return cls(*(quantize_coord(v) for v in (x1, y1, x2, y2)))

    @classmethod
    def from_pixels(
        cls, box: Sequence[float], width: float, height: float
    ) -> "NormBox":
        """Normalize a pixel-space ``[x1, y1, x2, y2]`` box by the image size."""
        if width < 1 or height < 1:
            raise ValidationError(f"image size {width}x{height} invalid")
        x1, y1, x2, y2 = box
        fractions = (x1 / width, y1 / height, x2 / width, y2 / height)
        return cls.from_fractions(*(min(max(v, 0.0), 1.0) for v in fractions))

    def as_fractions(self) -> tuple[float, float, float, float]:
        s = COORD_SCALE
        return (self.x1 / s, self.y1 / s, self.x2 / s, self.y2 / s)


@dataclass(frozen=True)
class Detection:
    """One labeled box with an optional confidence in (0, 1]."""

    label: str
    box: NormBox
    score: float | None = None

    def __post_init__(self):
        if not self.label:
            raise ValidationError("label must be non-empty")
        if "&" in self.label:
            raise ValidationError(f"label {self.label!r} contains reserved '&'")
        if "\n" in self.label or "\r" in self.label:
            raise ValidationError(f"label {self.label!r} contains a newline")
        if self.score is not None and not 0.0 < self.score <= 1.0:
            raise ValidationError(f"score {self.score!r} outside (0, 1]")


@dataclass(frozen=True)
class PredictionSet:
    """Either an ordered list of detections or the absent-target sentinel.

    ``detections is None`` encodes the sentinel (serialized as ``None``);
    an empty tuple can only come out of a lenient parse and cannot be
    serialized.
    """

    detections: tuple[Detection, ...] | None

    @classmethod
    def of(cls, detections: Iterable[Detection]) -> "PredictionSet":
        return cls(tuple(detections))

    @classmethod
    def none_sentinel(cls) -> "PredictionSet":
        return cls(None)

    @property
    def is_none(self) -> bool:
        return self.detections is None


@dataclass(frozen=True)
class ParseDiagnostic:
    """One skipped segment in lenient mode."""

    offset: int        # character offset of the segment in the input text
    message: str
    segment: str


@dataclass(frozen=True)
class ParsedSegment:
    """A parsed detection plus the character extents of its fields.

    Character ranges are half-open ``[start, stop)`` offsets into the full
    input text: ``label_chars`` covers the label, ``coord_chars`` the four
    coordinate numerals (brackets, commas and delimiters excluded).
    """

    detection: Detection
    label_chars: tuple[int, int]
    coord_chars: tuple[tuple[int, int], ...]


class _SegmentError(Exception):
    def __init__(self, message: str, offset: int):
        super().__init__(message)
        self.message = message
        self.offset = offset


def _coord_block(block: str) -> tuple[list[float], list[tuple[int, int]]] | None:
    """Parse ``[a,b,c,d]`` into values and per-numeral local char ranges.

    Returns None unless the block is bracketed, has exactly four parts, and
    every part is an unsigned decimal numeral.
    """
    if len(block) < 2 or block[0] != "[" or block[-1] != "]":
        return None
    parts = block[1:-1].split(",")
    if len(parts) != 4:
        return None
    values: list[float] = []
    spans: list[tuple[int, int]] = []
    pos = 1  # skip the opening bracket
    for part in parts:
        if not _NUMERAL_RE.fullmatch(part):
            return None
        values.append(float(part))
        spans.append((pos, pos + len(part)))
        pos += len(part) + 1  # skip the comma (or closing bracket at the end)
    return values, spans


def _block_failure(block: str) -> str:
    """Best-effort reason why a candidate coordinate block is malformed."""
    if not block.startswith("["):
        return "missing coordinate block"
    if not block.endswith("]"):
        return "unterminated coordinate block"
    parts = block[1:-1].split(",")
    if len(parts) != 4:
        return f"coordinate block has {len(parts)} values, expected 4"
    return "non-numeric coordinate"


def _build_detection(
    label: str,
    values: Sequence[float],
    base: int,
    label_chars: tuple[int, int],
    coord_chars: Sequence[tuple[int, int]],
) -> ParsedSegment:
    if not label:
        raise _SegmentError("empty label", base)
    if "\n" in label or "\r" in label:
        raise _SegmentError("label contains a newline", base)
    quantized = [quantize_coord(min(max(v, 0.0), 1.0)) for v in values]
    x1, y1, x2, y2 = quantized
    if x1 > x2 or y1 > y2:
        raise _SegmentError("inverted box (x1 > x2 or y1 > y2)", base)
    det = Detection(label=label, box=NormBox(x1, y1, x2, y2))
    return ParsedSegment(det, label_chars, tuple(coord_chars))


def _parse_segment(segment: str, base: int, order: SequenceOrder) -> ParsedSegment:
    """Parse one ``&``-free segment; ``base`` is its offset in the full text."""
    if order is SequenceOrder.LABEL_FIRST:
        # The label/box boundary is the LAST "-[" that starts a well-formed
        # block reaching the end of the segment, so labels may contain
        # hyphens, brackets, and even whole box-like substrings.
        pos = segment.rfind("-[")
        while pos != -1:
            parsed = _coord_block(segment[pos + 1 :])
            if parsed is not None:
                values, local_spans = parsed
                block_base = base + pos + 1
                return _build_detection(
                    segment[:pos],
                    values,
                    base,
                    (base, base + pos),
                    [(block_base + s, block_base + e) for s, e in local_spans],
                )
            pos = segment.rfind("-[", 0, pos + 1)
        pos_any = segment.rfind("-[")
        if pos_any == -1:
            raise _SegmentError("missing coordinate block", base)
        raise _SegmentError(_block_failure(segment[pos_any + 1 :]), base + pos_any + 1)

    # Coord-first: the block is leftmost and closes at the first "]".
    if not segment.startswith("["):
        raise _SegmentError("missing coordinate block", base)
    end = segment.find("]")
    if end == -1:
        raise _SegmentError("unterminated coordinate block", base)
    block = segment[: end + 1]
    parsed = _coord_block(block)
    if parsed is None:
        raise _SegmentError(_block_failure(block), base)
    values, local_spans = parsed
    rest = segment[end + 1 :]
    if not rest.startswith("-"):
        raise _SegmentError("missing '-' between coordinates and label", base + end + 1)
    return _build_detection(
        rest[1:],
        values,
        base,
        (base + end + 2, base + len(segment)),
        [(base + s, base + e) for s, e in local_spans],
    )


def _split_segments(text: str) -> Iterator[tuple[str, int]]:
    """Yield (segment, offset) pairs; '&' is reserved so every one splits."""
    offset = 0
    for segment in text.split("&"):
        yield segment, offset
        offset += len(segment) + 1


def parse_segments(text: str, order: SequenceOrder) -> list[ParsedSegment] | None:
    """Strict parse that keeps character extents; None for the sentinel.

    Raises ParseError on the first malformed segment. Used by confidence
    scoring to align token probabilities with detection fields.
    """
    if text.strip() == NONE_SENTINEL:
        return None
    segments = []
    for segment, base in _split_segments(text):
        try:
            segments.append(_parse_segment(segment, base, order))
        except _SegmentError as exc:
            raise ParseError(exc.message, exc.offset) from None
    return segments


def parse(
    text: str, order: SequenceOrder, mode: str = "strict"
) -> tuple[PredictionSet, list[ParseDiagnostic]]:
    """Parse serialized text back into a PredictionSet.

    ``None`` (after trimming surrounding whitespace, case-sensitive) parses
    to the sentinel in both modes. Strict mode raises ParseError on the
    first malformed segment and is the exact inverse of ``serialize`` on its
    output. Lenient mode never raises: malformed segments are skipped with
    one diagnostic each, segment whitespace is tolerated, and the surviving
    detections are returned (possibly none).
    """
    if mode not in ("strict", "lenient"):
        raise ValueError(f"mode must be 'strict' or 'lenient', got {mode!r}")
    if text.strip() == NONE_SENTINEL:
        return PredictionSet.none_sentinel(), []
    if mode == "lenient" and not text.strip():
        return PredictionSet.of(()), []

    detections: list[Detection] = []
    diagnostics: list[ParseDiagnostic] = []
    for raw, base in _split_segments(text):
        segment, offset = raw, base
        if mode == "lenient":
            segment = raw.strip()
            offset = base + (len(raw) - len(raw.lstrip()))
        try:
            detections.append(_parse_segment(segment, offset, order).detection)
        except _SegmentError as exc:
            if mode == "strict":
                raise ParseError(exc.message, exc.offset) from None
            diagnostics.append(ParseDiagnostic(exc.offset, exc.message, raw))
    return PredictionSet.of(detections), diagnostics


def serialize(preds: PredictionSet, order: SequenceOrder) -> str:
    """Render a PredictionSet as sequence text.

    The sentinel renders as ``None``; detections render with three-decimal
    coordinates and are joined by ``&`` with no added whitespace. An empty
    detection list cannot be serialized.
    """
    if preds.is_none:
        return NONE_SENTINEL
    assert preds.detections is not None
    if not preds.detections:
        raise SerializationError("cannot serialize an empty detection list")
    parts = []
    for det in preds.detections:
        b = det.box
        block = f"[{_format_coord(b.x1)},{_format_coord(b.y1)},{_format_coord(b.x2)},{_format_coord(b.y2)}]"
        if order is SequenceOrder.LABEL_FIRST:
            parts.append(f"{det.label}-{block}")
        else:
            parts.append(f"{block}-{det.label}")
    return "&".join(parts)


# --- JSON Lines interchange -------------------------------------------------

@dataclass(frozen=True)
class SequenceRecord:
    """One serialized output attached to an image."""

    image_id: str
    sequence: str
    order: SequenceOrder = SequenceOrder.LABEL_FIRST

    def to_json(self) -> dict:
        return {
            "image_id": self.image_id,
            "sequence": self.sequence,
            "order": self.order.value,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "SequenceRecord":
        try:
            return cls(
                image_id=str(obj["image_id"]),
                sequence=str(obj["sequence"]),
                order=SequenceOrder(obj.get("order", "label_first")),
            )
        except (KeyError, ValueError) as exc:
            raise ValidationError(f"bad sequence record: {exc}") from None


def detections_to_json(image_id: str, preds: PredictionSet) -> dict:
    """Detection-record form: normalized boxes plus optional scores."""
    if preds.is_none:
        return {"image_id": image_id, "detections": None}
    assert preds.detections is not None
    return {
        "image_id": image_id,
        "detections": [
            {
                "label": d.label,
                "bbox_norm": list(d.box.as_fractions()),
                **({"score": d.score} if d.score is not None else {}),
            }
            for d in preds.detections
        ],
    }


def detections_from_json(obj: dict) -> tuple[str, PredictionSet]:
    try:
        image_id = str(obj["image_id"])
        raw = obj["detections"]
    except KeyError as exc:
        raise ValidationError(f"missing field {exc}") from None
    if raw is None:
        return image_id, PredictionSet.none_sentinel()
    dets = []
    for entry in raw:
        try:
            box = NormBox.from_fractions(*entry["bbox_norm"])
            dets.append(
                Detection(label=str(entry["label"]), box=box, score=entry.get("score"))
            )
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"bad detection entry: {exc}") from None
    return image_id, PredictionSet.of(dets)
