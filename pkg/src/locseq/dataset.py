"""Construction of the four-scenario localization instruction dataset.

Source annotations (referring expressions, category boxes, phrase groups,
negative-category lists) are filtered, paired with instruction templates,
and serialized into (instruction, target) samples. Targets use the label
first sequence grammar; the absent-target scenario emits the ``None``
sentinel. All sampling is driven by a per-record RNG seeded from the global
seed and the record id, so output is reproducible regardless of batching or
worker count.
"""
from __future__ import annotations

import enum
import hashlib
import json
import random
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

from . import codec
from .codec import Detection, NormBox, PredictionSet, SequenceOrder

MIN_LONGEST_EDGE = 250          # records below this are dropped outright
LARGE_AREA_MIN = 96.0**2        # pixel-area floor of the "large" bucket

PLACEHOLDER_EXPR = "<expr>"
PLACEHOLDER_IMAGE = "<image>"
PLACEHOLDER_CATEGORY_SET = "<category set>"
_PLACEHOLDERS = (PLACEHOLDER_EXPR, PLACEHOLDER_IMAGE, PLACEHOLDER_CATEGORY_SET)
_PLACEHOLDER_RE = re.compile(r"<[^<>\n]*>")

Box = tuple[float, float, float, float]


class DatasetError(ValueError):
    """Base class for dataset-construction failures."""


class TemplateError(DatasetError):
    """A template or its instantiation violates the placeholder rules."""


class Scenario(enum.Enum):
    SINGLE_REFERENT = "single_referent"          # one expression, one box
    ONE_CATEGORY_MULTI = "one_category_multi"    # one label, all its boxes
    NON_EXISTING = "non_existing"                # absent target, answer "None"
    MULTI_CATEGORY_MULTI = "multi_category_multi"  # category set, all boxes


@dataclass(frozen=True)
class Template:
    """Instruction template with placeholders.

    Single-referent, absent-target, and one-category templates carry exactly
    one ``<expr>``; multi-category templates exactly one ``<category set>``.
    ``<image>`` markers may appear anywhere and are stripped on
    instantiation. Any other ``<...>`` token is rejected.
    """

    text: str
    scenario: Scenario
    source_id: str = ""

    def __post_init__(self):
        if not self.text.strip():
            raise TemplateError("template text is empty")
        for found in _PLACEHOLDER_RE.findall(self.text):
            if found not in _PLACEHOLDERS:
                raise TemplateError(f"unknown placeholder {found!r} in {self.source_id or self.text!r}")
        n_expr = self.text.count(PLACEHOLDER_EXPR)
        n_catset = self.text.count(PLACEHOLDER_CATEGORY_SET)
        if self.scenario is Scenario.MULTI_CATEGORY_MULTI:
            if n_catset != 1 or n_expr != 0:
                raise TemplateError(
                    f"multi-category template needs exactly one {PLACEHOLDER_CATEGORY_SET!r}"
                )
        else:
            if n_expr != 1 or n_catset != 0:
                raise TemplateError(
                    f"{self.scenario.value} template needs exactly one {PLACEHOLDER_EXPR!r}"
                )


def instantiate_template(template: Template, labels: str | Sequence[str]) -> str:
    """Fill a template with one expression or a category list.

    ``<image>`` markers are removed and whitespace runs collapsed; category
    lists are joined with ", " and no punctuation is appended. The result
    must contain no remaining placeholder.
    """
    text = " ".join(template.text.replace(PLACEHOLDER_IMAGE, " ").split())
    if isinstance(labels, str):
        if PLACEHOLDER_EXPR not in text:
            raise TemplateError("template takes a category set, got a single expression")
        out = text.replace(PLACEHOLDER_EXPR, labels)
    else:
        if PLACEHOLDER_CATEGORY_SET not in text:
            raise TemplateError("template takes a single expression, got a category set")
        if not labels:
            raise TemplateError("category set is empty")
        out = text.replace(PLACEHOLDER_CATEGORY_SET, ", ".join(labels))
    for marker in _PLACEHOLDERS:
        if marker in out:
            raise TemplateError(f"instantiation left {marker!r} in {out!r}")
    return out


@dataclass(frozen=True)
class Referent:
    expr: str
    box: Box


@dataclass(frozen=True)
class LabeledBoxes:
    label: str
    boxes: tuple[Box, ...]


@dataclass(frozen=True)
class SourceRecord:
    """One source image's annotation payload (metadata only, no pixels)."""

    image_id: str
    width: int
    height: int
    referents: tuple[Referent, ...] = ()
    category_groups: tuple[LabeledBoxes, ...] = ()
    phrase_groups: tuple[LabeledBoxes, ...] = ()
    negative_labels: tuple[str, ...] = ()
    source: str = "unknown"
    record_id: str = ""

    def __post_init__(self):
        if not self.image_id:
            raise DatasetError("image_id must be non-empty")
        if self.width < 1 or self.height < 1:
            raise DatasetError(f"{self.image_id}: size {self.width}x{self.height} invalid")
        for box in self._all_boxes():
            x1, y1, x2, y2 = box
            if not (0 <= x1 <= x2 <= self.width and 0 <= y1 <= y2 <= self.height):
                raise DatasetError(f"{self.image_id}: box {box} outside image bounds")
        if not self.record_id:
            object.__setattr__(self, "record_id", self.image_id)

    def _all_boxes(self) -> Iterable[Box]:
        for r in self.referents:
            yield r.box
        for group in (*self.category_groups, *self.phrase_groups):
            yield from group.boxes

    @classmethod
    def from_json(cls, obj: Mapping) -> "SourceRecord":
        try:
            return cls(
                image_id=str(obj["image_id"]),
                width=int(obj["width"]),
                height=int(obj["height"]),
                referents=tuple(
                    Referent(str(r["expr"]), tuple(float(v) for v in r["bbox"]))
                    for r in obj.get("referents", ())
                ),
                category_groups=tuple(
                    LabeledBoxes(
                        str(g["label"]),
                        tuple(tuple(float(v) for v in b) for b in g["bboxes"]),
                    )
                    for g in obj.get("categories", ())
                ),
                phrase_groups=tuple(
                    LabeledBoxes(
                        str(g["phrase"]),
                        tuple(tuple(float(v) for v in b) for b in g["bboxes"]),
                    )
                    for g in obj.get("phrases", ())
                ),
                negative_labels=tuple(str(x) for x in obj.get("negative_categories", ())),
                source=str(obj.get("source", "unknown")),
                record_id=str(obj.get("record_id", "")),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise DatasetError(f"bad source record: {exc}") from None

    def to_json(self) -> dict:
        out: dict = {
            "image_id": self.image_id,
            "width": self.width,
            "height": self.height,
            "source": self.source,
            "record_id": self.record_id,
        }
        if self.referents:
            out["referents"] = [{"expr": r.expr, "bbox": list(r.box)} for r in self.referents]
        if self.category_groups:
            out["categories"] = [
                {"label": g.label, "bboxes": [list(b) for b in g.boxes]}
                for g in self.category_groups
            ]
        if self.phrase_groups:
            out["phrases"] = [
                {"phrase": g.label, "bboxes": [list(b) for b in g.boxes]}
                for g in self.phrase_groups
            ]
        if self.negative_labels:
            out["negative_categories"] = list(self.negative_labels)
        return out


@dataclass(frozen=True)
class ScenarioSample:
    """One instruction/target training record."""

    image_id: str
    scenario: Scenario
    instruction: str
    target: str
    source: str = "unknown"
    record_id: str = ""
    box_areas_px: tuple[float, ...] = ()

    def __post_init__(self):
        if any(marker in self.instruction for marker in _PLACEHOLDERS):
            raise DatasetError(f"instruction contains a residual placeholder: {self.instruction!r}")
        if (self.scenario is Scenario.NON_EXISTING) != (self.target == codec.NONE_SENTINEL):
            raise DatasetError(
                f"{self.scenario.value} sample must have target "
                f"{codec.NONE_SENTINEL!r} exactly when the target is absent"
            )

    def to_json(self) -> dict:
        return {
            "image_id": self.image_id,
            "scenario": self.scenario.value,
            "instruction": self.instruction,
            "target": self.target,
            "source": self.source,
            "record_id": self.record_id,
            "box_areas_px": list(self.box_areas_px),
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "ScenarioSample":
        try:
            return cls(
                image_id=str(obj["image_id"]),
                scenario=Scenario(obj["scenario"]),
                instruction=str(obj["instruction"]),
                target=str(obj["target"]),
                source=str(obj.get("source", "unknown")),
                record_id=str(obj.get("record_id", "")),
                box_areas_px=tuple(float(a) for a in obj.get("box_areas_px", ())),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise DatasetError(f"bad sample record: {exc}") from None


@dataclass
class DroppedRecord:
    reason: str       # machine-readable: unreadable | too-small | size-mismatch
    detail: str
    image_id: str | None = None


@dataclass
class FilterResult:
    kept: list[SourceRecord]
    dropped: list[DroppedRecord]


def filter_images(
    records: Iterable[Mapping | SourceRecord],
    size_probe: Callable[[str], tuple[int, int] | None] | Mapping[str, tuple[int, int]] | None = None,
) -> FilterResult:
    """Partition records into kept and dropped-with-reason.

    Drops, in this precedence: records that fail to deserialize or violate
    invariants (``unreadable``), records whose longest edge is below
    MIN_LONGEST_EDGE (``too-small``), and records whose declared size
    disagrees with the ``size_probe``'s answer (``size-mismatch``). The
    probe, when given, maps an image id to its actual (width, height); ids
    it cannot answer are left unchecked. A bad record never aborts the batch.
    """
    if isinstance(size_probe, Mapping):
        probe_map = size_probe
        size_probe = lambda image_id: probe_map.get(image_id)  # noqa: E731
    kept: list[SourceRecord] = []
    dropped: list[DroppedRecord] = []
    for raw in records:
        if isinstance(raw, SourceRecord):
            record = raw
        else:
            try:
                record = SourceRecord.from_json(raw)
            except DatasetError as exc:
                image_id = raw.get("image_id") if isinstance(raw, Mapping) else None
                dropped.append(DroppedRecord("unreadable", str(exc), image_id))
                continue
        longest = max(record.width, record.height)
        if longest < MIN_LONGEST_EDGE:
            dropped.append(
                DroppedRecord(
                    "too-small",
                    f"longest edge {longest} < {MIN_LONGEST_EDGE}",
                    record.image_id,
                )
            )
            continue
        if size_probe is not None:
            actual = size_probe(record.image_id)
            if actual is not None and tuple(actual) != (record.width, record.height):
                dropped.append(
                    DroppedRecord(
                        "size-mismatch",
                        f"declared {record.width}x{record.height}, actual {actual[0]}x{actual[1]}",
                        record.image_id,
                    )
                )
                continue
        kept.append(record)
    return FilterResult(kept, dropped)


def _record_rng(seed: int, record_id: str) -> random.Random:
    digest = hashlib.sha256(f"{seed}:{record_id}".encode()).digest()
    return random.Random(int.from_bytes(digest[:16], "big"))


def _target_and_areas(
    labeled_boxes: Sequence[tuple[str, Box]], width: int, height: int
) -> tuple[str, tuple[float, ...]]:
    dets = [
        Detection(label, NormBox.from_pixels(box, width, height))
        for label, box in labeled_boxes
    ]
    target = codec.serialize(PredictionSet.of(dets), SequenceOrder.LABEL_FIRST)
    areas = tuple((b[2] - b[0]) * (b[3] - b[1]) for _, b in labeled_boxes)
    return target, areas


@dataclass
class BuildResult:
    samples: list[ScenarioSample]
    diagnostics: list[str]


def build_scenario(
    records: Iterable[SourceRecord],
    scenario: Scenario,
    templates: Sequence[Template],
    seed: int,
    *,
    category_set_mode: str = "per_image",
    all_categories: Sequence[str] | None = None,
    deduplicate: bool = True,
) -> BuildResult:
    """Assemble instruction samples for one scenario.

    Sample layout per scenario: single-referent yields one sample per
    (expression, box); one-category yields one sample per labeled group
    (phrase groups first, then category groups) targeting all of its boxes;
    multi-category yields one sample per image concatenating every category
    annotation, with the instruction's category set drawn from the image
    (default) or from ``all_categories`` when ``category_set_mode`` is
    ``"dataset"``; the absent-target scenario yields one sample per negative
    label with target ``None``. Templates are drawn uniformly by a
    per-record RNG derived from (seed, record id), so output depends only on
    the input order, never on batching. Records without usable payload are
    skipped with a diagnostic; so is any sample whose label the sequence
    grammar cannot carry (reserved characters).
    """
    templates = list(templates)
    if not templates:
        raise DatasetError(f"no templates supplied for {scenario.value}")
    for t in templates:
        if t.scenario is not scenario:
            raise TemplateError(
                f"template {t.source_id or t.text!r} is for {t.scenario.value}, not {scenario.value}"
            )
    if category_set_mode not in ("per_image", "dataset"):
        raise DatasetError(f"category_set_mode {category_set_mode!r} invalid")
    if category_set_mode == "dataset" and not all_categories:
        raise DatasetError("category_set_mode='dataset' requires all_categories")

    samples: list[ScenarioSample] = []
    diagnostics: list[str] = []
    for record in records:
        rng = _record_rng(seed, record.record_id)

        def pick_template() -> Template:
            return templates[rng.randrange(len(templates))]

        def emit(instruction: str, target: str, areas: tuple[float, ...]):
            samples.append(
                ScenarioSample(
                    image_id=record.image_id,
                    scenario=scenario,
                    instruction=instruction,
                    target=target,
                    source=record.source,
                    record_id=record.record_id,
                    box_areas_px=areas,
                )
            )

        try:
            if scenario is Scenario.SINGLE_REFERENT:
                if not record.referents:
                    diagnostics.append(f"{record.image_id}: no referent payload; skipped")
                    continue
                for ref in record.referents:
                    instruction = instantiate_template(pick_template(), ref.expr)
                    target, areas = _target_and_areas(
                        [(ref.expr, ref.box)], record.width, record.height
                    )
                    emit(instruction, target, areas)

            elif scenario is Scenario.ONE_CATEGORY_MULTI:
                groups = [*record.phrase_groups, *record.category_groups]
                if not groups:
                    diagnostics.append(f"{record.image_id}: no phrase/category payload; skipped")
                    continue
                for group in groups:
                    if not group.boxes:
                        diagnostics.append(
                            f"{record.image_id}: group {group.label!r} has no boxes; skipped"
                        )
                        continue
                    instruction = instantiate_template(pick_template(), group.label)
                    target, areas = _target_and_areas(
                        [(group.label, b) for b in group.boxes],
                        record.width,
                        record.height,
                    )
                    emit(instruction, target, areas)

            elif scenario is Scenario.MULTI_CATEGORY_MULTI:
                pairs = [
                    (group.label, box)
                    for group in record.category_groups
                    for box in group.boxes
                ]
                if not pairs:
                    diagnostics.append(f"{record.image_id}: no category payload; skipped")
                    continue
                if category_set_mode == "per_image":
                    seen: list[str] = []
                    for label, _ in pairs:
                        if label not in seen:
                            seen.append(label)
                    category_set = seen
                else:
                    category_set = list(all_categories or ())
                instruction = instantiate_template(pick_template(), category_set)
                target, areas = _target_and_areas(pairs, record.width, record.height)
                emit(instruction, target, areas)

            else:  # NON_EXISTING
                if not record.negative_labels:
                    diagnostics.append(f"{record.image_id}: no negative labels; skipped")
                    continue
                for label in record.negative_labels:
                    instruction = instantiate_template(pick_template(), label)
                    emit(instruction, codec.NONE_SENTINEL, ())
        except (codec.CodecError, TemplateError) as exc:
            diagnostics.append(f"{record.image_id}: {exc}; record skipped")
            continue

    if deduplicate:
        seen_keys = set()
        unique = []
        for s in samples:
            key = (s.image_id, s.instruction, s.target)
            if key not in seen_keys:
                seen_keys.add(key)
                unique.append(s)
        samples = unique
    return BuildResult(samples, diagnostics)


def balance_large_objects(
    samples: Sequence[ScenarioSample], seed: int
) -> list[ScenarioSample]:
    """Cap large-object samples at a 1:1 ratio with the small/medium ones.

    A sample counts as large when any of its boxes reaches the large area
    bucket. All small/medium samples are kept; large ones are subsampled
    down to the small/medium count (all kept if already fewer). Output
    preserves the input order.
    """
    large_indices = [
        i
        for i, s in enumerate(samples)
        if any(area >= LARGE_AREA_MIN for area in s.box_areas_px)
    ]
    n_rest = len(samples) - len(large_indices)
    if len(large_indices) <= n_rest:
        return list(samples)
    rng = random.Random(seed)
    keep_large = set(rng.sample(large_indices, n_rest))
    large_set = set(large_indices)
    return [
        s
        for i, s in enumerate(samples)
        if i not in large_set or i in keep_large
    ]


@dataclass(frozen=True)
class AttributeLexicon:
    """Descriptor vocabulary for composing fine-grained negative referents."""

    colors: tuple[str, ...] = ()
    positions: tuple[str, ...] = ()
    clothing: tuple[str, ...] = ()
    categories: tuple[str, ...] = ()

    @classmethod
    def from_json(cls, obj: Mapping) -> "AttributeLexicon":
        return cls(
            colors=tuple(obj.get("colors", ())),
            positions=tuple(obj.get("positions", ())),
            clothing=tuple(obj.get("clothing", ())),
            categories=tuple(obj.get("categories", ())),
        )

    @classmethod
    def load(cls, path: str | Path) -> "AttributeLexicon":
        return cls.from_json(json.loads(Path(path).read_text()))


def _collides(candidate: str, positives: Sequence[str]) -> bool:
    c = candidate.lower()
    for p in positives:
        q = p.lower()
        if q and (q == c or q in c or c in q):
            return True
    return False


def compose_negatives(
    positive_labels: Sequence[str],
    lexicon: AttributeLexicon,
    seed: int,
    count: int,
) -> tuple[list[str], list[str]]:
    """Compose attribute-qualified referents absent from the positives.

    Candidates pair a lexicon category with one descriptor ("a white cat",
    "the dog in the top left corner", "a person wearing a scarf"); catalog
    categories that collide with a positive label are excluded up front, and
    every composed text is rejected if it matches a positive exactly or by
    substring in either direction. Returns up to ``count`` negatives plus a
    diagnostic when the combination space runs out.
    """
    diagnostics: list[str] = []
    usable = [c for c in lexicon.categories if not _collides(c, positive_labels)]
    candidates: list[str] = []
    for category in usable:
        candidates.extend(f"a {color} {category}" for color in lexicon.colors)
        candidates.extend(f"the {category} in the {pos}" for pos in lexicon.positions)
        candidates.extend(f"a {category} wearing a {item}" for item in lexicon.clothing)
    rng = random.Random(seed)
    rng.shuffle(candidates)
    out: list[str] = []
    for candidate in candidates:
        if len(out) == count:
            break
        if _collides(candidate, positive_labels) or candidate in out:
            continue
        out.append(candidate)
    if len(out) < count:
        diagnostics.append(
            f"combination space exhausted: composed {len(out)} of {count} negatives"
        )
    return out, diagnostics


# --- template fixtures -------------------------------------------------------

def load_templates(directory: str | Path, scenario: Scenario) -> list[Template]:
    """Read one scenario's templates from ``<scenario>.txt`` in a directory.

    Plain text, one template per line; blank lines are skipped.
    """
    path = Path(directory) / f"{scenario.value}.txt"
    if not path.is_file():
        raise DatasetError(f"template file {path} not found")
    templates = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        templates.append(Template(line, scenario, source_id=f"{path.name}:{lineno}"))
    if not templates:
        raise DatasetError(f"template file {path} is empty")
    return templates


def default_template_dir() -> Path:
    return Path(__file__).parent / "fixtures" / "templates"


def default_lexicon_path() -> Path:
    return Path(__file__).parent / "fixtures" / "attribute_lexicon.json"
