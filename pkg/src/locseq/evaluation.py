"""Evaluation protocols: IoU, referring-expression accuracy, detection
metrics over the 0.50:0.05:0.95 threshold range, and the two phrase-grounding
recall protocols.

Detection metrics follow the standard protocol family used with the MSCOCO
benchmark: per category and IoU threshold, predictions sorted by confidence
are greedily matched to ground truth, average precision is read off a
101-point interpolated precision/recall curve, and size buckets (small,
medium, large) are handled by ignoring out-of-bucket ground truth and the
unmatched detections whose own area falls outside the bucket.
"""
from __future__ import annotations

import json
import math
from bisect import bisect_left
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

from .codec import Detection, NormBox, PredictionSet, SequenceOrder, parse

DEFAULT_SCORE = 0.99  # substituted when a prediction carries no confidence

IOU_THRESHOLDS = (0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95)
RECALL_POINTS = tuple(i / 100 for i in range(101))

# area buckets in squared pixels: [low, high)
AREA_RANGES = {
    "all": (0.0, math.inf),
    "small": (0.0, 32.0**2),
    "medium": (32.0**2, 96.0**2),
    "large": (96.0**2, math.inf),
}


class EvalInputError(ValueError):
    """The evaluation inputs are inconsistent or malformed."""


@dataclass(frozen=True)
class PixelBox:
    """Axis-aligned box in absolute pixel coordinates (continuous geometry)."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if self.x1 > self.x2 or self.y1 > self.y2:
            raise EvalInputError(
                f"inverted box ({self.x1},{self.y1},{self.x2},{self.y2})"
            )

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)


@dataclass(frozen=True)
class Annotation:
    """One ground-truth object; ``area`` defaults to the box area."""

    label: str
    box: PixelBox
    area: float

    def __post_init__(self):
        if not self.label:
            raise EvalInputError("annotation label must be non-empty")
        if not self.area > 0:
            raise EvalInputError(f"annotation area must be positive, got {self.area}")


@dataclass(frozen=True)
class PhraseGroup:
    """All ground-truth boxes one caption phrase refers to."""

    phrase: str
    boxes: tuple[PixelBox, ...]

    def __post_init__(self):
        if not self.boxes:
            raise EvalInputError(f"phrase {self.phrase!r} has no boxes")


@dataclass(frozen=True)
class GroundTruthImage:
    image_id: str
    width: int
    height: int
    annotations: tuple[Annotation, ...] = ()
    phrases: tuple[PhraseGroup, ...] = ()

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise EvalInputError(
                f"{self.image_id}: image size {self.width}x{self.height} invalid"
            )


@dataclass
class EvalReport:
    """Aggregated metric results; unset sections stay None.

    All stored values are fractions in [0, 1]; rendering as percentages is
    the CLI's job. ``per_category`` maps each ground-truth label to its AP
    averaged over IoU thresholds.
    """

    mean_ap: float | None = None
    ap50: float | None = None
    ap75: float | None = None
    ap_small: float | None = None
    ap_medium: float | None = None
    ap_large: float | None = None
    ar100: float | None = None
    rec_accuracy: float | None = None
    grounding_any_recall: float | None = None
    grounding_merged_recall: float | None = None
    per_category: dict[str, float] = field(default_factory=dict)
    diagnostics: list[str] = field(default_factory=list)

    _FRACTION_FIELDS = (
        "mean_ap", "ap50", "ap75", "ap_small", "ap_medium", "ap_large",
        "ar100", "rec_accuracy", "grounding_any_recall", "grounding_merged_recall",
    )

    def __post_init__(self):
        for name in self._FRACTION_FIELDS:
            v = getattr(self, name)
            if v is not None and not 0.0 <= v <= 1.0:
                raise EvalInputError(f"{name}={v} outside [0, 1]")

    def to_json(self) -> dict:
        out = {
            "mAP": self.mean_ap,
            "AP50": self.ap50,
            "AP75": self.ap75,
            "AP_S": self.ap_small,
            "AP_M": self.ap_medium,
            "AP_L": self.ap_large,
            "AR100": self.ar100,
            "rec_accuracy": self.rec_accuracy,
            "grounding_any_recall": self.grounding_any_recall,
            "grounding_merged_recall": self.grounding_merged_recall,
            "per_category": dict(self.per_category),
            "diagnostics": list(self.diagnostics),
        }
        return out


def denormalize(box: NormBox, width: float, height: float) -> PixelBox:
    """Scale a normalized box to pixel space, clamped to the image bounds."""
    if width < 1 or height < 1:
        raise EvalInputError(f"image size {width}x{height} invalid")
    fx1, fy1, fx2, fy2 = box.as_fractions()
    return PixelBox(
        min(fx1 * width, width),
        min(fy1 * height, height),
        min(fx2 * width, width),
        min(fy2 * height, height),
    )


def iou(a: PixelBox, b: PixelBox) -> float:
    """Intersection over union; 0 when the union has no area."""
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    inter = iw * ih if iw > 0 and ih > 0 else 0.0
    union = a.area + b.area - inter
    return inter / union if union > 0 else 0.0


def rec_accuracy(
    predictions: Sequence[PixelBox | None],
    gts: Sequence[PixelBox],
    threshold: float = 0.5,
) -> float:
    """Fraction of samples whose predicted box reaches IoU >= threshold.

    One ground-truth box per sample; a None prediction (no output, or the
    absent-target sentinel) counts as incorrect.
    """
    if not gts:
        raise EvalInputError("rec_accuracy needs at least one sample")
    if len(predictions) != len(gts):
        raise EvalInputError(
            f"{len(predictions)} predictions for {len(gts)} ground truths"
        )
    hits = sum(
        1 for p, g in zip(predictions, gts) if p is not None and iou(p, g) >= threshold
    )
    return hits / len(gts)


def best_detection(preds: PredictionSet) -> Detection | None:
    """Highest-scoring detection (ties keep sequence order); None if absent."""
    if preds.is_none or not preds.detections:
        return None
    return max(
        preds.detections,
        key=lambda d: (d.score if d.score is not None else DEFAULT_SCORE),
    )


# --- detection metrics -------------------------------------------------------

def _greedy_match(
    iou_matrix: Sequence[Sequence[float]],
    scan_order: Sequence[int],
    gt_ignore: Sequence[bool],
    threshold: float,
) -> list[int]:
    """Match detections (row order) to ground truth; -1 means unmatched.

    Matching contract, applied per detection in order:
      * only unmatched ground truths with IoU >= threshold qualify;
      * ground truths are scanned non-ignored first (input order within each
        group) and the first one with the strictly greatest IoU wins;
      * once a non-ignored match is held, ignored ground truths are not
        considered, so a detection prefers real ground truth over ignored
        even at lower IoU.
    """
    taken = [False] * len(gt_ignore)
    result = []
    for ious in iou_matrix:
        best = -1
        best_iou = threshold
        for g in scan_order:
            if taken[g]:
                continue
            if best != -1 and not gt_ignore[best] and gt_ignore[g]:
                break
            v = ious[g]
            if best == -1:
                if v >= threshold:
                    best, best_iou = g, v
            elif v > best_iou:
                best, best_iou = g, v
        if best != -1:
            taken[best] = True
        result.append(best)
    return result


def _average_precision(tps: Sequence[bool], npig: int) -> tuple[float, float]:
    """AP and final recall from true-positive flags in global score order.

    AP is the mean, over the 101 recall points, of the maximum precision
    achieved at recall >= that point (0 where the curve never reaches it).
    """
    if not tps:
        return 0.0, 0.0
    recalls: list[float] = []
    precisions: list[float] = []
    tp = 0
    for i, flag in enumerate(tps):
        tp += flag
        recalls.append(tp / npig)
        precisions.append(tp / (i + 1))
    # precision envelope: best precision at or beyond each point
    for i in range(len(precisions) - 2, -1, -1):
        if precisions[i] < precisions[i + 1]:
            precisions[i] = precisions[i + 1]
    total = 0.0
    for r in RECALL_POINTS:
        idx = bisect_left(recalls, r)
        if idx < len(precisions):
            total += precisions[idx]
    return total / len(RECALL_POINTS), recalls[-1]


def _mean(values: list[float]) -> float | None:
    return sum(values) / len(values) if values else None


def detection_eval(
    predictions: Mapping[str, Sequence[Detection]],
    gts: Sequence[GroundTruthImage],
    *,
    max_detections_per_image: int = 100,
) -> EvalReport:
    """Evaluate normalized detections against pixel-space ground truth.

    Predictions are keyed by image id and carry normalized boxes; they are
    denormalized with each image's recorded size. Missing scores default to
    DEFAULT_SCORE. Per image, only the ``max_detections_per_image`` highest
    scoring detections enter the evaluation (ties keep insertion order).
    Categories are the labels present in the ground truth; predictions for
    any other label are dropped with a diagnostic. A prediction for an
    unknown image id is an input error.
    """
    if not gts:
        raise EvalInputError("no ground-truth images")
    image_index: dict[str, int] = {}
    for g in gts:
        if g.image_id in image_index:
            raise EvalInputError(f"duplicate image id {g.image_id!r}")
        image_index[g.image_id] = len(image_index)

    categories = sorted({ann.label for g in gts for ann in g.annotations})
    category_set = set(categories)
    diagnostics: list[str] = []

    # per image: detections sorted by confidence, capped
    per_image_dets: list[list[tuple[str, PixelBox, float]]] = [[] for _ in gts]
    for image_id, dets in predictions.items():
        if image_id not in image_index:
            raise EvalInputError(f"prediction references unknown image id {image_id!r}")
        idx = image_index[image_id]
        g = gts[idx]
        staged = []
        for rank, det in enumerate(dets):
            if det.label not in category_set:
                diagnostics.append(
                    f"{image_id}: label {det.label!r} not in the ground-truth "
                    "category set; prediction ignored"
                )
                continue
            score = det.score if det.score is not None else DEFAULT_SCORE
            staged.append((score, rank, det.label, denormalize(det.box, g.width, g.height)))
        staged.sort(key=lambda item: (-item[0], item[1]))
        per_image_dets[idx] = [
            (label, box, score)
            for score, _, label, box in staged[:max_detections_per_image]
        ]

    n_thr = len(IOU_THRESHOLDS)
    ap: dict[str, list[dict[str, float]]] = {}   # ap[cat][thr_idx][area] -> value
    recall_at: dict[str, list[float | None]] = {}  # area "all" recall per threshold

    for cat in categories:
        # gather this category's detections and ground truth per image
        entries = []  # (img_idx, det boxes+scores in rank order, gt boxes, gt areas)
        for img_idx, g in enumerate(gts):
            dets = [
                (box, score)
                for label, box, score in per_image_dets[img_idx]
                if label == cat
            ]
            gt = [(ann.box, ann.area) for ann in g.annotations if ann.label == cat]
            if dets or gt:
                entries.append((img_idx, dets, gt))
        # IoU matrices, one per image with content
        ious = {
            img_idx: [[iou(db, gb) for gb, _ in gt] for db, _ in dets]
            for img_idx, dets, gt in entries
        }
        # global detection order: confidence desc, then image input order,
        # then per-image rank (both sorts are stable)
        flat = []
        for pos, (img_idx, dets, _) in enumerate(entries):
            for rank, (_, score) in enumerate(dets):
                flat.append((score, pos, rank))
        global_order = sorted(range(len(flat)), key=lambda i: (-flat[i][0], flat[i][1], flat[i][2]))

        ap[cat] = [dict() for _ in range(n_thr)]
        recall_at[cat] = [None] * n_thr
        for area_key, (lo, hi) in AREA_RANGES.items():
            gt_ignore_by_entry = []
            scan_orders = []
            npig = 0
            for _, _, gt in entries:
                ignore = [not lo <= area < hi for _, area in gt]
                gt_ignore_by_entry.append(ignore)
                scan_orders.append(sorted(range(len(gt)), key=lambda g_i: ignore[g_i]))
                npig += ignore.count(False)
            if npig == 0:
                continue  # bucket undefined for this category
            for t_idx, threshold in enumerate(IOU_THRESHOLDS):
                # counted/tp flags in flat order (same construction order)
                counted: list[bool] = []
                tp_flags: list[bool] = []
                for pos, (img_idx, dets, gt) in enumerate(entries):
                    matches = _greedy_match(
                        ious[img_idx], scan_orders[pos], gt_ignore_by_entry[pos], threshold
                    )
                    for rank, m in enumerate(matches):
                        if m != -1:
                            ignored = gt_ignore_by_entry[pos][m]
                            counted.append(not ignored)
                            tp_flags.append(not ignored)
                        else:
                            area = dets[rank][0].area
                            counted.append(lo <= area < hi)
                            tp_flags.append(False)
                tps = [tp_flags[f] for f in global_order if counted[f]]
                value, final_recall = _average_precision(tps, npig)
                ap[cat][t_idx][area_key] = value
                if area_key == "all":
                    recall_at[cat][t_idx] = final_recall

    def collect(area_key: str, thresholds: Iterable[int]) -> list[float]:
        return [
            ap[cat][t][area_key]
            for cat in categories
            for t in thresholds
            if area_key in ap[cat][t]
        ]

    all_thr = range(n_thr)
    report = EvalReport(
        mean_ap=_mean(collect("all", all_thr)),
        ap50=_mean(collect("all", [IOU_THRESHOLDS.index(0.5)])),
        ap75=_mean(collect("all", [IOU_THRESHOLDS.index(0.75)])),
        ap_small=_mean(collect("small", all_thr)),
        ap_medium=_mean(collect("medium", all_thr)),
        ap_large=_mean(collect("large", all_thr)),
        ar100=_mean(
            [r for cat in categories for r in recall_at[cat] if r is not None]
        ),
        per_category={
            cat: m
            for cat in categories
            if (m := _mean([ap[cat][t]["all"] for t in all_thr if "all" in ap[cat][t]]))
            is not None
        },
        diagnostics=diagnostics,
    )
    return report


# --- phrase grounding --------------------------------------------------------

def grounding_eval(
    predictions: Mapping[object, Sequence[tuple[PixelBox, float]]],
    gts: Mapping[object, Sequence[PixelBox]],
    threshold: float = 0.5,
) -> tuple[float, float]:
    """Instance-level and merged-box recall for phrase grounding.

    ``gts`` maps a phrase key (conventionally ``(image_id, phrase)``) to its
    ground-truth boxes; ``predictions`` maps the same keys to scored boxes.
    Instance-level recall counts a ground-truth box as found when any
    predicted box for its phrase reaches IoU >= threshold (one prediction
    may recall several instances). Merged-box recall encloses all of a
    phrase's boxes in their minimal bounding box and checks the single
    highest-scoring prediction against it. Phrases with no predictions miss
    under both protocols; prediction keys absent from ``gts`` are ignored.
    """
    if not gts:
        raise EvalInputError("no ground-truth phrases")
    total_instances = 0
    recalled_instances = 0
    correct_phrases = 0
    for key, boxes in gts.items():
        if not boxes:
            raise EvalInputError(f"phrase {key!r} has no ground-truth boxes")
        preds = list(predictions.get(key, ()))
        total_instances += len(boxes)
        for gt_box in boxes:
            if any(iou(p, gt_box) >= threshold for p, _ in preds):
                recalled_instances += 1
        merged = PixelBox(
            min(b.x1 for b in boxes),
            min(b.y1 for b in boxes),
            max(b.x2 for b in boxes),
            max(b.y2 for b in boxes),
        )
        if preds:
            top, _ = max(enumerate(preds), key=lambda item: (item[1][1], -item[0]))
            top_box = preds[top][0]
            if iou(top_box, merged) >= threshold:
                correct_phrases += 1
    return recalled_instances / total_instances, correct_phrases / len(gts)


# --- JSON Lines interchange -------------------------------------------------

def ground_truth_from_json(obj: dict) -> GroundTruthImage:
    try:
        image_id = str(obj["image_id"])
        width = int(obj["width"])
        height = int(obj["height"])
        raw_annotations = obj.get("annotations", [])
        raw_phrases = obj.get("phrases", [])
    except (KeyError, TypeError, ValueError) as exc:
        raise EvalInputError(f"bad ground-truth record: {exc}") from None
    annotations = []
    for entry in raw_annotations:
        box = PixelBox(*entry["bbox"])
        area = float(entry.get("area", box.area))
        annotations.append(Annotation(str(entry["label"]), box, area))
    phrases = [
        PhraseGroup(str(p["phrase"]), tuple(PixelBox(*b) for b in p["boxes"]))
        for p in raw_phrases
    ]
    return GroundTruthImage(image_id, width, height, tuple(annotations), tuple(phrases))


def ground_truth_to_json(g: GroundTruthImage) -> dict:
    out: dict = {
        "image_id": g.image_id,
        "width": g.width,
        "height": g.height,
        "annotations": [
            {"label": a.label, "bbox": [a.box.x1, a.box.y1, a.box.x2, a.box.y2], "area": a.area}
            for a in g.annotations
        ],
    }
    if g.phrases:
        out["phrases"] = [
            {"phrase": p.phrase, "boxes": [[b.x1, b.y1, b.x2, b.y2] for b in p.boxes]}
            for p in g.phrases
        ]
    return out


def read_ground_truth(lines: Iterable[str]) -> list[GroundTruthImage]:
    images = []
    for n, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            images.append(ground_truth_from_json(json.loads(line)))
        except json.JSONDecodeError as exc:
            raise EvalInputError(f"line {n}: invalid JSON: {exc}") from None
    return images


def read_predictions(
    lines: Iterable[str], mode: str = "lenient"
) -> tuple[dict[tuple[str, str | None], list[Detection]], list[str]]:
    """Load prediction records, routing raw sequences through the codec.

    Records either carry ``detections`` (normalized boxes, optional scores)
    or a raw ``sequence`` with its field ``order``. The result maps
    ``(image_id, phrase-or-None)`` to detections in input order; sentinel
    and empty outputs contribute no detections.
    """
    out: dict[tuple[str, str | None], list[Detection]] = {}
    diagnostics: list[str] = []
    for n, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise EvalInputError(f"line {n}: invalid JSON: {exc}") from None
        phrase = str(obj["phrase"]) if "phrase" in obj else None
        if "sequence" in obj:
            order = SequenceOrder(obj.get("order", "label_first"))
            preds, diags = parse(str(obj["sequence"]), order, mode)
            diagnostics.extend(f"line {n}: offset {d.offset}: {d.message}" for d in diags)
            image_id = str(obj["image_id"])
        else:
            from .codec import detections_from_json

            image_id, preds = detections_from_json(obj)
        key = (image_id, phrase)
        out.setdefault(key, [])
        if not preds.is_none:
            out[key].extend(preds.detections)
    return out, diagnostics
