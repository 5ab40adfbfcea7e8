"""Seeded synthetic scenes and simulated model output for end-to-end tests.

Scenes are generated from a counter-based RNG (Philox) keyed by the seed and
the image index, so any scene can be regenerated independently and the
output is identical across platforms and worker counts. Simulated traces
perturb the ground truth geometrically and assign each token a probability
through a logistic link from the geometric error, so confidence ranking can
be exercised without a trained model.

``brute_force_ap`` is a deliberately naive, size-capped re-implementation of
the detection metrics used as an independent oracle. It shares no matching,
interpolation, or geometry code with the evaluation module; keep it that way.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import codec
from .codec import Detection, NormBox, PredictionSet, SequenceOrder
from .evaluation import Annotation, GroundTruthImage, PixelBox
from .scoring import PromptContext, TokenTrace

_MASK64 = (1 << 64) - 1
_SIM_SALT = 0x9E3779B97F4A7C15  # distinguishes the simulation stream from scene gen

# logistic link from geometric error to token probability
_CALIB_BIAS = 2.2   # zero-error probability: sigmoid(2.2) ~ 0.90
_CALIB_GAIN = 8.0

_SPURIOUS_LABEL_ERROR = 1.0
_SIM_INSTRUCTION = "locate every annotated object"


class SynthConfigError(ValueError):
    """A synthesis parameter is out of range."""


class OracleScopeError(ValueError):
    """The brute-force oracle refuses instances beyond its size cap."""


@dataclass(frozen=True)
class SynthConfig:
    """Parameters for scene generation and prediction simulation.

    ``box_noise_sigma`` is the coordinate noise as a fraction of the box
    size; ``calibration_slope`` controls how strongly geometric error
    depresses token probabilities (0 makes every probability equal).
    """

    seed: int = 0
    images: int = 10
    objects_per_image: tuple[int, int] = (2, 6)
    categories: int = 5
    box_noise_sigma: float = 0.0
    drop_rate: float = 0.0
    spurious_rate: float = 0.0
    calibration_slope: float = 1.0
    image_width: int = 448
    image_height: int = 448

    def __post_init__(self):
        lo, hi = self.objects_per_image
        if not (isinstance(lo, int) and isinstance(hi, int) and 1 <= lo <= hi):
            raise SynthConfigError(f"objects_per_image range {self.objects_per_image} invalid")
        if self.images < 1 or self.categories < 1:
            raise SynthConfigError("images and categories must be >= 1")
        for name in ("drop_rate", "spurious_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise SynthConfigError(f"{name}={v} outside [0, 1]")
        if self.box_noise_sigma < 0:
            raise SynthConfigError("box_noise_sigma must be >= 0")
        if self.image_width < 32 or self.image_height < 32:
            raise SynthConfigError("image size too small to place objects")

    @classmethod
    def from_json(cls, obj: Mapping) -> "SynthConfig":
        known = {f for f in cls.__dataclass_fields__}  # type: ignore[attr-defined]
        unknown = set(obj) - known
        if unknown:
            raise SynthConfigError(f"unknown config fields: {sorted(unknown)}")
        kwargs = dict(obj)
        if "objects_per_image" in kwargs:
            kwargs["objects_per_image"] = tuple(kwargs["objects_per_image"])
        return cls(**kwargs)


def category_name(index: int) -> str:
    return f"obj{index:02d}"


def _scene_rng(config: SynthConfig, index: int) -> np.random.Generator:
    key = ((config.seed & _MASK64) << 64) | (index & _MASK64)
    return np.random.Generator(np.random.Philox(key=key))


def _sim_rng(config: SynthConfig, image_id: str) -> np.random.Generator:
    digest = hashlib.sha256(image_id.encode()).digest()
    low = int.from_bytes(digest[:8], "big")
    key = (((config.seed ^ _SIM_SALT) & _MASK64) << 64) | low
    return np.random.Generator(np.random.Philox(key=key))


# area bucket bounds in squared pixels, matching the evaluation buckets
_BUCKETS = (
    (8.0**2, 32.0**2),    # small
    (32.0**2, 96.0**2),   # medium
    (96.0**2, None),      # large; upper bound derived from the image size
)


def _sample_box(rng: np.random.Generator, bucket: int, width: int, height: int) -> PixelBox:
    lo, hi = _BUCKETS[bucket]
    if hi is None:
        hi = (0.75 * min(width, height)) ** 2
        lo = min(lo, hi * 0.5)  # keep the range non-empty on tiny images
    area = rng.uniform(lo, hi)
    aspect = rng.uniform(0.6, 1.6667)
    bw = min(math.sqrt(area * aspect), width - 1.0)
    bh = min(math.sqrt(area / aspect), height - 1.0)
    x1 = rng.uniform(0.0, width - bw)
    y1 = rng.uniform(0.0, height - bh)
    return PixelBox(x1, y1, x1 + bw, y1 + bh)


def generate_scene(config: SynthConfig, index: int) -> GroundTruthImage:
    """Deterministic scene for (seed, index): labeled boxes within bounds.

    With three or more objects the first three land in the small, medium,
    and large area buckets so every size stratum is represented.
    """
    rng = _scene_rng(config, index)
    lo, hi = config.objects_per_image
    count = int(rng.integers(lo, hi + 1))
    annotations = []
    for obj in range(count):
        bucket = obj if count >= 3 and obj < 3 else int(rng.integers(0, 3))
        box = _sample_box(rng, bucket, config.image_width, config.image_height)
        label = category_name(int(rng.integers(0, config.categories)))
        annotations.append(Annotation(label=label, box=box, area=box.area))
    return GroundTruthImage(
        image_id=f"synth-{index:06d}",
        width=config.image_width,
        height=config.image_height,
        annotations=tuple(annotations),
    )


def _calibrated_prob(error: float, slope: float) -> float:
    x = _CALIB_BIAS - slope * _CALIB_GAIN * error
    return 1.0 / (1.0 + math.exp(-x))


def _chunk(text: str, size: int = 2) -> list[str]:
    return [text[i : i + size] for i in range(0, len(text), size)]


@dataclass(frozen=True)
class SimulatedTrace:
    """A simulated trace plus which emitted detections are hallucinated."""

    trace: TokenTrace
    spurious_flags: tuple[bool, ...]


def simulate_predictions_detailed(
    scene: GroundTruthImage, config: SynthConfig
) -> SimulatedTrace:
    """Perturb, drop, and hallucinate detections, then emit a token trace.

    Every kept ground-truth box is jittered by Gaussian noise scaled to the
    box size; each ground truth additionally spawns a spurious detection
    with probability ``spurious_rate``, placed right after it in the
    sequence. Token probabilities follow the logistic calibration: label
    tokens carry the label error (0 for real detections, 1 for spurious) and
    each coordinate's tokens carry that coordinate's relative geometric
    error, so accurate fields receive higher probabilities whenever the
    slope is positive.
    """
    rng = _sim_rng(config, scene.image_id)
    width, height = scene.width, scene.height
    emitted: list[tuple[Detection, bool, float, tuple[float, float, float, float]]] = []

    for ann in scene.annotations:
        dropped = rng.random() < config.drop_rate
        if not dropped:
            b = ann.box
            bw = max(b.x2 - b.x1, 1.0)
            bh = max(b.y2 - b.y1, 1.0)
            noise = rng.normal(0.0, config.box_noise_sigma, size=4) if config.box_noise_sigma > 0 else np.zeros(4)
            x1 = min(max(b.x1 + noise[0] * bw, 0.0), width)
            y1 = min(max(b.y1 + noise[1] * bh, 0.0), height)
            x2 = min(max(b.x2 + noise[2] * bw, 0.0), width)
            y2 = min(max(b.y2 + noise[3] * bh, 0.0), height)
            if x1 > x2:
                x1, x2 = x2, x1
            if y1 > y2:
                y1, y2 = y2, y1
            coord_errors = (
                abs(x1 - b.x1) / bw,
                abs(y1 - b.y1) / bh,
                abs(x2 - b.x2) / bw,
                abs(y2 - b.y2) / bh,
            )
            det = Detection(ann.label, NormBox.from_pixels((x1, y1, x2, y2), width, height))
            emitted.append((det, False, 0.0, coord_errors))
        if rng.random() < config.spurious_rate:
            box = _sample_box(rng, int(rng.integers(0, 3)), width, height)
            label = category_name(int(rng.integers(0, config.categories)))
            det = Detection(
                label, NormBox.from_pixels((box.x1, box.y1, box.x2, box.y2), width, height)
            )
            coord_errors = tuple(rng.uniform(0.05, 0.25, size=4).tolist())
            emitted.append((det, True, _SPURIOUS_LABEL_ERROR, coord_errors))

    context = PromptContext(scene.image_id, _SIM_INSTRUCTION)
    slope = config.calibration_slope
    base_prob = _calibrated_prob(0.0, slope)
    if not emitted:
        return SimulatedTrace(
            TokenTrace(((codec.NONE_SENTINEL, base_prob),), context), ()
        )

    tokens: list[tuple[str, float]] = []
    for i, (det, spurious, label_error, coord_errors) in enumerate(emitted):
        if i > 0:
            tokens.append(("&", base_prob))
        p_label = _calibrated_prob(label_error, slope)
        tokens.extend((piece, p_label) for piece in _chunk(det.label, 3))
        tokens.append(("-[", base_prob))
        b = det.box
        for j, coord in enumerate((b.x1, b.y1, b.x2, b.y2)):
            p_coord = _calibrated_prob(coord_errors[j], slope)
            numeral = f"{coord // 1000}.{coord % 1000:03d}"
            tokens.extend((piece, p_coord) for piece in _chunk(numeral, 2))
            tokens.append(("," if j < 3 else "]", base_prob))

    trace = TokenTrace(tuple(tokens), context)
    expected = codec.serialize(
        PredictionSet.of(det for det, *_ in emitted), SequenceOrder.LABEL_FIRST
    )
    assert trace.text == expected, "token assembly diverged from the serializer"
    return SimulatedTrace(trace, tuple(spurious for _, spurious, *_ in emitted))


def simulate_predictions(scene: GroundTruthImage, config: SynthConfig) -> TokenTrace:
    """Trace-only view of :func:`simulate_predictions_detailed`."""
    return simulate_predictions_detailed(scene, config).trace


# --- independent metric oracle ----------------------------------------------

_ORACLE_MAX_PREDICTIONS = 15
_ORACLE_MAX_GT = 10
_ORACLE_THRESHOLDS = [0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95]
_ORACLE_AREAS = {
    "all": (0.0, float("inf")),
    "small": (0.0, 1024.0),
    "medium": (1024.0, 9216.0),
    "large": (9216.0, float("inf")),
}


def _rect_overlap(a, b) -> float:
    # local IoU on (x1, y1, x2, y2) tuples; no shared geometry helpers
    w = min(a[2], b[2]) - max(a[0], b[0])
    h = min(a[3], b[3]) - max(a[1], b[1])
    if w <= 0 or h <= 0:
        inter = 0.0
    else:
        inter = w * h
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    denom = area_a + area_b - inter
    return inter / denom if denom > 0 else 0.0


def brute_force_ap(
    predictions: Mapping[str, Sequence[Detection]],
    gts: Sequence[GroundTruthImage],
    *,
    max_detections_per_image: int = 100,
) -> dict[str, float | None]:
    """Naive re-computation of the detection metrics on a small instance.

    Implements the same documented protocol as the evaluation module —
    confidence-ordered greedy matching (non-ignored ground truth first,
    first strictly-best IoU wins, area buckets via ignore flags) and direct
    max-scan 101-point interpolation — but line by line from scratch and
    with no shared helpers, so agreement between the two is evidence, not
    tautology. Refuses instances above its size cap.
    """
    total_gt = sum(len(g.annotations) for g in gts)
    total_preds = sum(len(v) for v in predictions.values())
    if total_gt > _ORACLE_MAX_GT:
        raise OracleScopeError(f"{total_gt} ground truths exceed the oracle cap")
    if total_preds > _ORACLE_MAX_PREDICTIONS:
        raise OracleScopeError(f"{total_preds} predictions exceed the oracle cap")
    if not gts:
        raise OracleScopeError("no ground-truth images")

    ids = [g.image_id for g in gts]
    if len(set(ids)) != len(ids):
        raise OracleScopeError("duplicate image ids")
    labels_in_gt = sorted({a.label for g in gts for a in g.annotations})

    # per image: capped, confidence-ordered (label, rect, score) predictions
    dets_by_image: dict[str, list[tuple[str, tuple, float]]] = {g.image_id: [] for g in gts}
    for image_id, dets in predictions.items():
        if image_id not in dets_by_image:
            raise OracleScopeError(f"unknown image id {image_id!r}")
        g = next(gt for gt in gts if gt.image_id == image_id)
        rows = []
        for rank, det in enumerate(dets):
            if det.label not in labels_in_gt:
                continue
            fx1, fy1, fx2, fy2 = det.box.as_fractions()
            rect = (fx1 * g.width, fy1 * g.height, fx2 * g.width, fy2 * g.height)
            score = 0.99 if det.score is None else det.score
            rows.append((-score, rank, det.label, rect, score))
        rows.sort()
        dets_by_image[image_id] = [
            (label, rect, score) for _, _, label, rect, score in rows[:max_detections_per_image]
        ]

    ap_cells: dict[str, list[float]] = {k: [] for k in _ORACLE_AREAS}
    ap_at: dict[float, list[float]] = {0.5: [], 0.75: []}
    recall_cells: list[float] = []

    for label in labels_in_gt:
        for area_key, (lo, hi) in _ORACLE_AREAS.items():
            npig = sum(
                1
                for g in gts
                for a in g.annotations
                if a.label == label and lo <= a.area < hi
            )
            if npig == 0:
                continue
            for threshold in _ORACLE_THRESHOLDS:
                pool = []  # (score, image position, rank, counted, is_tp)
                for pos, g in enumerate(gts):
                    gt_rows = [a for a in g.annotations if a.label == label]
                    ignored = [not lo <= a.area < hi for a in gt_rows]
                    order = [i for i in range(len(gt_rows)) if not ignored[i]]
                    order += [i for i in range(len(gt_rows)) if ignored[i]]
                    used = set()
                    rank = 0
                    for det_label, rect, score in dets_by_image[g.image_id]:
                        if det_label != label:
                            continue
                        chosen = -1
                        chosen_iou = threshold
                        for i in order:
                            if i in used:
                                continue
                            if chosen != -1 and not ignored[chosen] and ignored[i]:
                                break
                            gt_box = gt_rows[i].box
                            v = _rect_overlap(rect, (gt_box.x1, gt_box.y1, gt_box.x2, gt_box.y2))
                            if chosen == -1:
                                if v >= threshold:
                                    chosen, chosen_iou = i, v
                            elif v > chosen_iou:
                                chosen, chosen_iou = i, v
                        if chosen != -1:
                            used.add(chosen)
                            counted = not ignored[chosen]
                            is_tp = counted
                        else:
                            det_area = (rect[2] - rect[0]) * (rect[3] - rect[1])
                            counted = lo <= det_area < hi
                            is_tp = False
                        pool.append((score, pos, rank, counted, is_tp))
                        rank += 1
                pool.sort(key=lambda row: (-row[0], row[1], row[2]))
                points = []
                tp = fp = 0
                for _, _, _, counted, is_tp in pool:
                    if not counted:
                        continue
                    tp += 1 if is_tp else 0
                    fp += 0 if is_tp else 1
                    points.append((tp / npig, tp / (tp + fp)))
                # direct max scan over the curve for each recall point
                total = 0.0
                for k in range(101):
                    r = k / 100
                    best = 0.0
                    for rec, prec in points:
                        if rec >= r and prec > best:
                            best = prec
                    total += best
                ap_value = total / 101
                ap_cells[area_key].append(ap_value)
                if area_key == "all":
                    if threshold in ap_at:
                        ap_at[threshold].append(ap_value)
                    recall_cells.append(points[-1][0] if points else 0.0)

    def avg(values):
        return sum(values) / len(values) if values else None

    return {
        "mAP": avg(ap_cells["all"]),
        "AP50": avg(ap_at[0.5]),
        "AP75": avg(ap_at[0.75]),
        "AP_S": avg(ap_cells["small"]),
        "AP_M": avg(ap_cells["medium"]),
        "AP_L": avg(ap_cells["large"]),
        "AR100": avg(recall_cells),
    }
