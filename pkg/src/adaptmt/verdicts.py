"""Verdicts for classification (label equality) and detection (mAP drop)."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Sequence

from .relations import BoundingBox


class Verdict(str, Enum):
    PASS = "Pass"
    VIOLATED = "Violated"


@dataclass(frozen=True)
class Detection:
    box: BoundingBox
    class_id: int
    score: float = 1.0

    def to_json(self) -> dict:
        return {"box": self.box.as_list(), "class_id": self.class_id, "score": self.score}

    @classmethod
    def from_json(cls, data: dict) -> "Detection":
        return cls(BoundingBox.from_list(data["box"]), int(data["class_id"]), float(data.get("score", 1.0)))


@dataclass(frozen=True)
class GroundTruth:
    box: BoundingBox
    class_id: int

    def to_json(self) -> dict:
        return {"box": self.box.as_list(), "class_id": self.class_id}

    @classmethod
    def from_json(cls, data: dict) -> "GroundTruth":
        return cls(BoundingBox.from_list(data["box"]), int(data["class_id"]))


IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))


@dataclass(frozen=True)
class MapConfig:
    iou_thresholds: tuple[float, ...] = field(default=IOU_THRESHOLDS)
    drop_threshold: float = 0.05

    def __post_init__(self):
        if len(self.iou_thresholds) == 0:
            raise ValueError("need at least one IoU threshold")
        if not self.drop_threshold > 0:
            raise ValueError("drop threshold must be positive")


def classification_verdict(source_label, followup_label) -> Verdict:
    return Verdict.VIOLATED if source_label != followup_label else Verdict.PASS


def iou(a: BoundingBox, b: BoundingBox) -> float:
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def average_precision(preds: Sequence[Detection], truths: Sequence, threshold: float) -> float:
    """Area under the precision/recall step curve after greedy matching.

    Predictions are visited in descending score order (stable on ties);
    each claims the unmatched same-class truth of highest IoU, provided
    that IoU reaches ``threshold``.
    """
    truths = [_as_truth(t) for t in truths]
    if not preds and not truths:
        return 1.0
    if not preds or not truths:
        return 0.0
    order = sorted(range(len(preds)), key=lambda i: -preds[i].score)
    matched = [False] * len(truths)
    true_pos = 0
    ap = 0.0
    for rank, i in enumerate(order, start=1):
        pred = preds[i]
        best, best_iou = -1, threshold
        for j, truth in enumerate(truths):
            if matched[j] or truth.class_id != pred.class_id:
                continue
            overlap = iou(pred.box, truth.box)
            if overlap >= best_iou and (best < 0 or overlap > best_iou):
                best, best_iou = j, overlap
        if best >= 0:
            matched[best] = True
            true_pos += 1
            ap += true_pos / rank
    return ap / len(truths)


def _as_truth(t) -> GroundTruth:
    if isinstance(t, GroundTruth):
        return t
    box, class_id = t
    return GroundTruth(box, int(class_id))


def map_score(preds, truths, config: MapConfig | None = None) -> float:
    config = config or MapConfig()
    aps = [average_precision(preds, truths, t) for t in config.iou_thresholds]
    return sum(aps) / len(aps)


def detection_verdict(source_map: float, followup_map: float, config: MapConfig | None = None) -> Verdict:
    config = config or MapConfig()
    return Verdict.VIOLATED if followup_map < source_map - config.drop_threshold else Verdict.PASS


def dump_detections(detections: Iterable[Detection]) -> str:
    return json.dumps([d.to_json() for d in detections])


def load_detections(text: str) -> list[Detection]:
    return [Detection.from_json(d) for d in json.loads(text)]
