"""IoU, greedy matching and COCO-style 101-point AP.

``evaluate`` is split in two stages so that repeated-subset protocols can
reuse the expensive part: :func:`build_match_table` matches every image once
per IoU threshold, and :func:`aggregate` turns any subset of images into an
:class:`EvalResult`. Aggregation is an order-independent reduction over images.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .dataset_io import (
    DEFAULT_VOCAB,
    BranchPredictions,
    Box,
    ClassVocabulary,
    Detection,
    GroundTruthSet,
)
from .errors import ManifestMismatch

COCO_IOU_THRESHOLDS: tuple[float, ...] = tuple(round(0.5 + 0.05 * k, 2) for k in range(10))
# k/100 rather than linspace so independent implementations hit identical grid values
RECALL_GRID = np.arange(101) / 100.0


def iou(a: Box, b: Box) -> float:
    ix = min(a.x + a.w, b.x + b.w) - max(a.x, b.x)
    iy = min(a.y + a.h, b.y + b.h) - max(a.y, b.y)
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    union = a.w * a.h + b.w * b.h - inter
    return min(1.0, inter / union)


def boxes_to_xyxy(boxes: Sequence[Box]) -> np.ndarray:
    if not boxes:
        return np.zeros((0, 4))
    return np.array([b.as_xyxy() for b in boxes], dtype=float)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of two ``(n, 4)`` xyxy arrays."""
    if len(a) == 0 or len(b) == 0:
        return np.zeros((len(a), len(b)))
    ix = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    iy = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(ix, 0, None) * np.clip(iy, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.minimum(1.0, inter / union)


@dataclass(frozen=True)
class MatchRecord:
    image_id: str
    det_index: int
    matched_gt: int | None
    iou: float
    same_class: bool
    score: float
    best_iou_any_class: float = 0.0

    @property
    def is_tp(self) -> bool:
        return self.matched_gt is not None


def ranking_order(dets: Sequence[Detection]) -> list[int]:
    """Indices of ``dets`` by descending score; equal scores fall back to box content, then input order."""
    return sorted(range(len(dets)), key=lambda i: (*dets[i].sort_key(), i))


def greedy_match(ious: np.ndarray, order: Sequence[int], iou_thresh: float) -> list[int | None]:
    """Greedy one-to-one assignment; ``ious`` is ``(n_det, n_gt)``, ``order`` the processing order.

    Each detection takes the still-free truth of highest IoU >= ``iou_thresh``;
    IoU ties go to the lower truth index.
    """
    n_det, n_gt = ious.shape
    taken = np.zeros(n_gt, dtype=bool)
    assigned: list[int | None] = [None] * n_det
    for d in order:
        if n_gt == 0:
            break
        row = np.where(taken, -1.0, ious[d])
        j = int(np.argmax(row))
        if row[j] >= iou_thresh and row[j] > 0:
            taken[j] = True
            assigned[d] = j
    return assigned


def match_class(
    dets: Sequence[Detection],
    gts: Sequence[Box],
    iou_thresh: float,
    *,
    image_id: str = "",
    other_gts: Sequence[Box] = (),
) -> list[MatchRecord]:
    """Match one class's detections in one image; records come back in ranking order."""
    if not 0.0 < iou_thresh < 1.0:
        raise ValueError("iou_thresh must lie in (0, 1)")
    order = ranking_order(dets)
    ious = iou_matrix(boxes_to_xyxy([d.box for d in dets]), boxes_to_xyxy(list(gts)))
    other = iou_matrix(boxes_to_xyxy([d.box for d in dets]), boxes_to_xyxy(list(other_gts)))
    assigned = greedy_match(ious, order, iou_thresh)
    out = []
    for d in order:
        best_same = float(ious[d].max()) if ious.shape[1] else 0.0
        best_other = float(other[d].max()) if other.shape[1] else 0.0
        j = assigned[d]
        out.append(
            MatchRecord(
                image_id=image_id,
                det_index=d,
                matched_gt=j,
                iou=float(ious[d, j]) if j is not None else best_same,
                same_class=j is not None or best_same >= best_other,
                score=dets[d].score,
                best_iou_any_class=max(best_same, best_other),
            )
        )
    return out


def ap_from_ranked(tp: np.ndarray, n_gt: int) -> float:
    """101-point interpolated AP of a ranked TP/FP sequence."""
    if n_gt <= 0 or len(tp) == 0:
        return 0.0
    tp = np.asarray(tp, dtype=np.int64)
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1 - tp)
    recall = ctp / n_gt
    precision = ctp / (ctp + cfp)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_GRID, side="left")
    vals = np.where(idx < len(envelope), envelope[np.minimum(idx, len(envelope) - 1)], 0.0)
    return float(np.mean(vals))


def average_precision(matches: Sequence[MatchRecord], n_gt: int) -> float:
    """AP over match records of one class at one IoU threshold (0 when ``n_gt`` is 0)."""
    scores = np.array([m.score for m in matches], dtype=float)
    order = np.argsort(-scores, kind="stable")
    tp = np.array([matches[i].is_tp for i in order], dtype=np.int64)
    return ap_from_ranked(tp, n_gt)


@dataclass
class EvalResult:
    per_class_ap50: dict[str, float]
    per_class_ap5095: dict[str, float]
    map50: float
    map5095: float
    n_images: int
    n_gt: dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "map50": self.map50,
            "map5095": self.map5095,
            "n_images": self.n_images,
            "per_class_ap50": dict(self.per_class_ap50),
            "per_class_ap5095": dict(self.per_class_ap5095),
            "n_gt": dict(self.n_gt),
        }

    def csv_header(self, classes: Sequence[str]) -> list[str]:
        return ["n_images", "map50", "map5095"] + [f"ap50_{c}" for c in classes]

    def csv_row(self, classes: Sequence[str]) -> list:
        return [self.n_images, self.map50, self.map5095] + [self.per_class_ap50.get(c, "") for c in classes]


@dataclass
class _CellMatches:
    """Per (image, class): detection scores in ranking order and TP flags per IoU threshold."""

    scores: np.ndarray
    tp: np.ndarray  # (n_thresholds, n_det) bool
    n_gt: int


@dataclass
class MatchTable:
    classes: tuple[str, ...]
    iou_thresholds: tuple[float, ...]
    image_ids: tuple[str, ...]
    cells: dict[str, dict[str, _CellMatches]]  # class -> image -> cell

    def aggregate(self, image_ids: Iterable[str] | None = None) -> EvalResult:
        return aggregate(self, image_ids)


def _cap(dets: Sequence[Detection], max_dets: int | None) -> list[Detection]:
    if max_dets is None or len(dets) <= max_dets:
        return list(dets)
    return [dets[i] for i in ranking_order(dets)[:max_dets]]


def build_match_table(
    preds: BranchPredictions,
    gt: GroundTruthSet,
    vocab: ClassVocabulary = DEFAULT_VOCAB,
    *,
    iou_thresholds: Sequence[float] = COCO_IOU_THRESHOLDS,
    max_dets: int | None = None,
) -> MatchTable:
    pred_ids, gt_ids = set(preds.per_image), set(gt.per_image)
    if pred_ids != gt_ids:
        missing = [i for i in gt.per_image if i not in pred_ids]
        extra = [i for i in preds.per_image if i not in gt_ids]
        raise ManifestMismatch(
            f"prediction/ground-truth image sets differ ({len(missing)} missing, {len(extra)} extra)",
            missing=missing,
            extra=extra,
        )
    thresholds = tuple(iou_thresholds)
    cells: dict[str, dict[str, _CellMatches]] = {c: {} for c in vocab.codes}
    for image_id, gts in gt.per_image.items():
        dets = _cap(preds.per_image[image_id], max_dets)
        for c in vocab.codes:
            cdets = [d for d in dets if d.class_code == c]
            cgts = [g.box for g in gts if g.class_code == c]
            if not cdets and not cgts:
                continue
            order = ranking_order(cdets)
            ious = iou_matrix(boxes_to_xyxy([d.box for d in cdets]), boxes_to_xyxy(cgts))
            tp = np.zeros((len(thresholds), len(cdets)), dtype=bool)
            for t, thr in enumerate(thresholds):
                assigned = greedy_match(ious, order, thr)
                tp[t] = [assigned[d] is not None for d in order]
            scores = np.array([cdets[d].score for d in order], dtype=float)
            cells[c][image_id] = _CellMatches(scores, tp, len(cgts))
    return MatchTable(tuple(vocab.codes), thresholds, tuple(gt.per_image), cells)


def aggregate(table: MatchTable, image_ids: Iterable[str] | None = None) -> EvalResult:
    """Reduce per-image matches over ``image_ids`` (default: all, in table order)."""
    ids = list(table.image_ids if image_ids is None else image_ids)
    thresholds = table.iou_thresholds
    i50 = thresholds.index(0.5) if 0.5 in thresholds else 0
    ap50: dict[str, float] = {}
    ap_all: dict[str, float] = {}
    n_gt: dict[str, int] = {}
    for c in table.classes:
        per_image = table.cells[c]
        present = [per_image[i] for i in ids if i in per_image]
        total_gt = sum(cell.n_gt for cell in present)
        if total_gt == 0:
            continue
        if present:
            scores = np.concatenate([cell.scores for cell in present])
            tp = np.concatenate([cell.tp for cell in present], axis=1)
        else:
            scores, tp = np.zeros(0), np.zeros((len(thresholds), 0), dtype=bool)
        # stable sort keeps image order, then within-image ranking, on score ties
        order = np.argsort(-scores, kind="stable")
        aps = [ap_from_ranked(tp[t, order], total_gt) for t in range(len(thresholds))]
        ap50[c] = aps[i50]
        ap_all[c] = float(np.mean(aps))
        n_gt[c] = total_gt
    map50 = float(np.mean(list(ap50.values()))) if ap50 else 0.0
    map5095 = float(np.mean(list(ap_all.values()))) if ap_all else 0.0
    return EvalResult(ap50, ap_all, map50, map5095, len(ids), n_gt)


def evaluate(
    preds: BranchPredictions,
    gt: GroundTruthSet,
    vocab: ClassVocabulary = DEFAULT_VOCAB,
    *,
    iou_thresholds: Sequence[float] = COCO_IOU_THRESHOLDS,
    max_dets: int | None = None,
) -> EvalResult:
    """Per-class AP50 and AP50-95; classes without ground truth are left out of the means."""
    table = build_match_table(preds, gt, vocab, iou_thresholds=iou_thresholds, max_dets=max_dets)
    return aggregate(table)


def match_image(
    dets: Sequence[Detection], gts: Sequence, iou_thresh: float, image_id: str = ""
) -> dict[str, list[MatchRecord]]:
    """Per-class ``match_class`` over one image's mixed-class detections and truths."""
    out: dict[str, list[MatchRecord]] = {}
    for c in sorted({d.class_code for d in dets}):
        cdets = [d for d in dets if d.class_code == c]
        same = [g.box for g in gts if g.class_code == c]
        other = [g.box for g in gts if g.class_code != c]
        recs = match_class(cdets, same, iou_thresh, image_id=image_id, other_gts=other)
        out[c] = recs
    return out


def class_ap(per_image_records: Mapping[str, Sequence[MatchRecord]], n_gt: int) -> float:
    recs = [r for rs in per_image_records.values() for r in rs]
    return average_precision(recs, n_gt)
