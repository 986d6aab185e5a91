"""Output-level operators: NMS, Soft-NMS, weighted boxes fusion, low-threshold
union and class-restricted score re-projection.

Every operator is class-local: input is partitioned by class code, each class
is processed on its own, and classes come back in order of first appearance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from .dataset_io import Box, Detection
from .matching import boxes_to_xyxy, iou, iou_matrix

DEFAULT_SCORE_FLOOR = 0.001
DEFAULT_DEDUP_IOU = 0.55
DEFAULT_WBF_IOU = 0.55


def _by_class(dets: Sequence[Detection]) -> dict[str, list[int]]:
    groups: dict[str, list[int]] = {}
    for i, d in enumerate(dets):
        groups.setdefault(d.class_code, []).append(i)
    return groups


def _classwise(dets: Sequence[Detection], op: Callable[[list[Detection]], list[Detection]]) -> list[Detection]:
    out: list[Detection] = []
    for idx in _by_class(dets).values():
        out.extend(op([dets[i] for i in idx]))
    return out


def _rank(dets: Sequence[Detection]) -> list[int]:
    return sorted(range(len(dets)), key=lambda i: (*dets[i].sort_key(), i))


def nms(dets: Sequence[Detection], iou_thresh: float = 0.5) -> list[Detection]:
    """Greedy suppression by descending score; a box is dropped when IoU > ``iou_thresh``."""
    if not 0.0 < iou_thresh < 1.0:
        raise ValueError("iou_thresh must lie in (0, 1)")

    def one(cls_dets: list[Detection]) -> list[Detection]:
        order = _rank(cls_dets)
        ious = iou_matrix(boxes_to_xyxy([d.box for d in cls_dets]), boxes_to_xyxy([d.box for d in cls_dets]))
        alive = np.ones(len(cls_dets), dtype=bool)
        keep = []
        for i in order:
            if not alive[i]:
                continue
            keep.append(cls_dets[i])
            alive &= ~(ious[i] > iou_thresh)
        return keep

    return _classwise(dets, one)


def soft_nms(
    dets: Sequence[Detection],
    sigma_or_slope: float = 1.0,
    mode: str = "linear",
    score_floor: float = DEFAULT_SCORE_FLOOR,
) -> list[Detection]:
    """Decay, rather than drop, boxes overlapping a higher-scoring pick.

    ``linear``: score *= max(0, 1 - slope * IoU) for every overlapping box.
    ``gaussian``: score *= exp(-IoU**2 / sigma). Boxes falling below
    ``score_floor`` are removed. Output is in pick order.
    """
    if mode not in ("linear", "gaussian"):
        raise ValueError(f"unknown soft-nms mode {mode!r}")
    if mode == "gaussian" and sigma_or_slope <= 0:
        raise ValueError("gaussian sigma must be positive")

    def one(cls_dets: list[Detection]) -> list[Detection]:
        ious = iou_matrix(boxes_to_xyxy([d.box for d in cls_dets]), boxes_to_xyxy([d.box for d in cls_dets]))
        scores = [d.score for d in cls_dets]
        pending = [i for i in range(len(cls_dets)) if scores[i] >= score_floor]
        out = []
        while pending:
            top = min(pending, key=lambda i: (-scores[i], *cls_dets[i].sort_key()[1:], i))
            pending.remove(top)
            d = cls_dets[top]
            out.append(d if scores[top] == d.score else d.with_score(scores[top]))
            for i in pending:
                ov = ious[top, i]
                if ov <= 0:
                    continue
                if mode == "linear":
                    scores[i] *= max(0.0, 1.0 - sigma_or_slope * ov)
                else:
                    scores[i] *= math.exp(-(ov * ov) / sigma_or_slope)
            pending = [i for i in pending if scores[i] >= score_floor]
        return out

    return _classwise(dets, one)


@dataclass(frozen=True)
class FusionWeights:
    per_branch: Mapping[str, float]

    def __post_init__(self) -> None:
        if not self.per_branch:
            raise ValueError("need at least one branch weight")
        if any(not math.isfinite(w) or w < 0 for w in self.per_branch.values()):
            raise ValueError("weights must be finite and non-negative")
        if not any(w > 0 for w in self.per_branch.values()):
            raise ValueError("at least one weight must be positive")
        object.__setattr__(self, "per_branch", dict(self.per_branch))

    def normalized(self) -> dict[str, float]:
        """Weights summing to 1; all-equal weights map to exactly 1/K."""
        vals = list(self.per_branch.values())
        if all(v == vals[0] for v in vals):
            return {b: 1.0 / len(vals) for b in self.per_branch}
        total = sum(vals)
        return {b: w / total for b, w in self.per_branch.items()}

    @classmethod
    def uniform(cls, branch_ids: Sequence[str]) -> "FusionWeights":
        return cls({b: 1.0 for b in branch_ids})


@dataclass(frozen=True)
class ClusterTrace:
    fused: Detection
    members: tuple[tuple[str, int, float], ...]  # (branch_id, index in that branch's list, branch weight)


def _fuse_box(boxes: np.ndarray, conf: np.ndarray) -> np.ndarray:
    """(conf)-weighted mean of xywh rows, written as offset from the first row so identical rows stay exact."""
    base = boxes[0]
    total = conf.sum()
    if total > 0:
        fused = base + (conf[:, None] * (boxes - base)).sum(axis=0) / total
    else:
        fused = base + (boxes - base).mean(axis=0)
    return np.clip(fused, boxes.min(axis=0), boxes.max(axis=0))


def _xywh_iou(a: np.ndarray, b: np.ndarray) -> float:
    return iou(Box(*a), Box(*b))


def wbf(
    branch_dets: Sequence[tuple[str, Sequence[Detection]]],
    weights: FusionWeights,
    iou_cluster: float = DEFAULT_WBF_IOU,
    score_floor: float = DEFAULT_SCORE_FLOOR,
    *,
    rescale: bool = True,
) -> list[ClusterTrace]:
    """Weighted boxes fusion.

    Boxes (raw score >= ``score_floor``) are visited by descending
    weight*score and join the cluster whose current fused box overlaps them
    with IoU >= ``iou_cluster``. Fused coordinates are the weight*score
    weighted mean of the members; the fused score is
    ``mean(weight*score) * min(n_members, n_branches)`` with weights summing
    to 1, which reduces to the plain member mean times ``min(n, N)/N`` for
    equal weights. Zero-weight branches are left out entirely. With
    ``rescale=False`` the fused score is the weight-normalised member mean.
    """
    if not 0.0 < iou_cluster < 1.0:
        raise ValueError("iou_cluster must lie in (0, 1)")
    norm = weights.normalized()
    active = [(b, dets) for b, dets in branch_dets if norm.get(b, 0.0) > 0]
    missing = [b for b, _ in branch_dets if b not in norm]
    if missing:
        raise KeyError(f"no weight for branch(es) {missing}")
    n_branches = len(active)

    entries = []
    for bpos, (b, dets) in enumerate(active):
        w = norm[b]
        for k, d in enumerate(dets):
            if d.score >= score_floor:
                entries.append((w * d.score, bpos, k, b, w, d))
    classes: list[str] = []
    for e in entries:
        if e[5].class_code not in classes:
            classes.append(e[5].class_code)

    traces: list[ClusterTrace] = []
    for c in classes:
        cls_entries = sorted((e for e in entries if e[5].class_code == c), key=lambda e: (-e[0], e[1], e[2]))
        members: list[list[tuple]] = []
        fused: list[np.ndarray] = []
        for e in cls_entries:
            box = np.array(e[5].box.to_list(), dtype=float)
            best, best_iou = -1, -1.0
            for ci, fb in enumerate(fused):
                ov = _xywh_iou(fb, box)
                if ov >= iou_cluster and ov > best_iou:
                    best, best_iou = ci, ov
            if best < 0:
                members.append([e])
                fused.append(box)
            else:
                members[best].append(e)
                rows = np.array([m[5].box.to_list() for m in members[best]], dtype=float)
                fused[best] = _fuse_box(rows, np.array([m[0] for m in members[best]]))
        cls_traces = []
        for ms, fb in zip(members, fused):
            n = len(ms)
            if rescale:
                score = sum(m[0] for m in ms) / n * min(n, n_branches)
            else:
                score = sum(m[0] for m in ms) / sum(m[4] for m in ms)
            score = min(1.0, max(0.0, score))
            det = Detection(c, Box(*(float(v) for v in fb)), score)
            cls_traces.append(ClusterTrace(det, tuple((m[3], m[2], m[4]) for m in ms)))
        cls_traces.sort(key=lambda t: t.fused.sort_key())
        traces.extend(cls_traces)
    return traces


def wbf_detections(
    branch_dets: Sequence[tuple[str, Sequence[Detection]]],
    weights: FusionWeights,
    iou_cluster: float = DEFAULT_WBF_IOU,
    score_floor: float = DEFAULT_SCORE_FLOOR,
    **kw,
) -> list[Detection]:
    return [t.fused for t in wbf(branch_dets, weights, iou_cluster, score_floor, **kw)]


def union_low_threshold(
    global_dets: Sequence[Detection],
    repair_dets: Sequence[Detection],
    sigma_c: float,
    dedup_iou: float = DEFAULT_DEDUP_IOU,
) -> list[Detection]:
    """Add low-threshold repair candidates to the global source.

    Repair boxes scoring below ``sigma_c`` are discarded. Boxes from the two
    sources that overlap with IoU > ``dedup_iou`` are treated as duplicates
    and only the higher-scoring one survives (global wins exact ties).
    Duplicates inside one source are left alone. Output keeps the surviving
    global boxes in input order, followed by the surviving repair boxes.
    """
    if not 0.0 < dedup_iou < 1.0:
        raise ValueError("dedup_iou must lie in (0, 1)")
    g_all = list(global_dets)
    r_all = [d for d in repair_dets if d.score >= sigma_c]
    classes = list(_by_class(g_all + r_all))
    keep_g = [True] * len(g_all)
    keep_r = [True] * len(r_all)
    for c in classes:
        gi = [i for i, d in enumerate(g_all) if d.class_code == c]
        ri = [i for i, d in enumerate(r_all) if d.class_code == c]
        if not gi or not ri:
            continue
        ious = iou_matrix(boxes_to_xyxy([g_all[i].box for i in gi]), boxes_to_xyxy([r_all[i].box for i in ri]))
        # (source, local idx); global before repair on equal score and content
        pool = [(0, k) for k in range(len(gi))] + [(1, k) for k in range(len(ri))]

        def key(item):
            src, k = item
            d = g_all[gi[k]] if src == 0 else r_all[ri[k]]
            return (*d.sort_key(), src, k)

        for src, k in sorted(pool, key=key):
            alive = keep_g[gi[k]] if src == 0 else keep_r[ri[k]]
            if not alive:
                continue
            if src == 0:
                for m in range(len(ri)):
                    if keep_r[ri[m]] and ious[k, m] > dedup_iou:
                        keep_r[ri[m]] = False
            else:
                for m in range(len(gi)):
                    if keep_g[gi[m]] and ious[m, k] > dedup_iou:
                        keep_g[gi[m]] = False
    return [d for d, k in zip(g_all, keep_g) if k] + [d for d, k in zip(r_all, keep_r) if k]


def _sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    z = math.exp(x)
    return z / (1.0 + z)


def score_reprojection(dets: Sequence[Detection], target_class: str, a: float, b: float) -> list[Detection]:
    """Map ``target_class`` scores through sigmoid(a*s + b); other classes pass through as the same objects."""
    if not (math.isfinite(a) and math.isfinite(b)):
        raise ValueError("a and b must be finite")
    return [d.with_score(_sigmoid(a * d.score + b)) if d.class_code == target_class else d for d in dets]
