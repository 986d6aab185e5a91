"""Four-bucket error taxonomy, HCEC / BSR and hard-class identification.

Every ground-truth instance left unmatched at the operating point
(same-class detections with score >= ``sigma_op`` matched greedily at
``iou_tp``) lands in exactly one bucket, tested in this order:

* ``pa``  no detection of any class or score reaches ``iou_pa`` on it
* ``wc``  a confident detection of another class covers it at ``iou_tp``
* ``cs``  a same-class detection covers it at ``iou_tp`` but scores below ``sigma_op``
* ``ld``  a confident same-class detection overlaps it only in ``[iou_pa, iou_tp)``

Instances that fit none of these (overlap exists, but e.g. the covering
same-class box was consumed by a neighbour, or only a low-score other-class
box overlaps) go to ``wc`` when the best-overlapping detection has another
class, otherwise to ``ld``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .dataset_io import DEFAULT_VOCAB, BranchPredictions, ClassVocabulary, GroundTruthSet
from .errors import InvalidThresholds
from .matching import EvalResult, boxes_to_xyxy, evaluate, greedy_match, iou_matrix, ranking_order

BUCKETS = ("pa", "wc", "cs", "ld")

DEFAULT_SIGMA_OP = 0.25
DEFAULT_IOU_TP = 0.50
DEFAULT_IOU_PA = 0.10
DEFAULT_EPS = 1e-9
DEFAULT_TAU_HARD = 0.30
LOW_ERROR_FLOOR = 5


@dataclass(frozen=True)
class ErrorBucketCounts:
    n_pa: int = 0
    n_wc: int = 0
    n_cs: int = 0
    n_ld: int = 0

    def __post_init__(self) -> None:
        if min(self.as_tuple()) < 0:
            raise ValueError("bucket counts must be non-negative")

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.n_pa, self.n_wc, self.n_cs, self.n_ld)

    @property
    def total(self) -> int:
        return sum(self.as_tuple())

    def __add__(self, other: "ErrorBucketCounts") -> "ErrorBucketCounts":
        return ErrorBucketCounts(*(a + b for a, b in zip(self.as_tuple(), other.as_tuple())))

    def to_dict(self) -> dict[str, int]:
        return asdict(self)


@dataclass(frozen=True)
class InstanceError:
    image_id: str
    gt_index: int
    class_code: str
    bucket: str


def _check_thresholds(sigma_op: float, iou_tp: float, iou_pa: float) -> None:
    if not 0.0 < sigma_op < 1.0:
        raise InvalidThresholds(f"sigma_op must lie in (0, 1), got {sigma_op}")
    if not 0.0 < iou_pa < iou_tp < 1.0:
        raise InvalidThresholds(f"need 0 < iou_pa < iou_tp < 1, got iou_pa={iou_pa}, iou_tp={iou_tp}")


def classify_instances(
    preds: BranchPredictions,
    gt: GroundTruthSet,
    *,
    sigma_op: float = DEFAULT_SIGMA_OP,
    iou_tp: float = DEFAULT_IOU_TP,
    iou_pa: float = DEFAULT_IOU_PA,
) -> list[InstanceError]:
    """Bucket assignment for every unmatched ground-truth instance."""
    _check_thresholds(sigma_op, iou_tp, iou_pa)
    out: list[InstanceError] = []
    for image_id, gts in gt.per_image.items():
        if not gts:
            continue
        dets = list(preds.per_image.get(image_id, ()))
        ious = iou_matrix(boxes_to_xyxy([d.box for d in dets]), boxes_to_xyxy([g.box for g in gts]))
        det_cls = np.array([d.class_code for d in dets], dtype=object)
        det_score = np.array([d.score for d in dets], dtype=float)
        gt_cls = [g.class_code for g in gts]
        matched = np.zeros(len(gts), dtype=bool)
        for c in sorted(set(gt_cls)):
            d_idx = [i for i, d in enumerate(dets) if d.class_code == c and d.score >= sigma_op]
            g_idx = [j for j, gc in enumerate(gt_cls) if gc == c]
            if not d_idx:
                continue
            sub = ious[np.ix_(d_idx, g_idx)]
            order = ranking_order([dets[i] for i in d_idx])
            for j in greedy_match(sub, order, iou_tp):
                if j is not None:
                    matched[g_idx[j]] = True
        for j, g in enumerate(gts):
            if matched[j]:
                continue
            col = ious[:, j] if len(dets) else np.zeros(0)
            same = det_cls == g.class_code
            confident = det_score >= sigma_op
            if not np.any(col >= iou_pa):
                bucket = "pa"
            elif np.any(~same & confident & (col >= iou_tp)):
                bucket = "wc"
            elif np.any(same & ~confident & (col >= iou_tp)):
                bucket = "cs"
            elif np.any(same & confident & (col >= iou_pa) & (col < iou_tp)):
                bucket = "ld"
            else:
                bucket = "ld" if same[int(np.argmax(col))] else "wc"
            out.append(InstanceError(image_id, j, g.class_code, bucket))
    return out


def decompose_errors(
    preds: BranchPredictions,
    gt: GroundTruthSet,
    vocab: ClassVocabulary = DEFAULT_VOCAB,
    *,
    sigma_op: float = DEFAULT_SIGMA_OP,
    iou_tp: float = DEFAULT_IOU_TP,
    iou_pa: float = DEFAULT_IOU_PA,
) -> dict[str, ErrorBucketCounts]:
    """Per-class bucket counts for every vocabulary class (zeros where nothing was missed)."""
    tallies = {c: dict.fromkeys(BUCKETS, 0) for c in vocab.codes}
    for e in classify_instances(preds, gt, sigma_op=sigma_op, iou_tp=iou_tp, iou_pa=iou_pa):
        tallies.setdefault(e.class_code, dict.fromkeys(BUCKETS, 0))[e.bucket] += 1
    return {c: ErrorBucketCounts(t["pa"], t["wc"], t["cs"], t["ld"]) for c, t in tallies.items()}


def hcec(counts: ErrorBucketCounts, eps: float = DEFAULT_EPS) -> float:
    """Share of a class's errors in the proposal-absence and wrong-class buckets."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    hard = counts.n_pa + counts.n_wc
    return hard / (counts.total + eps)


def bsr(map_all_global: float, map_all_classbest: float, eps: float = DEFAULT_EPS) -> float:
    """Normalised all-class mAP drop from switching everything to the class-preferred branch.

    ``eps`` only guards a zero denominator: the drop is divided by
    ``max(map_all_global, eps)``, so 0.1 / 0.5 comes out as 0.2 exactly.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if map_all_global < 0 or map_all_classbest < 0:
        raise ValueError("mAP inputs must be non-negative")
    return max(0.0, (map_all_global - map_all_classbest) / max(map_all_global, eps))


@dataclass
class BranchRoleAudit:
    global_best: str
    class_best: dict[str, str]
    map_all_by_branch: dict[str, float]
    map_class_by_branch: dict[str, dict[str, float]]
    results: dict[str, EvalResult] = field(default_factory=dict, repr=False)

    @classmethod
    def from_scores(
        cls, map_all_by_branch: Mapping[str, float], map_class_by_branch: Mapping[str, Mapping[str, float]]
    ) -> "BranchRoleAudit":
        """Build the audit from already-measured scores; dict order is registration order."""
        branches = list(map_all_by_branch)
        if not branches:
            raise ValueError("need at least one branch")
        global_best = max(branches, key=lambda b: (map_all_by_branch[b], -branches.index(b)))
        classes: list[str] = []
        for b in branches:
            for c in map_class_by_branch.get(b, {}):
                if c not in classes:
                    classes.append(c)
        class_best = {}
        for c in classes:
            scored = [b for b in branches if c in map_class_by_branch.get(b, {})]
            class_best[c] = max(scored, key=lambda b: (map_class_by_branch[b][c], -branches.index(b)))
        return cls(
            global_best,
            class_best,
            dict(map_all_by_branch),
            {b: dict(map_class_by_branch.get(b, {})) for b in branches},
        )

    @property
    def asymmetric_classes(self) -> list[str]:
        """Classes whose preferred branch is not the all-class winner."""
        return [c for c, b in self.class_best.items() if b != self.global_best]

    def class_gap(self, class_code: str) -> float:
        b = self.class_best[class_code]
        return self.map_class_by_branch[b][class_code] - self.map_class_by_branch[self.global_best].get(class_code, 0.0)

    def all_class_gap(self, class_code: str) -> float:
        return self.map_all_by_branch[self.global_best] - self.map_all_by_branch[self.class_best[class_code]]

    def to_dict(self) -> dict:
        return {
            "global_best": self.global_best,
            "class_best": dict(self.class_best),
            "map_all_by_branch": dict(self.map_all_by_branch),
            "map_class_by_branch": {b: dict(v) for b, v in self.map_class_by_branch.items()},
        }


def audit_branches(
    branches: Sequence[BranchPredictions],
    gt: GroundTruthSet,
    vocab: ClassVocabulary = DEFAULT_VOCAB,
) -> BranchRoleAudit:
    if not branches:
        raise ValueError("need at least one branch")
    ids = [b.branch_id for b in branches]
    if len(set(ids)) != len(ids):
        raise ValueError(f"branch ids must be unique, got {ids}")
    results = {b.branch_id: evaluate(b, gt, vocab) for b in branches}
    audit = BranchRoleAudit.from_scores(
        {b: r.map50 for b, r in results.items()},
        {b: dict(r.per_class_ap50) for b, r in results.items()},
    )
    audit.results = results
    return audit


@dataclass(frozen=True)
class ClassReliabilityProfile:
    class_code: str
    ap50: float | None
    hcec: float
    bsr: float
    role: str
    preferred_branch: str
    dominant_mode: str
    counts: ErrorBucketCounts = ErrorBucketCounts()
    global_branch: str = ""

    def to_dict(self) -> dict:
        d = asdict(self)
        d["counts"] = self.counts.to_dict()
        return d


def dominant_mode(counts: ErrorBucketCounts, eps: float = DEFAULT_EPS, low_error_floor: int = LOW_ERROR_FLOOR) -> str:
    """Reporting label only; never consulted by the fusion policy."""
    if counts.total < low_error_floor:
        return "low-error"
    if hcec(counts, eps) > 0.5:
        return "PA+WC"
    shares = dict(zip(("PA", "WC", "CS", "LD"), counts.as_tuple()))
    top = max(shares, key=shares.get)
    return top if shares[top] * 2 > counts.total else "mixed"


def classify_roles(
    audit: BranchRoleAudit,
    buckets: Mapping[str, ErrorBucketCounts],
    tau_hard: float = DEFAULT_TAU_HARD,
    eps: float = DEFAULT_EPS,
    *,
    low_error_floor: int = LOW_ERROR_FLOOR,
) -> dict[str, ClassReliabilityProfile]:
    """Role, HCEC, BSR and dominant mode per class.

    AP comes from the all-class winner; a class without ground truth has no AP
    and stays stable.
    """
    g = audit.global_best
    ap_global = audit.map_class_by_branch.get(g, {})
    out = {}
    for c, counts in buckets.items():
        ap = ap_global.get(c)
        preferred = audit.class_best.get(c, g)
        out[c] = ClassReliabilityProfile(
            class_code=c,
            ap50=ap,
            hcec=hcec(counts, eps),
            bsr=bsr(audit.map_all_by_branch[g], audit.map_all_by_branch[preferred], eps),
            role="hard" if ap is not None and ap < tau_hard else "stable",
            preferred_branch=preferred,
            dominant_mode=dominant_mode(counts, eps, low_error_floor),
            counts=counts,
            global_branch=g,
        )
    return out


def hcec_table_rows(profiles: Mapping[str, ClassReliabilityProfile]) -> list[dict]:
    """Rows ordered by descending HCEC, one per class, for the audit CSV."""
    rows = []
    for p in sorted(profiles.values(), key=lambda p: (-p.hcec, p.class_code)):
        rows.append(
            {
                "Class": p.class_code,
                "HCEC": p.hcec,
                "BSR": p.bsr,
                "Dominant mode": p.dominant_mode,
                "AP50": "" if p.ap50 is None else p.ap50,
                "Role": p.role,
                "N_PA": p.counts.n_pa,
                "N_WC": p.counts.n_wc,
                "N_CS": p.counts.n_cs,
                "N_LD": p.counts.n_ld,
            }
        )
    return rows
