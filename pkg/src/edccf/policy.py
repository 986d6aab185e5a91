"""Per-class routing from error-bucket evidence, and the preservation check.

Arm selection for a hard class follows the printed If/ElsIf chain:

1. ``n_pa > n_cs``            -> union with the repair source at a low threshold
2. ``n_wc`` strict maximum    -> class-restricted score re-projection
3. otherwise                  -> low-weight WBF of global and repair sources

A hard class is only routed away from the global source when it has a
distinct repair source, non-zero bucket evidence, and passes the activation
gate ``bsr > 0 or hcec > hcec_gate``. Stable classes always keep the global
source, and ``apply_policy`` copies their detections through untouched.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence, Union

from .dataset_io import DEFAULT_VOCAB, BranchPredictions, ClassVocabulary, Detection, GroundTruthSet, validate_detection
from .decomposition import (
    DEFAULT_EPS,
    DEFAULT_IOU_PA,
    DEFAULT_IOU_TP,
    DEFAULT_SIGMA_OP,
    DEFAULT_TAU_HARD,
    BranchRoleAudit,
    ClassReliabilityProfile,
    ErrorBucketCounts,
    audit_branches,
    classify_roles,
    decompose_errors,
)
from .errors import MissingClass, MissingRepairBranch
from .fusion import DEFAULT_DEDUP_IOU, DEFAULT_WBF_IOU, FusionWeights, score_reprojection, union_low_threshold, wbf
from .matching import EvalResult, evaluate

W_C_RANGE = (0.10, 0.25)


@dataclass(frozen=True)
class KeepGlobal:
    name = "KeepGlobal"

    def params(self) -> dict:
        return {}


@dataclass(frozen=True)
class UnionLowThreshold:
    sigma_c: float
    name = "UnionLowThreshold"

    def params(self) -> dict:
        return {"sigma_c": self.sigma_c}


@dataclass(frozen=True)
class ScoreReprojection:
    a: float = 1.0
    b: float = 0.0
    name = "ScoreReprojection"

    def params(self) -> dict:
        return {"a": self.a, "b": self.b}


@dataclass(frozen=True)
class LowWeightWBF:
    w_c: float
    name = "LowWeightWBF"

    def __post_init__(self) -> None:
        lo, hi = W_C_RANGE
        if not lo <= self.w_c <= hi:
            raise ValueError(f"w_c must lie in [{lo}, {hi}], got {self.w_c}")

    def params(self) -> dict:
        return {"w_c": self.w_c}


PolicyArm = Union[KeepGlobal, UnionLowThreshold, ScoreReprojection, LowWeightWBF]


@dataclass(frozen=True)
class PolicyConfig:
    sigma_c: float = 0.05
    w_c: float = 0.15
    dedup_iou: float = DEFAULT_DEDUP_IOU
    wbf_iou: float = DEFAULT_WBF_IOU
    hcec_gate: float = 0.5
    # "positional" follows the printed chain; "severity" tests WC dominance first
    arm_order: str = "positional"
    calibration: Mapping[str, tuple[float, float]] = field(default_factory=dict)
    require_distinct_source: bool = True

    def __post_init__(self) -> None:
        if self.arm_order not in ("positional", "severity"):
            raise ValueError(f"unknown arm_order {self.arm_order!r}")
        if not 0.0 <= self.sigma_c < 1.0:
            raise ValueError("sigma_c must lie in [0, 1)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["calibration"] = {c: list(v) for c, v in self.calibration.items()}
        return d


@dataclass(frozen=True)
class ProvenanceRecord:
    class_code: str
    role: str
    arm: str
    reason: str
    counts: ErrorBucketCounts
    hcec: float
    bsr: float
    ap50: float | None
    preferred_branch: str
    warnings: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        d = asdict(self)
        d["counts"] = self.counts.to_dict()
        d["warnings"] = list(self.warnings)
        return d


@dataclass
class FusionPolicy:
    per_class: dict[str, PolicyArm]
    thresholds: dict[str, float]
    provenance: dict[str, ProvenanceRecord]
    repair_source: dict[str, str] = field(default_factory=dict)

    @property
    def active_classes(self) -> list[str]:
        return [c for c, arm in self.per_class.items() if not isinstance(arm, KeepGlobal)]

    def arm(self, class_code: str) -> PolicyArm:
        return self.per_class.get(class_code, KeepGlobal())

    def to_dict(self) -> dict:
        return {
            "per_class": {c: {"arm": a.name, **a.params()} for c, a in self.per_class.items()},
            "thresholds": dict(self.thresholds),
            "repair_source": dict(self.repair_source),
            "provenance": {c: p.to_dict() for c, p in self.provenance.items()},
        }


def _select_arm(counts: ErrorBucketCounts, class_code: str, cfg: PolicyConfig) -> tuple[PolicyArm, str]:
    pa, wc, cs, ld = counts.as_tuple()
    wc_dominates = wc > max(pa, cs, ld)
    a, b = cfg.calibration.get(class_code, (1.0, 0.0))
    w_c = min(max(cfg.w_c, W_C_RANGE[0]), W_C_RANGE[1])
    union = (UnionLowThreshold(cfg.sigma_c), f"n_pa {pa} > n_cs {cs}")
    reproj = (ScoreReprojection(a, b), f"n_wc {wc} is the strict maximum bucket")
    fallback = (LowWeightWBF(w_c), "no PA surplus over CS and no strict WC dominance")
    if cfg.arm_order == "severity":
        if wc_dominates:
            return reproj
        if pa > cs:
            return union
        return fallback
    if pa > cs:
        return union
    if wc_dominates:
        return reproj
    return fallback


def derive_policy(
    profiles: Mapping[str, ClassReliabilityProfile],
    buckets: Mapping[str, ErrorBucketCounts],
    config: PolicyConfig = PolicyConfig(),
) -> FusionPolicy:
    if set(profiles) != set(buckets):
        missing = sorted(set(profiles) ^ set(buckets))
        raise MissingClass(f"profiles and buckets disagree on classes: {missing}")
    per_class: dict[str, PolicyArm] = {}
    thresholds: dict[str, float] = {}
    provenance: dict[str, ProvenanceRecord] = {}
    repair_source: dict[str, str] = {}
    for c, p in profiles.items():
        counts = buckets[c]
        warnings: list[str] = []
        arm: PolicyArm = KeepGlobal()
        if p.role != "hard":
            reason = "stable class keeps the global source"
        elif config.require_distinct_source and p.global_branch and p.preferred_branch == p.global_branch:
            reason = "no class-preferred branch distinct from the global branch"
            warnings.append("hard class left on global source: no repair source")
        elif counts.total == 0:
            reason = "all error buckets are zero"
            warnings.append("hard class with empty buckets; nothing to route")
        elif not (p.bsr > 0 or p.hcec > config.hcec_gate):
            reason = f"activation gate closed (bsr {p.bsr:.6g} = 0 and hcec {p.hcec:.6g} <= {config.hcec_gate})"
        else:
            arm, reason = _select_arm(counts, c, config)
            repair_source[c] = p.preferred_branch
            if isinstance(arm, UnionLowThreshold):
                thresholds[c] = arm.sigma_c
        per_class[c] = arm
        provenance[c] = ProvenanceRecord(
            class_code=c,
            role=p.role,
            arm=arm.name,
            reason=reason,
            counts=counts,
            hcec=p.hcec,
            bsr=p.bsr,
            ap50=p.ap50,
            preferred_branch=p.preferred_branch,
            warnings=tuple(warnings),
        )
    return FusionPolicy(per_class, thresholds, provenance, repair_source)


@dataclass
class FusedOutput:
    predictions: BranchPredictions
    policy: FusionPolicy
    attribution: dict[str, str]


def apply_policy(
    policy: FusionPolicy,
    global_branch: BranchPredictions,
    repair_branches: Mapping[str, BranchPredictions],
    vocab: ClassVocabulary = DEFAULT_VOCAB,
    *,
    dedup_iou: float = DEFAULT_DEDUP_IOU,
    wbf_iou: float = DEFAULT_WBF_IOU,
    branch_id: str = "edccf",
) -> FusedOutput:
    """Route every class through its arm, image by image.

    Detections of KeepGlobal classes are the global branch's own objects in
    their original order; routed classes are appended after them.
    """
    active = policy.active_classes
    missing = [c for c in active if c not in repair_branches]
    if missing:
        raise MissingRepairBranch(f"no repair branch for routed class(es) {missing}")
    attribution = {c: global_branch.branch_id for c in vocab.codes}
    for c in active:
        arm = policy.per_class[c]
        attribution[c] = f"{arm.name}({global_branch.branch_id}, {repair_branches[c].branch_id})"
    active_set = set(active)
    per_image: dict[str, list[Detection]] = {}
    for image_id, dets in global_branch.per_image.items():
        out = [d for d in dets if d.class_code not in active_set]
        for c in active:
            arm = policy.per_class[c]
            g_c = [d for d in dets if d.class_code == c]
            repair = repair_branches[c]
            r_c = [d for d in repair.per_image.get(image_id, ()) if d.class_code == c]
            if isinstance(arm, UnionLowThreshold):
                produced = union_low_threshold(g_c, r_c, arm.sigma_c, dedup_iou)
            elif isinstance(arm, ScoreReprojection):
                produced = score_reprojection(g_c, c, arm.a, arm.b)
            elif isinstance(arm, LowWeightWBF):
                weights = FusionWeights({"global": 1.0 - arm.w_c, "repair": arm.w_c})
                produced = [t.fused for t in wbf([("global", g_c), ("repair", r_c)], weights, wbf_iou)]
            else:  # pragma: no cover - active classes are never KeepGlobal
                produced = g_c
            for d in produced:
                validate_detection(d, vocab)
            out.extend(produced)
        per_image[image_id] = out
    return FusedOutput(BranchPredictions(branch_id, per_image), policy, attribution)


@dataclass
class PreservationReport:
    stable_violations: list[tuple[str, float, float]] = field(default_factory=list)
    hard_not_improved: list[tuple[str, float, float]] = field(default_factory=list)
    tol: float = 0.0

    @property
    def ok(self) -> bool:
        return not (self.stable_violations or self.hard_not_improved)

    def to_dict(self) -> dict:
        return {
            "ok": self.ok,
            "tol": self.tol,
            "stable_violations": [{"class": c, "before": b, "after": a} for c, b, a in self.stable_violations],
            "hard_not_improved": [{"class": c, "before": b, "after": a} for c, b, a in self.hard_not_improved],
        }


def verify_preservation(
    before: EvalResult, after: EvalResult, hard_set: Sequence[str], tol: float = 0.0
) -> PreservationReport:
    """Stable classes may not lose more than ``tol`` AP50; hard classes must strictly gain."""
    report = PreservationReport(tol=tol)
    hard = set(hard_set)
    for c, ap_before in before.per_class_ap50.items():
        ap_after = after.per_class_ap50.get(c, 0.0)
        if c in hard:
            if not ap_after > ap_before:
                report.hard_not_improved.append((c, ap_before, ap_after))
        elif ap_before - ap_after > tol:
            report.stable_violations.append((c, ap_before, ap_after))
    return report


@dataclass
class EdccfRun:
    buckets: dict[str, ErrorBucketCounts]
    audit: BranchRoleAudit
    profiles: dict[str, ClassReliabilityProfile]
    policy: FusionPolicy
    fused: FusedOutput
    before: EvalResult
    after: EvalResult
    preservation: PreservationReport

    @property
    def hard_classes(self) -> list[str]:
        return [c for c, p in self.profiles.items() if p.role == "hard"]

    def to_dict(self) -> dict:
        return {
            "audit": self.audit.to_dict(),
            "buckets": {c: b.to_dict() for c, b in self.buckets.items()},
            "profiles": {c: p.to_dict() for c, p in self.profiles.items()},
            "policy": self.policy.to_dict(),
            "attribution": dict(self.fused.attribution),
            "before": self.before.to_dict(),
            "after": self.after.to_dict(),
            "preservation": self.preservation.to_dict(),
        }


def run_edccf(
    global_branch: BranchPredictions,
    repair_branches: Sequence[BranchPredictions],
    gt: GroundTruthSet,
    vocab: ClassVocabulary = DEFAULT_VOCAB,
    *,
    sigma_op: float = DEFAULT_SIGMA_OP,
    iou_tp: float = DEFAULT_IOU_TP,
    iou_pa: float = DEFAULT_IOU_PA,
    tau_hard: float = DEFAULT_TAU_HARD,
    eps: float = DEFAULT_EPS,
    config: PolicyConfig = PolicyConfig(),
    tol: float = 0.0,
) -> EdccfRun:
    """decompose -> audit -> roles -> policy -> apply -> evaluate -> verify.

    Buckets are measured on ``global_branch``; each routed class is repaired
    from its class-preferred branch as found by the audit.
    """
    branches = [global_branch, *repair_branches]
    by_id = {b.branch_id: b for b in branches}
    buckets = decompose_errors(global_branch, gt, vocab, sigma_op=sigma_op, iou_tp=iou_tp, iou_pa=iou_pa)
    audit = audit_branches(branches, gt, vocab)
    if audit.global_best != global_branch.branch_id:
        # the deployed source defines "global"; keep the audit's rankings but anchor BSR on it
        audit = BranchRoleAudit(
            global_branch.branch_id,
            dict(audit.class_best),
            audit.map_all_by_branch,
            audit.map_class_by_branch,
            audit.results,
        )
    profiles = classify_roles(audit, buckets, tau_hard, eps)
    policy = derive_policy(profiles, buckets, config)
    repairs = {c: by_id[policy.repair_source[c]] for c in policy.active_classes}
    fused = apply_policy(
        policy, global_branch, repairs, vocab, dedup_iou=config.dedup_iou, wbf_iou=config.wbf_iou
    )
    before = audit.results[global_branch.branch_id]
    after = evaluate(fused.predictions, gt, vocab)
    hard = [c for c, p in profiles.items() if p.role == "hard"]
    preservation = verify_preservation(before, after, hard, tol)
    return EdccfRun(buckets, audit, profiles, policy, fused, before, after, preservation)
