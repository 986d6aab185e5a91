"""Synthetic ground truth and detector branches with controllable per-class
precision and recall, plus the experiments that run on them.

Geometry lives on the unit square: boxes are 5-20% of the image side, so
only IoU matters and scale never does. Score laws: true positives draw from
a Gaussian with mean 0.6 + 0.3*pi, false positives from mean 0.6 - 0.3*pi,
both sd ``score_noise`` and clipped to [0, 1]; a branch with higher precision
therefore also separates its scores better. ``calibration="scrambled"``
swaps pi for 1 - pi inside the score laws only, which breaks that ordering
across branches.

Every generator takes an explicit seed; nothing touches global random state.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .dataset_io import (
    DEFAULT_VOCAB,
    Box,
    BranchPredictions,
    ClassVocabulary,
    Detection,
    GroundTruth,
    GroundTruthSet,
)
from .decomposition import decompose_errors, hcec
from .errors import InvalidDistribution
from .fusion import FusionWeights, union_low_threshold, wbf
from .matching import boxes_to_xyxy, evaluate, iou, iou_matrix
from .policy import EdccfRun, PolicyConfig, run_edccf
from .stats import PairedTrialTable, TestReport, report, subset_trials

# box counts per class in the 4000-image training partition
TRAIN_BOX_COUNTS = {
    "zxlf": 1631,
    "hxlf": 1330,
    "lmlj": 1000,
    "jl": 702,
    "kc": 492,
    "cz": 285,
    "ssf": 256,
    "hbgdf": 47,
}
DEFAULT_CLASS_DIST = {c: n / sum(TRAIN_BOX_COUNTS.values()) for c, n in TRAIN_BOX_COUNTS.items()}

BOX_SIDE = (0.05, 0.20)
FP_MAX_IOU = 0.1


def child_seed(seed: int, *keys: int) -> int:
    """Independent integer seed derived from ``seed`` and a key path."""
    return int(np.random.SeedSequence([seed, *keys]).generate_state(1)[0])


def _random_box(rng: np.random.Generator) -> Box:
    w, h = rng.uniform(*BOX_SIDE, size=2)
    x = rng.uniform(0.0, 1.0 - w)
    y = rng.uniform(0.0, 1.0 - h)
    return Box(float(x), float(y), float(w), float(h))


def generate_scene(
    class_dist: Mapping[str, float] | None = None,
    n_images: int = 600,
    boxes_per_image: tuple[int, int] = (1, 2),
    seed: int = 0,
    vocab: ClassVocabulary = DEFAULT_VOCAB,
    *,
    max_tries: int = 20,
) -> GroundTruthSet:
    """Ground truth with class fractions drawn from ``class_dist`` (default: the long-tail training mix).

    ``boxes_per_image`` is an inclusive uniform range. Boxes in one image
    overlap each other by IoU <= 0.1 whenever ``max_tries`` allows.
    """
    dist = dict(DEFAULT_CLASS_DIST if class_dist is None else class_dist)
    if not dist or any(p < 0 for p in dist.values()) or abs(sum(dist.values()) - 1.0) > 1e-9:
        raise InvalidDistribution(f"class fractions must be non-negative and sum to 1, got {dist}")
    unknown = [c for c in dist if c not in vocab]
    if unknown:
        raise InvalidDistribution(f"classes not in vocabulary: {unknown}")
    lo, hi = boxes_per_image
    if lo < 0 or hi < lo:
        raise ValueError("boxes_per_image must be an increasing non-negative range")
    codes = list(dist)
    probs = np.array([dist[c] for c in codes])
    probs = probs / probs.sum()
    rng = np.random.default_rng(seed)
    per_image: dict[str, list[GroundTruth]] = {}
    for i in range(n_images):
        k = int(rng.integers(lo, hi + 1))
        labels = rng.choice(len(codes), size=k, p=probs)
        boxes: list[Box] = []
        for _ in range(k):
            box = _random_box(rng)
            for _ in range(max_tries - 1):
                if all(iou(box, b) <= FP_MAX_IOU for b in boxes):
                    break
                box = _random_box(rng)
            boxes.append(box)
        per_image[f"img{i:05d}"] = [GroundTruth(codes[j], b) for j, b in zip(labels, boxes)]
    return GroundTruthSet(per_image)


@dataclass(frozen=True)
class BranchProfile:
    precision: Mapping[str, float] = field(default_factory=dict)
    recall: Mapping[str, float] = field(default_factory=dict)
    default_precision: float = 0.8
    default_recall: float = 0.8
    score_noise: float = 0.1
    jitter: float = 0.03
    calibration: str = "order_preserving"
    # probability that a missed truth is instead reported under another class
    wrong_class: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        vals = [*self.precision.values(), *self.recall.values(), self.default_precision, self.default_recall]
        if any(not 0.0 <= v <= 1.0 for v in vals):
            raise ValueError("precision and recall must lie in [0, 1]")
        if self.jitter < 0 or self.score_noise < 0:
            raise ValueError("jitter and score_noise must be non-negative")
        if self.calibration not in ("order_preserving", "scrambled"):
            raise ValueError(f"unknown calibration flag {self.calibration!r}")

    def pi(self, c: str) -> float:
        return self.precision.get(c, self.default_precision)

    def rho(self, c: str) -> float:
        return self.recall.get(c, self.default_recall)

    @property
    def order_preserving(self) -> bool:
        return self.calibration == "order_preserving"

    def score_pi(self, c: str) -> float:
        return self.pi(c) if self.order_preserving else 1.0 - self.pi(c)


def _score(rng: np.random.Generator, mean: float, sd: float) -> float:
    return float(np.clip(rng.normal(mean, sd), 0.0, 1.0)) if sd > 0 else float(np.clip(mean, 0.0, 1.0))


def _jittered(rng: np.random.Generator, b: Box, jitter: float) -> Box:
    if jitter == 0:
        return b
    w = max(b.w * (1.0 + rng.normal(0.0, jitter)), 1e-4)
    h = max(b.h * (1.0 + rng.normal(0.0, jitter)), 1e-4)
    x = max(b.x + rng.normal(0.0, jitter * b.w), 0.0)
    y = max(b.y + rng.normal(0.0, jitter * b.h), 0.0)
    return Box(float(x), float(y), float(w), float(h))


def simulate_branch(
    gt: GroundTruthSet,
    profile: BranchProfile,
    seed: int = 0,
    vocab: ClassVocabulary = DEFAULT_VOCAB,
    *,
    branch_id: str = "sim",
) -> BranchPredictions:
    """Detect each truth with probability rho(c); add false positives so expected precision is pi(c).

    False positives per class are spread uniformly over images (Poisson) and
    never overlap a same-class truth above IoU 0.1. With pi(c) = 0 the class
    gets no true positives and one false positive per truth.
    """
    rng = np.random.default_rng(seed)
    ids = gt.image_ids
    per_image: dict[str, list[Detection]] = {i: [] for i in ids}
    counts = gt.class_counts()
    for c in vocab.codes:
        pi, rho = profile.pi(c), profile.rho(c)
        sp = profile.score_pi(c)
        tp_mean, fp_mean = 0.6 + 0.3 * sp, 0.6 - 0.3 * sp
        n_c = counts.get(c, 0)
        wc_rate = profile.wrong_class.get(c, 0.0)
        others = [o for o in vocab.codes if o != c]
        for image_id in ids:
            for g in gt.per_image[image_id]:
                if g.class_code != c:
                    continue
                u = rng.random()
                if pi > 0 and u < rho:
                    per_image[image_id].append(
                        Detection(c, _jittered(rng, g.box, profile.jitter), _score(rng, tp_mean, profile.score_noise))
                    )
                elif wc_rate > 0 and others and rng.random() < wc_rate:
                    other = others[int(rng.integers(len(others)))]
                    per_image[image_id].append(
                        Detection(other, _jittered(rng, g.box, profile.jitter), _score(rng, tp_mean, profile.score_noise))
                    )
        if n_c == 0 or rho == 0:
            continue
        expected_fp = n_c * rho * (1.0 - pi) / pi if pi > 0 else float(n_c)
        lam = expected_fp / max(len(ids), 1)
        for image_id in ids:
            truths = [g.box for g in gt.per_image[image_id] if g.class_code == c]
            for _ in range(int(rng.poisson(lam))):
                for _ in range(50):
                    box = _random_box(rng)
                    if all(iou(box, t) <= FP_MAX_IOU for t in truths):
                        per_image[image_id].append(Detection(c, box, _score(rng, fp_mean, profile.score_noise)))
                        break
    return BranchPredictions(branch_id, per_image)


def random_branch(
    gt: GroundTruthSet, class_code: str, per_image: float = 1.0, seed: int = 0, *, branch_id: str = "random"
) -> BranchPredictions:
    """Uninformative boxes of one class with uniform scores (a corrupted repair source)."""
    rng = np.random.default_rng(seed)
    out: dict[str, list[Detection]] = {}
    for image_id in gt.image_ids:
        out[image_id] = [
            Detection(class_code, _random_box(rng), float(rng.uniform())) for _ in range(int(rng.poisson(per_image)))
        ]
    return BranchPredictions(branch_id, out)


# ---------------------------------------------------------------------------
# dominance experiments


@dataclass(frozen=True)
class DominanceResult:
    ap_uniform: float
    ap_class_weighted: float
    precision_variance: float
    added_recall: bool
    strict_gain: bool
    assumptions_hold: bool = True
    seed: int | None = None

    @property
    def delta(self) -> float:
        return self.ap_class_weighted - self.ap_uniform

    def to_row(self) -> dict:
        return {
            "seed": self.seed,
            "ap_uniform": self.ap_uniform,
            "ap_class_weighted": self.ap_class_weighted,
            "delta": self.delta,
            "precision_variance": self.precision_variance,
            "added_recall": self.added_recall,
            "strict_gain": self.strict_gain,
            "assumptions_hold": self.assumptions_hold,
        }


def _detected_truths(preds: BranchPredictions, gt: GroundTruthSet, c: str, iou_thresh: float = 0.5) -> set:
    found = set()
    for image_id, gts in gt.per_image.items():
        truths = [(j, g.box) for j, g in enumerate(gts) if g.class_code == c]
        dets = [d.box for d in preds.per_image.get(image_id, ()) if d.class_code == c]
        if not truths or not dets:
            continue
        m = iou_matrix(boxes_to_xyxy(dets), boxes_to_xyxy([b for _, b in truths]))
        for k, (j, _) in enumerate(truths):
            if np.any(m[:, k] >= iou_thresh):
                found.add((image_id, j))
    return found


def dominance_experiment(
    gt: GroundTruthSet,
    branches: Sequence[tuple[BranchPredictions, BranchProfile]],
    hard_class: str,
    *,
    iou_cluster: float = 0.55,
    seed: int | None = None,
) -> DominanceResult:
    """Fuse ``hard_class`` with uniform and with precision-proportional WBF weights; compare AP50."""
    if len(branches) < 2:
        raise ValueError("need at least two branches")
    ids = [f"b{k}" for k in range(len(branches))]
    pis = np.array([p.pi(hard_class) for _, p in branches], dtype=float)
    uniform = FusionWeights.uniform(ids)
    weighted = FusionWeights(dict(zip(ids, pis))) if pis.sum() > 0 else uniform
    vocab = ClassVocabulary((hard_class,))

    def fused(weights: FusionWeights) -> BranchPredictions:
        per_image = {}
        for image_id in gt.image_ids:
            src = [(bid, [d for d in bp.per_image.get(image_id, ()) if d.class_code == hard_class])
                   for bid, (bp, _) in zip(ids, branches)]
            per_image[image_id] = [t.fused for t in wbf(src, weights, iou_cluster)]
        return BranchPredictions("fused", per_image)

    ap_u = evaluate(fused(uniform), gt, vocab).per_class_ap50.get(hard_class, 0.0)
    ap_w = evaluate(fused(weighted), gt, vocab).per_class_ap50.get(hard_class, 0.0)
    found = [_detected_truths(bp, gt, hard_class) for bp, _ in branches]
    added = False
    for k in range(len(branches)):
        if pis[k] > pis.min():
            others = set().union(*(found[j] for j in range(len(branches)) if j != k))
            if found[k] - others:
                added = True
    var = float(np.var(pis))
    holds = all(p.order_preserving for _, p in branches) and var > 0 and added
    return DominanceResult(ap_u, ap_w, var, added, ap_w > ap_u, holds, seed)


def dominance_suite(
    n_seeds: int = 200,
    base_seed: int = 0,
    *,
    precisions: Sequence[float] = (0.9, 0.3),
    recalls: Sequence[float] = (0.9, 0.3),
    calibration: str = "order_preserving",
    hard_class: str = "cz",
    n_images: int = 40,
    boxes_per_image: tuple[int, int] = (1, 3),
    jitter: float = 0.03,
) -> list[DominanceResult]:
    """One independent scene and branch set per seed ``base_seed .. base_seed + n_seeds - 1``."""
    if len(precisions) != len(recalls):
        raise ValueError("precisions and recalls must align")
    out = []
    for s in range(base_seed, base_seed + n_seeds):
        gt = generate_scene({hard_class: 1.0}, n_images, boxes_per_image, child_seed(s, 0))
        branches = []
        for k, (pi, rho) in enumerate(zip(precisions, recalls)):
            prof = BranchProfile({hard_class: pi}, {hard_class: rho}, jitter=jitter, calibration=calibration)
            branches.append((simulate_branch(gt, prof, child_seed(s, k + 1), branch_id=f"b{k}"), prof))
        out.append(dominance_experiment(gt, branches, hard_class, seed=s))
    return out


def union_gain_grid(
    global_recalls: Sequence[float] = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8),
    seeds: Sequence[int] = (0, 1, 2),
    *,
    hard_class: str = "cz",
    n_images: int = 150,
    repair: tuple[float, float] = (0.7, 0.7),
    sigma_c: float = 0.05,
) -> list[dict]:
    """HCEC of the global branch vs AP50 gain of the union arm, localisation drift held at zero."""
    rows = []
    vocab = ClassVocabulary((hard_class,))
    for s in seeds:
        gt = generate_scene({hard_class: 1.0}, n_images, (1, 3), child_seed(s, 100))
        rep = simulate_branch(
            gt, BranchProfile({hard_class: repair[0]}, {hard_class: repair[1]}, jitter=0.0), child_seed(s, 101), vocab
        )
        for k, rho in enumerate(global_recalls):
            prof = BranchProfile({hard_class: 0.7}, {hard_class: rho}, jitter=0.0)
            glob = simulate_branch(gt, prof, child_seed(s, 200 + k), vocab, branch_id="global")
            counts = decompose_errors(glob, gt, vocab)[hard_class]
            merged = BranchPredictions(
                "union",
                {
                    i: union_low_threshold(list(glob.per_image[i]), list(rep.per_image[i]), sigma_c)
                    for i in gt.image_ids
                },
            )
            before = evaluate(glob, gt, vocab).per_class_ap50[hard_class]
            after = evaluate(merged, gt, vocab).per_class_ap50[hard_class]
            rows.append(
                {
                    "seed": s,
                    "global_recall": rho,
                    "hcec": hcec(counts),
                    "n_ld": counts.n_ld,
                    "gain": after - before,
                }
            )
    return rows


# ---------------------------------------------------------------------------
# end-to-end scenario


SCENARIO_VARIANTS = ("default", "no_signal", "corrupted")


def scenario_branches(gt: GroundTruthSet, seed: int, variant: str = "default", hard_class: str = "cz"):
    """(global branch, repair branch) for one of the named scenario variants."""
    if variant not in SCENARIO_VARIANTS:
        raise ValueError(f"unknown scenario variant {variant!r}")
    global_profile = BranchProfile(
        precision={hard_class: 0.45}, recall={hard_class: 0.25}, default_precision=0.85, default_recall=0.85
    )
    glob = simulate_branch(gt, global_profile, child_seed(seed, 1), branch_id="replay")
    if variant == "default":
        spec_profile = BranchProfile(
            precision={hard_class: 0.6}, recall={hard_class: 0.55}, default_precision=0.5, default_recall=0.3
        )
        repair = simulate_branch(gt, spec_profile, child_seed(seed, 2), branch_id=f"{hard_class}-specialist")
    elif variant == "no_signal":
        spec_profile = BranchProfile(
            precision={hard_class: 0.3}, recall={hard_class: 0.05}, default_precision=0.5, default_recall=0.3
        )
        repair = simulate_branch(gt, spec_profile, child_seed(seed, 2), branch_id=f"{hard_class}-specialist")
    else:
        repair = random_branch(gt, hard_class, 1.0, child_seed(seed, 3), branch_id=f"{hard_class}-specialist")
    return glob, repair


@dataclass
class ScenarioBundle:
    seed: int
    variant: str
    gt: GroundTruthSet
    global_branch: BranchPredictions
    repair_branch: BranchPredictions
    run: EdccfRun
    trials: PairedTrialTable | None
    reports: dict[str, TestReport]

    @property
    def candidate(self) -> BranchPredictions:
        return self.run.fused.predictions


def hcrp_end_to_end(
    seed: int = 0,
    *,
    variant: str = "default",
    n_images: int = 600,
    n_trials: int = 50,
    subset_size: int = 450,
    k: int = 15,
    n_resamples: int = 1000,
    hard_class: str = "cz",
    config: PolicyConfig = PolicyConfig(),
) -> ScenarioBundle:
    """Two-branch scenario run through decompose, policy, apply, evaluate and the subset-trial statistics.

    ``n_trials=0`` skips the statistics stage.
    """
    gt = generate_scene(None, n_images, (1, 2), child_seed(seed, 0))
    glob, repair = scenario_branches(gt, seed, variant, hard_class)
    run = run_edccf(glob, [repair], gt, config=config)
    trials, reports = None, {}
    if n_trials > 0:
        trials = subset_trials(glob, run.fused.predictions, gt, n_trials, subset_size, seed, classes=(hard_class,))
        reports = report(trials, k, n_resamples, seed)
    return ScenarioBundle(seed, variant, gt, glob, repair, run, trials, reports)
