"""Confidence recalibration (CRC) and route-confidence sweeps (RCV).

CRC fits ``s' = sigmoid(a*s + b)`` for one class by binary cross-entropy on
an image-level held-out split and reports the AP change on the remaining
images. RCV blends the hard class between the global and a hard-class source
with WBF weights ``(1 - alpha, alpha)``.

Both reporters say so plainly when the best row is the unmodified candidate.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .dataset_io import DEFAULT_VOCAB, BranchPredictions, ClassVocabulary, Detection, GroundTruthSet
from .errors import InsufficientData, NonConvergence
from .fusion import DEFAULT_WBF_IOU, FusionWeights, score_reprojection, wbf
from .matching import EvalResult, ap_from_ranked, evaluate, match_class

DEFAULT_ALPHAS = (0.0, 0.25, 0.5, 0.75, 1.0)
SLOPE_CAP = 50.0
MIN_SAMPLES = 10


@dataclass(frozen=True)
class LabeledScore:
    image_id: str
    score: float
    is_tp: bool


def label_detections(
    preds: BranchPredictions, gt: GroundTruthSet, class_code: str, iou_tp: float = 0.5
) -> tuple[list[LabeledScore], dict[str, int]]:
    """TP/FP labels for one class from greedy matching, plus per-image truth counts."""
    samples: list[LabeledScore] = []
    n_gt: dict[str, int] = {}
    for image_id, gts in gt.per_image.items():
        cgts = [g.box for g in gts if g.class_code == class_code]
        n_gt[image_id] = len(cgts)
        cdets = [d for d in preds.per_image.get(image_id, ()) if d.class_code == class_code]
        for rec in match_class(cdets, cgts, iou_tp, image_id=image_id):
            samples.append(LabeledScore(image_id, rec.score, rec.is_tp))
    return samples, n_gt


@dataclass
class CalibrationFit:
    class_code: str
    a: float
    b: float
    fit_loss: float
    holdout_ap_delta: float
    converged: bool = True
    n_iter: int = 0
    n_fit: int = 0
    n_holdout: int = 0
    fit_images: tuple[str, ...] = field(default=(), repr=False)

    def transform(self, score: float) -> float:
        z = self.a * score + self.b
        return 1.0 / (1.0 + math.exp(-z)) if z >= 0 else math.exp(z) / (1.0 + math.exp(z))

    def to_dict(self) -> dict:
        return {
            "class": self.class_code,
            "a": self.a,
            "b": self.b,
            "fit_loss": self.fit_loss,
            "holdout_ap_delta": self.holdout_ap_delta,
            "converged": self.converged,
            "n_iter": self.n_iter,
            "n_fit": self.n_fit,
            "n_holdout": self.n_holdout,
        }


def _bce(theta: np.ndarray, s: np.ndarray, y: np.ndarray) -> float:
    z = theta[0] * s + theta[1]
    return float(np.mean(np.logaddexp(0.0, z) - y * z))


def fit_logistic(
    scores: np.ndarray,
    labels: np.ndarray,
    *,
    cap: float = SLOPE_CAP,
    max_iter: int = 100,
    tol: float = 1e-8,
) -> tuple[float, float, float, bool, int]:
    """Box-constrained damped Newton for ``sigmoid(a*s + b)``; returns (a, b, loss, converged, iterations).

    Both parameters are kept in ``[-cap, cap]``; a parameter sitting on its
    bound with the gradient pointing outward is frozen for the step.
    """
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels, dtype=float)
    X = np.column_stack([s, np.ones_like(s)])
    theta = np.zeros(2)
    loss = _bce(theta, s, y)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        p = 0.5 * (1.0 + np.tanh(0.5 * (X @ theta)))
        g = X.T @ (p - y) / len(s)
        at_hi = (theta >= cap) & (g < 0)
        at_lo = (theta <= -cap) & (g > 0)
        free = ~(at_hi | at_lo)
        if np.linalg.norm(g[free]) < tol:
            converged = True
            break
        H = (X * (p * (1 - p))[:, None]).T @ X / len(s) + 1e-12 * np.eye(2)
        step = np.zeros(2)
        idx = np.flatnonzero(free)
        step[idx] = -np.linalg.solve(H[np.ix_(idx, idx)], g[idx])
        t = 1.0
        while True:
            cand = np.clip(theta + t * step, -cap, cap)
            new_loss = _bce(cand, s, y)
            if new_loss <= loss + 1e-4 * float(g @ (cand - theta)) or t < 1e-12:
                break
            t *= 0.5
        if new_loss > loss:
            # no descent possible along the Newton direction; the projected gradient is what it is
            converged = bool(np.linalg.norm(g[free]) < math.sqrt(tol))
            break
        theta, loss = cand, new_loss
    else:
        p = 0.5 * (1.0 + np.tanh(0.5 * (X @ theta)))
        g = X.T @ (p - y) / len(s)
        free = ~(((theta >= cap) & (g < 0)) | ((theta <= -cap) & (g > 0)))
        converged = bool(np.linalg.norm(g[free]) < tol)
    return float(theta[0]), float(theta[1]), loss, converged, it


def _holdout_ap(samples: Sequence[LabeledScore], n_gt: int, transform=None, a_sign: float = 1.0) -> float:
    if not samples:
        return 0.0
    raw = np.array([x.score for x in samples])
    shown = raw if transform is None else np.array([transform(v) for v in raw])
    # saturation can merge transformed scores; the monotone map keeps the raw order underneath
    order = np.lexsort((-a_sign * raw, -shown))
    tp = np.array([samples[i].is_tp for i in order], dtype=np.int64)
    return ap_from_ranked(tp, n_gt)


def split_images(image_ids: Sequence[str], split_fraction: float, seed: int) -> tuple[list[str], list[str]]:
    """Deterministic image-level split: (fit images, held-out images)."""
    ids = sorted(set(image_ids))
    rng = np.random.default_rng(seed)
    perm = [ids[i] for i in rng.permutation(len(ids))]
    n_fit = int(round(split_fraction * len(ids)))
    n_fit = min(max(n_fit, 1), max(len(ids) - 1, 1))
    return sorted(perm[:n_fit]), sorted(perm[n_fit:])


def fit_crc(
    samples: Sequence[LabeledScore],
    class_code: str = "",
    split_fraction: float = 0.5,
    seed: int = 0,
    *,
    n_gt_by_image: Mapping[str, int] | None = None,
    max_iter: int = 100,
    tol: float = 1e-8,
) -> CalibrationFit:
    """Fit on one image split, measure AP change on the other.

    The fit depends only on which images land in the fit split, never on
    sample order. ``NonConvergence`` is warned, not raised.
    """
    if len(samples) < MIN_SAMPLES:
        raise InsufficientData(f"need at least {MIN_SAMPLES} labeled detections, got {len(samples)}")
    if not 0.0 < split_fraction < 1.0:
        raise ValueError("split_fraction must lie in (0, 1)")
    images = list(n_gt_by_image) if n_gt_by_image is not None else [x.image_id for x in samples]
    fit_ids, hold_ids = split_images(images, split_fraction, seed)
    fit_set, hold_set = set(fit_ids), set(hold_ids)
    fit_s = sorted((x for x in samples if x.image_id in fit_set), key=lambda x: (x.image_id, -x.score, x.is_tp))
    hold_s = sorted((x for x in samples if x.image_id in hold_set), key=lambda x: (x.image_id, -x.score, x.is_tp))
    if not fit_s:
        raise InsufficientData("fit split holds no detections")
    a, b, loss, converged, n_iter = fit_logistic(
        np.array([x.score for x in fit_s]), np.array([x.is_tp for x in fit_s], dtype=float), max_iter=max_iter, tol=tol
    )
    if not converged:
        warnings.warn(f"CRC fit for {class_code!r} stopped after {n_iter} iterations", NonConvergence, stacklevel=2)
    if n_gt_by_image is not None:
        hold_gt = sum(n_gt_by_image.get(i, 0) for i in hold_ids)
    else:
        hold_gt = sum(x.is_tp for x in hold_s)
    fit = CalibrationFit(class_code, a, b, loss, 0.0, converged, n_iter, len(fit_s), len(hold_s), tuple(fit_ids))
    sign = 1.0 if a > 0 else (-1.0 if a < 0 else 0.0)
    fit.holdout_ap_delta = _holdout_ap(hold_s, hold_gt, fit.transform, sign) - _holdout_ap(hold_s, hold_gt)
    return fit


@dataclass
class CrcCheck:
    fit: CalibrationFit
    before: EvalResult
    after: EvalResult
    holdout_images: tuple[str, ...]

    @property
    def matches_candidate(self) -> bool:
        return self.before.to_dict() == self.after.to_dict()

    def summary(self) -> dict:
        c = self.fit.class_code
        return {
            **self.fit.to_dict(),
            "map50_before": self.before.map50,
            "map50_after": self.after.map50,
            "class_ap50_before": self.before.per_class_ap50.get(c),
            "class_ap50_after": self.after.per_class_ap50.get(c),
            "matches_candidate": self.matches_candidate,
            "verdict": (
                "best CRC row matches the unmodified candidate; no gain claimed"
                if self.matches_candidate
                else "CRC transform changes held-out metrics"
            ),
        }


def crc_check(
    candidate: BranchPredictions,
    gt: GroundTruthSet,
    class_code: str,
    vocab: ClassVocabulary = DEFAULT_VOCAB,
    *,
    split_fraction: float = 0.5,
    seed: int = 0,
    iou_tp: float = 0.5,
) -> CrcCheck:
    """Fit CRC on the fit images, then evaluate the candidate with and without it on the held-out images."""
    samples, n_gt = label_detections(candidate, gt, class_code, iou_tp)
    fit = fit_crc(samples, class_code, split_fraction, seed, n_gt_by_image=n_gt)
    hold = [i for i in gt.per_image if i not in set(fit.fit_images)]
    sub_pred, sub_gt = candidate.subset(hold), gt.subset(hold)
    transformed = BranchPredictions(
        candidate.branch_id,
        {i: score_reprojection(d, class_code, fit.a, fit.b) for i, d in sub_pred.per_image.items()},
    )
    return CrcCheck(fit, evaluate(sub_pred, sub_gt, vocab), evaluate(transformed, sub_gt, vocab), tuple(hold))


@dataclass
class RouteSweep:
    hard_class: str
    alphas: list[float]
    per_alpha: dict[float, EvalResult]
    best_alpha: float

    def _key(self, alpha: float) -> tuple:
        r = self.per_alpha[alpha]
        return (r.per_class_ap50.get(self.hard_class, 0.0), r.map50)

    @property
    def baseline_alpha(self) -> float:
        return 0.0 if 0.0 in self.per_alpha else min(self.per_alpha)

    @property
    def best_matches_candidate(self) -> bool:
        """True when the winning row is metric-identical to the unmodified global candidate."""
        return self._key(self.best_alpha) == self._key(self.baseline_alpha)

    def rows(self) -> list[dict]:
        base = self.per_alpha[self.baseline_alpha]
        out = []
        for a in self.alphas:
            r = self.per_alpha[a]
            out.append(
                {
                    "alpha": a,
                    "map50": r.map50,
                    "map5095": r.map5095,
                    f"{self.hard_class}_ap50": r.per_class_ap50.get(self.hard_class, 0.0),
                    "delta_map50": r.map50 - base.map50,
                    f"delta_{self.hard_class}_ap50": r.per_class_ap50.get(self.hard_class, 0.0)
                    - base.per_class_ap50.get(self.hard_class, 0.0),
                    "best": a == self.best_alpha,
                }
            )
        return out

    def summary(self) -> dict:
        base = self.per_alpha[self.baseline_alpha]
        best = self.per_alpha[self.best_alpha]
        gain = 0.0 if self.best_matches_candidate else (
            best.per_class_ap50.get(self.hard_class, 0.0) - base.per_class_ap50.get(self.hard_class, 0.0)
        )
        return {
            "hard_class": self.hard_class,
            "best_alpha": self.best_alpha,
            "best_matches_candidate": self.best_matches_candidate,
            "hard_class_gain": gain,
            "verdict": (
                "best RCV row matches the unmodified candidate; no gain claimed"
                if self.best_matches_candidate
                else f"alpha={self.best_alpha} improves {self.hard_class} AP50 by {gain:+.6f}"
            ),
        }


def blend_hard_class(
    global_branch: BranchPredictions,
    hard_branch: BranchPredictions,
    hard_class: str,
    alpha: float,
    *,
    mode: str = "wbf",
    iou_cluster: float = DEFAULT_WBF_IOU,
) -> BranchPredictions:
    """Global source for every other class; the hard class mixed with weight ``alpha`` on the hard source.

    The endpoints pass one source through unchanged.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    if mode not in ("wbf", "scaled_union"):
        raise ValueError(f"unknown blend mode {mode!r}")
    if alpha == 0.0:
        return global_branch.renamed(f"rcv@{alpha}")
    per_image: dict[str, list[Detection]] = {}
    for image_id, dets in global_branch.per_image.items():
        out = [d for d in dets if d.class_code != hard_class]
        g_c = [d for d in dets if d.class_code == hard_class]
        h_c = [d for d in hard_branch.per_image.get(image_id, ()) if d.class_code == hard_class]
        if alpha == 1.0:
            out.extend(h_c)
        elif mode == "wbf":
            weights = FusionWeights({"global": 1.0 - alpha, "hard": alpha})
            out.extend(t.fused for t in wbf([("global", g_c), ("hard", h_c)], weights, iou_cluster))
        else:
            out.extend(d.with_score(d.score * (1.0 - alpha)) for d in g_c)
            out.extend(d.with_score(d.score * alpha) for d in h_c)
        per_image[image_id] = out
    return BranchPredictions(f"rcv@{alpha}", per_image)


def rcv_sweep(
    global_branch: BranchPredictions,
    hard_branch: BranchPredictions,
    gt: GroundTruthSet,
    hard_class: str,
    alphas: Sequence[float] = DEFAULT_ALPHAS,
    vocab: ClassVocabulary = DEFAULT_VOCAB,
    *,
    mode: str = "wbf",
    iou_cluster: float = DEFAULT_WBF_IOU,
) -> RouteSweep:
    """Evaluate every alpha; best = max hard-class AP50, then mAP50, then the lower alpha."""
    alphas = [float(a) for a in alphas]
    if not alphas:
        raise ValueError("alphas must be non-empty")
    if any(not 0.0 <= a <= 1.0 for a in alphas):
        raise ValueError("every alpha must lie in [0, 1]")
    per_alpha = {
        a: evaluate(blend_hard_class(global_branch, hard_branch, hard_class, a, mode=mode, iou_cluster=iou_cluster), gt, vocab)
        for a in alphas
    }
    best = max(
        alphas,
        key=lambda a: (per_alpha[a].per_class_ap50.get(hard_class, 0.0), per_alpha[a].map50, -a),
    )
    return RouteSweep(hard_class, alphas, per_alpha, best)
