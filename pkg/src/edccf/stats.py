"""Paired-subset protocol: repeated subset trials, five-fold views, one-sided
Wilcoxon signed-rank with Bonferroni adjustment, percentile bootstrap.

Every random draw comes from ``numpy.random.default_rng`` seeded explicitly,
so the whole harness is a pure function of its inputs and seeds.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.stats import norm

from .dataset_io import DEFAULT_VOCAB, BranchPredictions, ClassVocabulary, GroundTruthSet
from .errors import AllZeroDeltas
from .matching import EvalResult, build_match_table

EXACT_MAX_N = 25
DEFAULT_K = 15
DEFAULT_RESAMPLES = 1000


@dataclass(frozen=True)
class TrialRow:
    trial: int
    seed: int
    metric: str
    value_baseline: float
    value_candidate: float
    delta: float


@dataclass
class PairedTrialTable:
    rows: list[TrialRow]
    n_trials: int
    subsets: dict[int, tuple[str, ...]] = field(default_factory=dict, repr=False)

    def metrics(self) -> list[str]:
        seen: list[str] = []
        for r in self.rows:
            if r.metric not in seen:
                seen.append(r.metric)
        return seen

    def for_metric(self, metric: str) -> list[TrialRow]:
        return [r for r in self.rows if r.metric == metric]

    def deltas(self, metric: str) -> np.ndarray:
        return np.array([r.delta for r in self.for_metric(metric)], dtype=float)

    def csv_text(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["trial", "seed", "metric", "value_baseline", "value_candidate", "delta"])
        for r in self.rows:
            w.writerow([r.trial, r.seed, r.metric, repr(r.value_baseline), repr(r.value_candidate), repr(r.delta)])
        return buf.getvalue()

    @classmethod
    def from_deltas(cls, metric: str, deltas: Sequence[float], seed: int = 0) -> "PairedTrialTable":
        """A table carrying only deltas (baseline pinned at 0), for protocol checks on given numbers."""
        rows = [TrialRow(i, seed + i, metric, 0.0, float(d), float(d)) for i, d in enumerate(deltas)]
        return cls(rows, len(rows))


def _metric_values(res: EvalResult, classes: Sequence[str]) -> dict[str, float]:
    vals = {"map50": res.map50, "map5095": res.map5095}
    for c in classes:
        if c in res.per_class_ap50:
            vals[f"ap50_{c}"] = res.per_class_ap50[c]
    return vals


def _paired_rows(trial: int, seed: int, base: EvalResult, cand: EvalResult, classes: Sequence[str]) -> list[TrialRow]:
    bv, cv = _metric_values(base, classes), _metric_values(cand, classes)
    return [TrialRow(trial, seed, m, bv[m], cv[m], cv[m] - bv[m]) for m in bv if m in cv]


def sample_subset(image_ids: Sequence[str], subset_size: int, seed: int) -> list[str]:
    """``subset_size`` ids drawn without replacement, returned in manifest order."""
    rng = np.random.default_rng(seed)
    picked = np.sort(rng.choice(len(image_ids), size=subset_size, replace=False))
    return [image_ids[i] for i in picked]


def subset_trials(
    baseline: BranchPredictions,
    candidate: BranchPredictions,
    gt: GroundTruthSet,
    n_trials: int = 50,
    subset_size: int = 450,
    base_seed: int = 0,
    vocab: ClassVocabulary = DEFAULT_VOCAB,
    *,
    classes: Sequence[str] = ("cz",),
) -> PairedTrialTable:
    """Trial ``i`` draws its subset with seed ``base_seed + i``; both systems see the identical subset."""
    ids = gt.image_ids
    if n_trials < 1:
        raise ValueError("n_trials must be >= 1")
    if not 1 <= subset_size <= len(ids):
        raise ValueError(f"subset_size must lie in [1, {len(ids)}]")
    tb = build_match_table(baseline, gt, vocab)
    tc = build_match_table(candidate, gt, vocab)
    rows: list[TrialRow] = []
    subsets: dict[int, tuple[str, ...]] = {}
    for i in range(n_trials):
        seed = base_seed + i
        subset = sample_subset(ids, subset_size, seed)
        subsets[i] = tuple(subset)
        rows.extend(_paired_rows(i, seed, tb.aggregate(subset), tc.aggregate(subset), classes))
    return PairedTrialTable(rows, n_trials, subsets)


def five_fold(manifest: Sequence[str], seed: int = 0, k: int = 5) -> list[list[str]]:
    """Seeded shuffle, then ``k`` contiguous near-equal folds."""
    if len(manifest) < k:
        raise ValueError(f"need at least {k} images for {k} folds")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(manifest))
    return [[manifest[i] for i in part] for part in np.array_split(perm, k)]


def fold_trials(
    baseline: BranchPredictions,
    candidate: BranchPredictions,
    gt: GroundTruthSet,
    seed: int = 0,
    vocab: ClassVocabulary = DEFAULT_VOCAB,
    *,
    classes: Sequence[str] = ("cz",),
    k: int = 5,
) -> PairedTrialTable:
    """One paired row set per held-out fold (a generalisation view, not a significance claim)."""
    tb = build_match_table(baseline, gt, vocab)
    tc = build_match_table(candidate, gt, vocab)
    rows: list[TrialRow] = []
    subsets: dict[int, tuple[str, ...]] = {}
    order = {i: n for n, i in enumerate(gt.image_ids)}
    for f, fold in enumerate(five_fold(gt.image_ids, seed, k)):
        fold = sorted(fold, key=order.__getitem__)
        subsets[f] = tuple(fold)
        rows.extend(_paired_rows(f, seed, tb.aggregate(fold), tc.aggregate(fold), classes))
    return PairedTrialTable(rows, k, subsets)


# ---------------------------------------------------------------------------
# tests and intervals


def average_ranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks with ties sharing the mean of their positions."""
    values = np.asarray(values, dtype=float)
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(len(values), dtype=float)
    sorted_vals = values[order]
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def _exact_upper_tail(doubled_ranks: Sequence[int], target: int) -> float:
    """P(W+ >= target/2) under random signs; ranks are passed doubled so ties stay integral."""
    total = sum(doubled_ranks)
    counts = [0] * (total + 1)
    counts[0] = 1
    for r in doubled_ranks:
        for s in range(total, r - 1, -1):
            counts[s] += counts[s - r]
    tail = sum(counts[max(target, 0):])
    return tail / 2 ** len(doubled_ranks)


def wilcoxon_one_sided(deltas: Sequence[float]) -> tuple[float, float]:
    """Signed-rank test of median delta > 0; returns (W+, p).

    Zero deltas are dropped first. Up to 25 non-zero deltas the null
    distribution is exact (tied ranks included); beyond that a normal
    approximation with tie and continuity corrections is used.
    """
    d = np.asarray(deltas, dtype=float)
    if d.size == 0:
        raise ValueError("need at least one delta")
    nz = d[d != 0]
    if nz.size == 0:
        raise AllZeroDeltas(int(d.size))
    ranks = average_ranks(np.abs(nz))
    w_plus = float(ranks[nz > 0].sum())
    n = nz.size
    if n <= EXACT_MAX_N:
        doubled = [int(round(2 * r)) for r in ranks]
        return w_plus, _exact_upper_tail(doubled, int(round(2 * w_plus)))
    mean = n * (n + 1) / 4.0
    _, tie_counts = np.unique(np.abs(nz), return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - float(np.sum(tie_counts**3 - tie_counts)) / 48.0
    z = (w_plus - mean - 0.5) / math.sqrt(var)
    return w_plus, float(norm.sf(z))


def bonferroni(p_raw: float, k: int) -> float:
    if not 0.0 <= p_raw <= 1.0:
        raise ValueError("p_raw must lie in [0, 1]")
    if k < 1:
        raise ValueError("k must be >= 1")
    return min(1.0, k * p_raw)


def bootstrap_ci(
    deltas: Sequence[float], n_resamples: int = DEFAULT_RESAMPLES, seed: int = 0, level: float = 0.95
) -> tuple[float, float]:
    """Percentile interval of the resampled mean."""
    d = np.asarray(deltas, dtype=float)
    if d.size < 2:
        raise ValueError("bootstrap needs at least two values")
    if not 0.0 < level < 1.0:
        raise ValueError("level must lie in (0, 1)")
    if np.all(d == d[0]):
        return float(d[0]), float(d[0])
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, d.size, size=(n_resamples, d.size))
    means = d[idx].mean(axis=1)
    alpha = (1.0 - level) / 2.0
    lo, hi = np.quantile(means, [alpha, 1.0 - alpha])
    return float(lo), float(hi)


def _mean(d: np.ndarray) -> float:
    if d.size and np.all(d == d[0]):
        return float(d[0])
    return math.fsum(d) / d.size


@dataclass
class TestReport:
    metric: str
    n: int
    statistic: float
    p_raw: float
    p_adjusted: float
    k_comparisons: int
    win_rate: float
    mean_delta: float
    bootstrap_ci: tuple[float, float]
    mean_baseline: float = 0.0
    mean_candidate: float = 0.0
    ci_baseline: tuple[float, float] = (0.0, 0.0)
    ci_candidate: tuple[float, float] = (0.0, 0.0)
    direction: str = "one-sided-greater"
    all_zero: bool = False

    __test__ = False  # not a pytest class

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("bootstrap_ci", "ci_baseline", "ci_candidate"):
            d[key] = list(d[key])
        return d


def _ci(values: np.ndarray, n_resamples: int, seed: int, level: float) -> tuple[float, float]:
    if values.size < 2:
        v = float(values[0]) if values.size else 0.0
        return v, v
    return bootstrap_ci(values, n_resamples, seed, level)


def report(
    table: PairedTrialTable,
    k: int = DEFAULT_K,
    n_resamples: int = DEFAULT_RESAMPLES,
    seed: int = 0,
    *,
    level: float = 0.95,
) -> dict[str, TestReport]:
    """Per metric: win rate (strictly positive deltas), mean delta, Wilcoxon + Bonferroni, bootstrap CIs."""
    if not table.rows:
        raise ValueError("empty trial table")
    out: dict[str, TestReport] = {}
    for metric in table.metrics():
        rows = table.for_metric(metric)
        d = np.array([r.delta for r in rows], dtype=float)
        base = np.array([r.value_baseline for r in rows], dtype=float)
        cand = np.array([r.value_candidate for r in rows], dtype=float)
        all_zero = False
        try:
            stat, p_raw = wilcoxon_one_sided(d)
        except AllZeroDeltas as exc:
            stat, p_raw, all_zero = exc.statistic, exc.p_value, True
        out[metric] = TestReport(
            metric=metric,
            n=int(d.size),
            statistic=stat,
            p_raw=p_raw,
            p_adjusted=bonferroni(p_raw, k),
            k_comparisons=k,
            win_rate=int(np.sum(d > 0)) / d.size,
            mean_delta=_mean(d),
            bootstrap_ci=_ci(d, n_resamples, seed, level),
            mean_baseline=_mean(base),
            mean_candidate=_mean(cand),
            ci_baseline=_ci(base, n_resamples, seed, level),
            ci_candidate=_ci(cand, n_resamples, seed, level),
            all_zero=all_zero,
        )
    return out


SUMMARY_COLUMNS = [
    "metric",
    "n_trials",
    "baseline_mean",
    "baseline_ci_lo",
    "baseline_ci_hi",
    "candidate_mean",
    "candidate_ci_lo",
    "candidate_ci_hi",
    "mean_delta",
    "delta_ci_lo",
    "delta_ci_hi",
    "win_rate",
    "wilcoxon_w_plus",
    "p_raw",
    "p_adjusted",
    "k",
]


def summary_rows(reports: Mapping[str, TestReport]) -> list[dict]:
    """One row per metric: point estimates with bootstrap CIs plus the adjusted p-value."""
    rows = []
    for m, r in reports.items():
        rows.append(
            {
                "metric": m,
                "n_trials": r.n,
                "baseline_mean": r.mean_baseline,
                "baseline_ci_lo": r.ci_baseline[0],
                "baseline_ci_hi": r.ci_baseline[1],
                "candidate_mean": r.mean_candidate,
                "candidate_ci_lo": r.ci_candidate[0],
                "candidate_ci_hi": r.ci_candidate[1],
                "mean_delta": r.mean_delta,
                "delta_ci_lo": r.bootstrap_ci[0],
                "delta_ci_hi": r.bootstrap_ci[1],
                "win_rate": r.win_rate,
                "wilcoxon_w_plus": r.statistic,
                "p_raw": r.p_raw,
                "p_adjusted": r.p_adjusted,
                "k": r.k_comparisons,
            }
        )
    return rows


def summary_csv(reports: Mapping[str, TestReport]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=SUMMARY_COLUMNS, lineterminator="\n")
    w.writeheader()
    for row in summary_rows(reports):
        w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    return buf.getvalue()


def budget_record(reports: Mapping[str, TestReport], k: int = DEFAULT_K) -> dict:
    """Which comparisons drew on the Bonferroni budget."""
    return {"k": k, "comparisons": list(reports), "used": len(reports)}
