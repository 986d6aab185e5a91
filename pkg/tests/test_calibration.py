import warnings

import numpy as np
import pytest

from conftest import D, G, preds, truths
from edccf.calibration import (
    LabeledScore,
    blend_hard_class,
    crc_check,
    fit_crc,
    fit_logistic,
    label_detections,
    rcv_sweep,
    split_images,
)
from edccf.dataset_io import BranchPredictions, ClassVocabulary
from edccf.errors import InsufficientData, NonConvergence
from edccf.fusion import score_reprojection
from edccf.matching import evaluate

V = ClassVocabulary(("hxlf", "cz"))


def samples(scores, labels, per_image=2):
    return [LabeledScore(f"i{k // per_image:03d}", float(s), bool(y)) for k, (s, y) in enumerate(zip(scores, labels))]


def test_separable_scores_positive_slope():
    rng = np.random.default_rng(0)
    tp = rng.uniform(0.6, 1.0, 40)
    fp = rng.uniform(0.0, 0.4, 40)
    s = np.concatenate([tp, fp])
    y = np.concatenate([np.ones(40), np.zeros(40)])
    perm = rng.permutation(80)
    fit = fit_crc(samples(s[perm], y[perm]), "cz", 0.5, 0)
    assert fit.a > 0 and fit.a <= 50
    assert fit.holdout_ap_delta >= 0


def test_uninformative_scores_flat_slope():
    rng = np.random.default_rng(1)
    s = rng.uniform(0, 1, 4000)
    y = rng.random(4000) < 0.4
    a, b, _, converged, _ = fit_logistic(s, y)
    assert converged
    assert abs(a) < 0.3
    assert 1 / (1 + np.exp(-b)) == pytest.approx(0.4, abs=0.05)


def test_slope_cap_respected():
    a, b, _, _, _ = fit_logistic(np.array([0.1, 0.2, 0.8, 0.9]), np.array([0, 0, 1, 1]))
    assert abs(a) <= 50 and abs(b) <= 50


def test_insufficient_data():
    with pytest.raises(InsufficientData):
        fit_crc(samples([0.1] * 5, [1] * 5), "cz")


def test_non_convergence_warns_and_returns():
    rng = np.random.default_rng(2)
    s = rng.uniform(0, 1, 50)
    y = rng.random(50) < s
    with pytest.warns(NonConvergence):
        fit = fit_crc(samples(s, y), "cz", max_iter=1)
    assert not fit.converged and np.isfinite(fit.a)


def test_fit_independent_of_sample_order():
    rng = np.random.default_rng(3)
    s = rng.uniform(0, 1, 60)
    y = rng.random(60) < s
    sm = samples(s, y)
    f1 = fit_crc(sm, "cz", seed=4)
    f2 = fit_crc(list(reversed(sm)), "cz", seed=4)
    assert (f1.a, f1.b, f1.holdout_ap_delta) == (f2.a, f2.b, f2.holdout_ap_delta)


def test_split_has_no_leakage_and_is_deterministic():
    ids = [f"i{k}" for k in range(20)]
    fit, hold = split_images(ids, 0.5, 7)
    assert set(fit).isdisjoint(hold) and set(fit) | set(hold) == set(ids)
    assert split_images(list(reversed(ids)), 0.5, 7) == (fit, hold)


def _scene(n=40, seed=0):
    rng = np.random.default_rng(seed)
    gt, p = {}, {}
    for i in range(n):
        image = f"im{i:03d}"
        g = [G("cz", 10, 10, 20, 20), G("hxlf", 50, 50, 20, 20)]
        d = [D("hxlf", 50, 50, 20, 20, float(rng.uniform(0.5, 1)))]
        if rng.random() < 0.7:
            d.append(D("cz", 10, 11, 20, 20, float(rng.uniform(0.3, 1.0))))
        if rng.random() < 0.5:
            d.append(D("cz", 80, 5, 10, 10, float(rng.uniform(0.0, 0.7))))
        gt[image], p[image] = g, d
    return preds(p, "cand"), truths(gt)


@pytest.mark.parametrize("a,b", [(0.5, 0.0), (3.0, -1.0), (12.0, -6.0)])
def test_positive_slope_keeps_class_ap(a, b):
    p, gt = _scene()
    moved = BranchPredictions("m", {i: score_reprojection(d, "cz", a, b) for i, d in p.per_image.items()})
    cz_only = ClassVocabulary(("cz",))
    assert evaluate(moved, gt, cz_only).per_class_ap50 == evaluate(p, gt, cz_only).per_class_ap50


def test_crc_check_holdout_only():
    p, gt = _scene()
    check = crc_check(p, gt, "cz", V, seed=1)
    assert set(check.holdout_images).isdisjoint(check.fit.fit_images)
    assert check.before.n_images == len(check.holdout_images)
    assert check.fit.a > 0
    assert check.matches_candidate
    assert "no gain claimed" in check.summary()["verdict"]


def test_label_detections_counts():
    p, gt = _scene(10)
    s, n_gt = label_detections(p, gt, "cz")
    assert sum(n_gt.values()) == 10
    assert len(s) == sum(1 for v in p.per_image.values() for d in v if d.class_code == "cz")


def _two_sources():
    gt = truths({"a": [G("cz", 0, 0, 10, 10), G("cz", 40, 40, 10, 10)], "b": [G("hxlf", 0, 0, 10, 10)]})
    glob = preds({"a": [D("cz", 0, 0, 10, 10, 0.9), D("cz", 70, 0, 10, 10, 0.8)], "b": [D("hxlf", 0, 0, 10, 10, 0.9)]}, "g")
    hard = preds({"a": [D("cz", 40, 40, 10, 10, 0.9), D("cz", 0, 70, 10, 10, 0.8)], "b": []}, "h")
    return glob, hard, gt


def test_rcv_endpoints():
    glob, hard, gt = _two_sources()
    sweep = rcv_sweep(glob, hard, gt, "cz", vocab=V)
    assert sweep.per_alpha[0.0].to_dict() == evaluate(glob, gt, V).to_dict()
    one = blend_hard_class(glob, hard, "cz", 1.0)
    for i in gt.image_ids:
        assert [d for d in one.per_image[i] if d.class_code == "cz"] == [d for d in hard.per_image[i] if d.class_code == "cz"]
        assert [d for d in one.per_image[i] if d.class_code != "cz"] == [d for d in glob.per_image[i] if d.class_code != "cz"]


def test_rcv_interior_alpha_wins():
    glob, hard, gt = _two_sources()
    sweep = rcv_sweep(glob, hard, gt, "cz", vocab=V)
    assert sweep.best_alpha == 0.5
    assert not sweep.best_matches_candidate
    assert sweep.summary()["hard_class_gain"] > 0


def test_rcv_reports_no_gain_when_global_is_best():
    glob, _, gt = _two_sources()
    useless = preds({"a": [D("cz", 80, 80, 5, 5, 0.99)], "b": []}, "h")
    sweep = rcv_sweep(glob, useless, gt, "cz", vocab=V)
    assert sweep.best_alpha == 0.0 and sweep.best_matches_candidate
    s = sweep.summary()
    assert s["hard_class_gain"] == 0.0 and "no gain claimed" in s["verdict"]


def test_rcv_rejects_bad_alpha():
    glob, hard, gt = _two_sources()
    with pytest.raises(ValueError):
        rcv_sweep(glob, hard, gt, "cz", [1.5], V)
