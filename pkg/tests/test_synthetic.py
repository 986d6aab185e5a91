import numpy as np
import pytest
from scipy.stats import spearmanr

from edccf.dataset_io import ClassVocabulary
from edccf.errors import InvalidDistribution
from edccf.matching import evaluate, iou
from edccf.policy import KeepGlobal
from edccf.synthetic import (
    TRAIN_BOX_COUNTS,
    DEFAULT_CLASS_DIST,
    BranchProfile,
    child_seed,
    dominance_experiment,
    dominance_suite,
    generate_scene,
    hcrp_end_to_end,
    random_branch,
    simulate_branch,
    union_gain_grid,
)

CZ = ClassVocabulary(("cz",))


def test_default_mix_counts():
    assert sum(TRAIN_BOX_COUNTS.values()) == 5743
    assert DEFAULT_CLASS_DIST["cz"] == pytest.approx(285 / 5743)


@pytest.mark.parametrize("dist", [{"cz": 0.5, "kc": 0.4}, {"cz": -0.1, "kc": 1.1}, {}, {"nope": 1.0}])
def test_bad_distribution(dist):
    with pytest.raises(InvalidDistribution):
        generate_scene(dist, n_images=3)


def test_single_class_scene():
    gt = generate_scene({"cz": 1.0}, n_images=20, seed=1)
    assert set(gt.class_counts()) == {"cz"}


def test_class_fractions_follow_mix():
    gt = generate_scene(n_images=4000, seed=2)
    counts = gt.class_counts()
    total = sum(counts.values())
    assert counts["cz"] / total == pytest.approx(DEFAULT_CLASS_DIST["cz"], abs=0.01)
    assert counts["zxlf"] / total == pytest.approx(DEFAULT_CLASS_DIST["zxlf"], abs=0.02)


def test_scene_is_deterministic_and_well_formed():
    a = generate_scene(n_images=50, seed=3)
    b = generate_scene(n_images=50, seed=3)
    assert a.per_image == b.per_image
    assert a.image_ids[0] == "img00000"
    for gts in a.per_image.values():
        for g in gts:
            assert 0 <= g.box.x and g.box.x + g.box.w <= 1 + 1e-12
            assert 0 <= g.box.y and g.box.y + g.box.h <= 1 + 1e-12


def test_child_seed_distinct():
    assert child_seed(0, 1) != child_seed(0, 2) != child_seed(1, 1)
    assert child_seed(5, 3) == child_seed(5, 3)


def test_ideal_branch_is_perfect():
    gt = generate_scene({"cz": 1.0}, n_images=30, seed=4)
    p = simulate_branch(gt, BranchProfile({"cz": 1.0}, {"cz": 1.0}, jitter=0.0), 0, CZ)
    assert evaluate(p, gt, CZ).per_class_ap50["cz"] == 1.0


def test_zero_recall_is_empty():
    gt = generate_scene({"cz": 1.0}, n_images=30, seed=4)
    p = simulate_branch(gt, BranchProfile({"cz": 0.9}, {"cz": 0.0}), 0, CZ)
    assert p.n_detections() == 0


def test_measured_precision_near_target():
    gt = generate_scene({"cz": 1.0}, n_images=800, seed=5)
    p = simulate_branch(gt, BranchProfile({"cz": 0.5}, {"cz": 0.8}, jitter=0.0), 1, CZ)
    tp = 0
    for i, dets in p.per_image.items():
        truths = [g.box for g in gt.per_image[i]]
        tp += sum(1 for d in dets if any(iou(d.box, t) >= 0.5 for t in truths))
    assert tp / p.n_detections() == pytest.approx(0.5, abs=0.05)


def test_random_branch_shape():
    gt = generate_scene({"cz": 1.0}, n_images=200, seed=6)
    p = random_branch(gt, "cz", 2.0, 0)
    assert p.n_detections() / 200 == pytest.approx(2.0, abs=0.3)


def _branches(gt, pis, rhos, calibration="order_preserving", seed=0):
    out = []
    for k, (pi, rho) in enumerate(zip(pis, rhos)):
        prof = BranchProfile({"cz": pi}, {"cz": rho}, calibration=calibration)
        out.append((simulate_branch(gt, prof, child_seed(seed, k), CZ, branch_id=f"b{k}"), prof))
    return out


def test_equal_precision_control_gives_zero_delta():
    gt = generate_scene({"cz": 1.0}, n_images=40, boxes_per_image=(1, 3), seed=7)
    r = dominance_experiment(gt, _branches(gt, (0.6, 0.6), (0.8, 0.4)), "cz")
    assert r.precision_variance == 0.0 and r.delta == 0.0 and not r.assumptions_hold


def test_scrambled_scores_break_assumptions():
    gt = generate_scene({"cz": 1.0}, n_images=40, boxes_per_image=(1, 3), seed=8)
    r = dominance_experiment(gt, _branches(gt, (0.9, 0.3), (0.9, 0.3), "scrambled"), "cz")
    assert not r.assumptions_hold


def test_dominance_small_suite_favours_weighting():
    res = dominance_suite(n_seeds=20)
    deltas = np.array([r.delta for r in res])
    assert deltas.mean() > 0
    assert sum(r.assumptions_hold for r in res) >= 15
    assert res[0].to_row()["seed"] == 0


def test_union_gain_tracks_hcec():
    rows = union_gain_grid(seeds=(0,), n_images=80)
    assert all(r["n_ld"] == 0 for r in rows)
    rho = spearmanr([r["hcec"] for r in rows], [r["gain"] for r in rows]).statistic
    assert rho >= 0


@pytest.mark.parametrize("variant", ["no_signal", "corrupted"])
def test_negative_scenarios_keep_global(variant):
    b = hcrp_end_to_end(0, variant=variant, n_trials=0)
    assert isinstance(b.run.policy.arm("cz"), KeepGlobal)
    assert b.run.after.per_class_ap50 == b.run.before.per_class_ap50
    assert b.run.preservation.stable_violations == []


def test_default_scenario_repairs_cz(scenario):
    before, after = scenario.run.before.per_class_ap50, scenario.run.after.per_class_ap50
    assert after["cz"] > before["cz"] + 0.2
    assert {c: v for c, v in after.items() if c != "cz"} == {c: v for c, v in before.items() if c != "cz"}
    r = scenario.reports["ap50_cz"]
    assert r.win_rate == 1.0 and r.p_adjusted < 0.05


def test_unknown_variant():
    with pytest.raises(ValueError):
        hcrp_end_to_end(0, variant="bogus", n_trials=0)
