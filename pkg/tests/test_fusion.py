import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import D
from edccf.fusion import FusionWeights, nms, score_reprojection, soft_nms, union_low_threshold, wbf, wbf_detections
from edccf.matching import iou
from oracles import brute_force_nms


def test_nms_disjoint_kept():
    dets = [D("cz", 0, 0, 5, 5, 0.9), D("cz", 20, 20, 5, 5, 0.8)]
    assert nms(dets, 0.5) == dets


def test_nms_suppresses_heavy_overlap():
    dets = [D("cz", 0, 0, 10, 10, 0.6), D("cz", 0, 0, 10, 9, 0.9)]
    assert nms(dets, 0.5) == [dets[1]]


def test_nms_chain_vs_oracle():
    # pairwise IoUs 0.6 (a,b), 0.6 (b,c), small (a,c): b is suppressed by a, so c survives
    a = D("cz", 0, 0, 10, 10, 0.9)
    b = D("cz", 2.5, 0, 10, 10, 0.8)
    c = D("cz", 5, 0, 10, 10, 0.7)
    assert iou(a.box, b.box) == pytest.approx(0.6)
    assert nms([a, b, c], 0.5) == brute_force_nms([a, b, c], 0.5)


def test_nms_is_classwise():
    dets = [D("cz", 0, 0, 10, 10, 0.9), D("kc", 0, 0, 10, 10, 0.5)]
    assert len(nms(dets, 0.5)) == 2


box_strategy = st.tuples(
    st.sampled_from(["cz", "kc"]),
    st.floats(0, 20), st.floats(0, 20), st.floats(1, 15), st.floats(1, 15),
    st.floats(0, 1),
)


@settings(max_examples=80, deadline=None)
@given(st.lists(box_strategy, max_size=6), st.sampled_from([0.3, 0.5, 0.7]))
def test_nms_matches_oracle(raw, thr):
    dets = [D(*r) for r in raw]
    assert sorted(nms(dets, thr), key=lambda d: d.sort_key()) == sorted(brute_force_nms(dets, thr), key=lambda d: d.sort_key())


def test_soft_nms_linear_example():
    a = D("cz", 0, 0, 10, 10, 0.9)
    b = D("cz", 2.5, 0, 10, 10, 0.5)
    out = soft_nms([a, b], 1.0, "linear")
    assert [d.score for d in out] == pytest.approx([0.9, 0.5 * (1 - 0.6)], abs=1e-12)


def test_soft_nms_non_overlapping_unchanged():
    dets = [D("cz", 0, 0, 5, 5, 0.9), D("cz", 30, 30, 5, 5, 0.4)]
    assert soft_nms(dets, 0.5, "gaussian") == dets
    assert soft_nms(dets, 1.0, "linear") == dets


def test_soft_nms_gaussian_decay():
    a = D("cz", 0, 0, 10, 10, 0.9)
    b = D("cz", 2.5, 0, 10, 10, 0.5)
    out = soft_nms([a, b], 0.5, "gaussian")
    assert out[1].score == pytest.approx(0.5 * math.exp(-0.36 / 0.5), abs=1e-12)


def test_soft_nms_floor_drops():
    a = D("cz", 0, 0, 10, 10, 0.9)
    b = D("cz", 0, 0, 10, 10, 0.5)
    assert soft_nms([a, b], 1.0, "linear", score_floor=0.001) == [a]


def test_weights_validation():
    with pytest.raises(ValueError):
        FusionWeights({"a": 0.0})
    with pytest.raises(ValueError):
        FusionWeights({"a": -1.0, "b": 2.0})
    assert FusionWeights({"a": 3, "b": 1}).normalized() == {"a": 0.75, "b": 0.25}


def test_wbf_identical_boxes():
    d1, d2 = D("cz", 1, 2, 10, 12, 0.8), D("cz", 1, 2, 10, 12, 0.6)
    [t] = wbf([("a", [d1]), ("b", [d2])], FusionWeights.uniform(["a", "b"]))
    assert t.fused.score == pytest.approx(0.7, abs=1e-12)
    assert t.fused.box == d1.box
    assert len(t.members) == 2


def test_wbf_single_source_identity():
    d = D("cz", 1, 2, 10, 12, 0.8)
    [t] = wbf([("a", [d])], FusionWeights.uniform(["a"]))
    assert t.fused == d


def test_wbf_singleton_halved_in_two_branch_setup():
    d = D("cz", 1, 2, 10, 12, 0.8)
    [t] = wbf([("a", [d]), ("b", [])], FusionWeights.uniform(["a", "b"]))
    assert t.fused.score == pytest.approx(0.4, abs=1e-12)


def test_wbf_weighted_singletons_follow_weights():
    d = D("cz", 1, 2, 10, 12, 0.8)
    w = FusionWeights({"a": 0.85, "b": 0.15})
    [ta] = wbf([("a", [d]), ("b", [])], w)
    [tb] = wbf([("a", []), ("b", [d])], w)
    assert ta.fused.score == pytest.approx(0.68) and tb.fused.score == pytest.approx(0.12)


def test_wbf_zero_weight_branch_ignored():
    d = D("cz", 1, 2, 10, 12, 0.8)
    out = wbf_detections([("a", [d]), ("b", [D("cz", 40, 40, 5, 5, 0.9)])], FusionWeights({"a": 1, "b": 0}))
    assert out == [d]


def test_wbf_missing_weight():
    with pytest.raises(KeyError):
        wbf([("a", [])], FusionWeights({"b": 1}))


@settings(max_examples=60, deadline=None)
@given(st.lists(box_strategy, max_size=5), st.lists(box_strategy, max_size=5))
def test_wbf_fused_box_within_member_extents(ra, rb):
    a, b = [D(*r) for r in ra], [D(*r) for r in rb]
    traces = wbf([("a", a), ("b", b)], FusionWeights({"a": 0.7, "b": 0.3}))
    src = {"a": a, "b": b}
    assert sum(len(t.members) for t in traces) == sum(1 for d in a + b if d.score >= 0.001)
    for t in traces:
        members = [src[bid][k] for bid, k, _ in t.members]
        for attr in ("x", "y", "w", "h"):
            vals = [getattr(m.box, attr) for m in members]
            assert min(vals) - 1e-9 <= getattr(t.fused.box, attr) <= max(vals) + 1e-9
        assert 0.0 <= t.fused.score <= 1.0


def test_union_disjoint_concatenates():
    g, r = [D("cz", 0, 0, 5, 5, 0.9)], [D("cz", 30, 30, 5, 5, 0.2)]
    assert union_low_threshold(g, r, 0.1) == g + r


def test_union_dedup_keeps_higher():
    g, r = [D("cz", 0, 0, 5, 5, 0.3)], [D("cz", 0, 0, 5, 5, 0.4)]
    assert union_low_threshold(g, r, 0.1, 0.7) == r


def test_union_low_threshold_keeps_candidate():
    r = [D("cz", 30, 30, 5, 5, 0.12)]
    assert union_low_threshold([], r, 0.10) == r
    assert union_low_threshold([], [D("cz", 30, 30, 5, 5, 0.05)], 0.10) == []


def test_union_empty_repair_is_identity():
    g = [D("cz", 0, 0, 5, 5, 0.01), D("cz", 0, 0, 5, 5, 0.9)]
    assert union_low_threshold(g, [], 0.5) == g


def test_reprojection():
    dets = [D("cz", 0, 0, 5, 5, 0.9), D("cz", 9, 9, 5, 5, 0.2), D("kc", 1, 1, 3, 3, 0.4)]
    flat = score_reprojection(dets, "cz", 0.0, 0.3)
    assert flat[0].score == flat[1].score == pytest.approx(1 / (1 + math.exp(-0.3)))
    assert flat[2] is dets[2]
    steep = score_reprojection(dets, "cz", 4.0, -1.0)
    assert steep[0].score > steep[1].score


@given(st.lists(st.floats(0, 1), min_size=2, max_size=10), st.floats(0.01, 50), st.floats(-50, 50))
def test_reprojection_preserves_order(scores, a, b):
    dets = [D("cz", k, 0, 1, 1, s) for k, s in enumerate(scores)]
    out = score_reprojection(dets, "cz", a, b)
    for i in range(len(dets)):
        for j in range(len(dets)):
            if scores[i] > scores[j]:
                assert out[i].score >= out[j].score


def test_equal_weights_identical_fusion_regardless_of_scale():
    rng = np.random.default_rng(0)
    a = [D("cz", *rng.uniform(0, 20, 2), *rng.uniform(2, 10, 2), float(rng.random())) for _ in range(6)]
    b = [D("cz", *rng.uniform(0, 20, 2), *rng.uniform(2, 10, 2), float(rng.random())) for _ in range(6)]
    one = wbf_detections([("a", a), ("b", b)], FusionWeights({"a": 0.6, "b": 0.6}))
    two = wbf_detections([("a", a), ("b", b)], FusionWeights.uniform(["a", "b"]))
    assert one == two
