from __future__ import annotations

import json
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from edccf.dataset_io import Box, BranchPredictions, Detection, GroundTruth, GroundTruthSet  # noqa: E402


def D(cls, x, y, w, h, score):
    return Detection(cls, Box(x, y, w, h), score)


def G(cls, x, y, w, h):
    return GroundTruth(cls, Box(x, y, w, h))


def preds(per_image, branch_id="b"):
    return BranchPredictions(branch_id, {k: list(v) for k, v in per_image.items()})


def truths(per_image):
    return GroundTruthSet({k: list(v) for k, v in per_image.items()})


def random_instance(rng: np.random.Generator, n_images=5, max_boxes=10, classes=("cz", "kc", "jl")):
    """Small random prediction/truth pair; detections are often jittered copies of truths."""
    cls = list(classes[: int(rng.integers(1, len(classes) + 1))])
    gts, dets = {}, {}
    for i in range(int(rng.integers(1, n_images + 1))):
        image = f"im{i}"
        g = []
        for _ in range(int(rng.integers(0, max_boxes + 1))):
            g.append(G(cls[int(rng.integers(len(cls)))], *rng.uniform(0, 50, 2), *rng.uniform(5, 30, 2)))
        d = []
        for t in g:
            if rng.random() < 0.7:
                x = max(0.0, t.box.x + rng.normal(0, 3))
                y = max(0.0, t.box.y + rng.normal(0, 3))
                c = t.class_code if rng.random() < 0.85 else cls[int(rng.integers(len(cls)))]
                d.append(D(c, x, y, t.box.w * rng.uniform(0.8, 1.2), t.box.h * rng.uniform(0.8, 1.2), float(rng.random())))
        for _ in range(int(rng.integers(0, 4))):
            d.append(D(cls[int(rng.integers(len(cls)))], *rng.uniform(0, 50, 2), *rng.uniform(5, 30, 2), float(rng.random())))
        rng.shuffle(d)
        gts[image], dets[image] = g, d[:max_boxes]
    return preds(dets), truths(gts), cls


def write_json(path: Path, obj) -> Path:
    path.write_text(json.dumps(obj), encoding="utf-8")
    return path


@pytest.fixture(scope="session")
def scenario():
    from edccf.synthetic import hcrp_end_to_end

    return hcrp_end_to_end(0)


CRITERIA = pytest.StashKey[dict]()


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, label): acceptance criterion reported as PASS/FAIL")
    config.stash[CRITERIA] = {}


@pytest.hookimpl(wrapper=True)
def pytest_runtest_makereport(item, call):
    rep = yield
    mark = item.get_closest_marker("criterion")
    if mark and (rep.when == "call" or rep.failed):
        number, label = mark.args
        prev = item.config.stash[CRITERIA].get(number, (label, True))[1]
        item.config.stash[CRITERIA][number] = (label, prev and not rep.failed)
    return rep


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash.get(CRITERIA, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        label, ok = results[number]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {number}: {label}")
