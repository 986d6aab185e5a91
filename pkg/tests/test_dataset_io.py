import json

import pytest

from conftest import D, G, preds, truths, write_json
from edccf.dataset_io import (
    DEFAULT_VOCAB,
    Box,
    ClassVocabulary,
    Detection,
    check_integrity,
    load_ground_truth,
    load_manifest,
    load_predictions,
    overlap_audit,
    parse_box,
    save_ground_truth,
    save_predictions,
    sha256_file,
    validate_detection,
)
from edccf.errors import ManifestMismatch, ParseError, SchemaError


def entry(cls="cz", box=(1, 2, 3, 4), score=0.5):
    return {"category": cls, "bbox": list(box), "score": score}


def test_default_vocabulary_order():
    assert DEFAULT_VOCAB.codes == ("lmlj", "hbgdf", "hxlf", "zxlf", "jl", "kc", "ssf", "cz")


def test_vocabulary_rejects_duplicates_and_empty():
    with pytest.raises(ValueError):
        ClassVocabulary(("a", "a"))
    with pytest.raises(ValueError):
        ClassVocabulary(("a", ""))


def test_vocabulary_is_case_sensitive():
    assert "CZ" not in DEFAULT_VOCAB


@pytest.mark.parametrize("bad", [(0, 0, 0, 1), (0, 0, 1, -1), (float("nan"), 0, 1, 1), (0, float("inf"), 1, 1)])
def test_box_invariants(bad):
    with pytest.raises(SchemaError):
        Box(*bad)


def test_detection_score_range():
    with pytest.raises(SchemaError):
        Detection("cz", Box(0, 0, 1, 1), 1.5)


def test_xyxy_parsing():
    assert parse_box([1, 2, 4, 6], "xyxy") == Box(1, 2, 3, 4)


def test_load_round_trip(tmp_path):
    path = write_json(tmp_path / "p.json", {"a": [entry(), entry("kc")], "b": [entry(score=0.9)]})
    p = load_predictions(path, manifest=["a", "b"])
    assert list(p.per_image) == ["a", "b"]
    assert p.n_detections() == 3
    out = tmp_path / "q.json"
    save_predictions(p, out)
    assert load_predictions(out).per_image == p.per_image


def test_load_follows_manifest_order(tmp_path):
    path = write_json(tmp_path / "p.json", {"b": [], "a": [entry()]})
    assert list(load_predictions(path, manifest=["a", "b"]).per_image) == ["a", "b"]


def test_unknown_class_is_schema_error(tmp_path):
    path = write_json(tmp_path / "p.json", {"a": [entry("czz")]})
    with pytest.raises(SchemaError):
        load_predictions(path)


def test_missing_manifest_image(tmp_path):
    path = write_json(tmp_path / "p.json", {"a": []})
    with pytest.raises(ManifestMismatch) as err:
        load_predictions(path, manifest=["a", "b"])
    assert err.value.missing == ["b"]


def test_invalid_json_is_parse_error(tmp_path):
    path = tmp_path / "p.json"
    path.write_text("{not json")
    with pytest.raises(ParseError):
        load_predictions(path)


def test_duplicate_key_rejected_by_loader(tmp_path):
    path = tmp_path / "p.json"
    path.write_text('{"a": [], "a": []}')
    with pytest.raises(SchemaError):
        load_predictions(path)


def test_score_missing_in_prediction(tmp_path):
    path = write_json(tmp_path / "p.json", {"a": [{"category": "cz", "bbox": [0, 0, 1, 1]}]})
    with pytest.raises(SchemaError):
        load_predictions(path)


def test_ground_truth_round_trip(tmp_path):
    gt = truths({"a": [G("cz", 0, 0, 2, 2)], "b": []})
    save_ground_truth(gt, tmp_path / "g.json")
    back = load_ground_truth(tmp_path / "g.json")
    assert back.per_image == gt.per_image
    assert back.class_counts()["cz"] == 1


def test_integrity_clean_1000(tmp_path):
    ids = [f"i{k}" for k in range(1000)]
    path = write_json(tmp_path / "p.json", {i: [] for i in ids})
    assert check_integrity(path, ids).is_clean


def test_integrity_duplicate_id(tmp_path):
    path = tmp_path / "p.json"
    path.write_text('{"a": [], "b": [], "a": []}')
    rep = check_integrity(path, ["a", "b"])
    assert rep.duplicate_image_ids == ["a"]
    assert not rep.is_clean


def test_integrity_missing_one(tmp_path):
    ids = [f"i{k}" for k in range(1000)]
    path = write_json(tmp_path / "p.json", {i: [] for i in ids[:-1]})
    rep = check_integrity(path, ids)
    assert rep.missing_images == [ids[-1]]


def test_integrity_collects_schema_problems(tmp_path):
    path = write_json(tmp_path / "p.json", {"a": [entry("bad"), entry(score=2)], "b": "x"})
    rep = check_integrity(path, ["a", "b"])
    assert len(rep.schema_violations) == 3


def test_integrity_is_read_only(tmp_path):
    path = write_json(tmp_path / "p.json", {"a": [entry()]})
    before = sha256_file(path)
    check_integrity(path, ["a", "z"])
    assert sha256_file(path) == before


def test_overlap_audit():
    assert overlap_audit(["t1"], ["v1"], {"t1": "h1", "v1": "h2"}) == []
    assert overlap_audit(["t1"], ["v1"], {"t1": "h", "v1": "h"}) == [("t1", "v1")]
    train = [f"t{k}" for k in range(10)]
    val = [f"v{k}" for k in range(10)]
    hashes = {t: f"h{t}" for t in train} | {v: f"h{v}" for v in val}
    for k in range(5):
        hashes[val[k]] = hashes[train[k]]
    assert len(overlap_audit(train, val, hashes)) == 5


def test_manifest_duplicates(tmp_path):
    (tmp_path / "m.txt").write_text("a\nb\na\n")
    with pytest.raises(SchemaError):
        load_manifest(tmp_path / "m.txt")


def test_validate_detection_unknown_class():
    with pytest.raises(SchemaError):
        validate_detection(D("nope", 0, 0, 1, 1, 0.5))


def test_saved_file_is_compact_json(tmp_path):
    save_predictions(preds({"a": [D("cz", 0, 0, 1, 1, 0.25)]}), tmp_path / "p.json")
    text = (tmp_path / "p.json").read_text()
    assert text.endswith("\n") and json.loads(text) == {"a": [{"category": "cz", "bbox": [0.0, 0.0, 1.0, 1.0], "score": 0.25}]}
