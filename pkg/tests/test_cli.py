import csv
import json

import pytest

import edccf.cli as cli
from edccf.cli import EXIT_DATA, EXIT_OK, EXIT_PROTOCOL, EXIT_USAGE, run


@pytest.fixture(scope="module")
def bundle(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    assert run(["synth", "scene", "--images", "120", "--seed", "3", "--out", str(out)]) == EXIT_OK
    return out


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_synth_scene_files(bundle):
    for name in ("gt.json", "manifest.txt", "global.json", "specialist.json", "run_manifest.json"):
        assert (bundle / name).is_file()
    assert len((bundle / "manifest.txt").read_text().split()) == 120


def test_run_manifest_contents(bundle, tmp_path):
    assert run(["evaluate", "--pred", str(bundle / "global.json"), "--gt", str(bundle / "gt.json"), "--out", str(tmp_path)]) == 0
    m = json.loads((tmp_path / "run_manifest.json").read_text())
    assert {"tool_version", "config", "config_hash", "input_digests", "outputs", "timings_s"} <= set(m)
    assert set(m["input_digests"]) == {"pred", "gt"}
    assert "eval.json" in m["outputs"] and "eval.csv" in m["outputs"]
    echoed = json.loads((tmp_path / "eval.json").read_text())["config"]
    assert echoed == m["config"]


def test_evaluate_decompose_audit(bundle, tmp_path):
    gt, glob, spec, man = (str(bundle / n) for n in ("gt.json", "global.json", "specialist.json", "manifest.txt"))
    assert run(["audit", "--pred", glob, "--pred", spec, "--gt", gt, "--manifest", man, "--out", str(tmp_path)]) == 0
    assert run(["decompose", "--pred", glob, "--branch", spec, "--gt", gt, "--out", str(tmp_path)]) == 0
    rows = {r["Class"]: r for r in _rows(tmp_path / "decompose.csv")}
    assert "cz" in rows
    assert run(["evaluate", "--pred", glob, "--gt", gt, "--manifest", man, "--out", str(tmp_path)]) == 0
    assert json.loads((tmp_path / "eval.json").read_text())


@pytest.mark.parametrize("op", ["nms", "softnms", "wbf", "union"])
def test_fuse_ops(bundle, tmp_path, op):
    args = ["fuse", "--op", op, "--pred", str(bundle / "global.json"), "--out", str(tmp_path)]
    if op in ("wbf", "union"):
        args[5:5] = ["--pred", str(bundle / "specialist.json")]
    assert run(args) == EXIT_OK
    assert (tmp_path / "fused.json").is_file()


def test_edccf_and_stats_and_report(bundle, tmp_path):
    gt, glob, spec = (str(bundle / n) for n in ("gt.json", "global.json", "specialist.json"))
    e = tmp_path / "e"
    assert run(["edccf", "--global", glob, "--repair", f"cz={spec}", "--gt", gt, "--strict", "--out", str(e)]) == 0
    rep = json.loads((e / "edccf_report.json").read_text())
    assert set(rep["repair_files"]) == {"cz"}
    s = tmp_path / "s"
    args = ["stats", "--baseline", glob, "--candidate", str(e / "fused.json"), "--gt", gt,
            "--trials", "10", "--subset", "90", "--resamples", "200", "--out", str(s)]
    assert run(args) == 0
    assert len(_rows(s / "trials.csv")) == 30
    assert run(["stats", "folds", *args[1:-1], str(tmp_path / "f")]) == 0
    r = tmp_path / "r"
    assert run(["report", "--stats", str(s / "report.json"), "--out", str(r)]) == 0
    assert (r / "figure.svg").read_text().startswith("<svg")


def test_calibrate(bundle, tmp_path):
    # too few cz detections in the small bundle to fit anything
    small = [str(bundle / n) for n in ("specialist.json", "gt.json")]
    assert run(["calibrate", "crc", "--pred", small[0], "--gt", small[1], "--out", str(tmp_path)]) == EXIT_DATA
    big = tmp_path / "big"
    assert run(["synth", "scene", "--images", "600", "--out", str(big)]) == 0
    gt, glob, spec = (str(big / n) for n in ("gt.json", "global.json", "specialist.json"))
    assert run(["calibrate", "crc", "--pred", spec, "--gt", gt, "--out", str(tmp_path)]) == 0
    assert run(["calibrate", "rcv", "--global", glob, "--hard", spec, "--gt", gt, "--out", str(tmp_path)]) == 0
    alphas = [float(r["alpha"]) for r in _rows(tmp_path / "rcv.csv")]
    assert alphas[0] == 0.0 and alphas[-1] == 1.0


def test_synth_dominance_and_bench(bundle, tmp_path):
    assert run(["synth", "dominance", "--seeds", "3", "--out", str(tmp_path)]) == 0
    assert len(_rows(tmp_path / "dominance.csv")) == 3
    b = tmp_path / "b"
    args = ["bench", "--global", str(bundle / "global.json"), "--pred", str(bundle / "specialist.json"),
            "--images", "20", "--repeats", "2", "--out", str(b)]
    assert run(args) == 0
    assert [r["pipeline"] for r in _rows(b / "bench.csv")] == ["keep_global", "wbf_2_sources"]


def test_reruns_are_byte_identical(bundle, tmp_path):
    gt, glob, spec = (str(bundle / n) for n in ("gt.json", "global.json", "specialist.json"))
    outs = []
    for k in range(2):
        d = tmp_path / str(k)
        assert run(["edccf", "--global", glob, "--repair", f"cz={spec}", "--gt", gt, "--out", str(d)]) == 0
        outs.append({p.name: p.read_bytes() for p in d.iterdir() if p.name != "run_manifest.json"})
    assert outs[0] == outs[1]
    m = [json.loads((tmp_path / str(k) / "run_manifest.json").read_text()) for k in range(2)]
    assert m[0]["config_hash"] == m[1]["config_hash"]


def test_missing_input_is_data_error(tmp_path):
    assert run(["evaluate", "--pred", str(tmp_path / "nope.json"), "--gt", str(tmp_path / "gt.json"),
                "--out", str(tmp_path)]) == EXIT_DATA


def test_usage_errors(bundle, tmp_path):
    gt, glob = str(bundle / "gt.json"), str(bundle / "global.json")
    assert run(["frobnicate"]) == EXIT_USAGE
    assert run(["edccf", "--global", glob, "--gt", gt, "--w-c", "0.5", "--out", str(tmp_path)]) == EXIT_USAGE
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"bogus": 1}))
    assert run(["evaluate", "--pred", glob, "--gt", gt, "--config", str(cfg), "--out", str(tmp_path)]) == EXIT_USAGE


def test_config_file_overrides(bundle, tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"sigma_c": 0.1}))
    gt, glob, spec = (str(bundle / n) for n in ("gt.json", "global.json", "specialist.json"))
    assert run(["edccf", "--global", glob, "--repair", f"cz={spec}", "--gt", gt, "--config", str(cfg),
                "--out", str(tmp_path)]) == 0
    m = json.loads((tmp_path / "run_manifest.json").read_text())
    assert m["config"]["params"]["sigma_c"] == 0.1


def test_strict_stable_regression_exits_4(bundle, tmp_path, monkeypatch):
    real = cli.run_edccf

    def regressing(*a, **kw):
        res = real(*a, **kw)
        res.preservation.stable_violations.append(("hxlf", 0.7, 0.6))
        return res

    monkeypatch.setattr(cli, "run_edccf", regressing)
    gt, glob, spec = (str(bundle / n) for n in ("gt.json", "global.json", "specialist.json"))
    args = ["edccf", "--global", glob, "--repair", f"cz={spec}", "--gt", gt, "--out", str(tmp_path)]
    assert run(args) == EXIT_OK
    assert run([*args, "--strict"]) == EXIT_PROTOCOL
