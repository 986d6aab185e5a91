"""Command-line entry point.

Every sub-command writes its result files into ``--out`` together with a
``run_manifest.json`` holding the resolved config, its hash, the sha256 of
every input file and per-stage timings. Result files never contain timings,
so equal config and inputs give byte-identical results.

Exit codes: 0 ok, 2 usage / invalid thresholds, 3 data errors, 4 protocol
violation under ``--strict``.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import statistics
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

from . import __version__
from .calibration import DEFAULT_ALPHAS, crc_check, rcv_sweep
from .dataset_io import (
    DEFAULT_VOCAB,
    BranchPredictions,
    check_integrity,
    load_ground_truth,
    load_manifest,
    load_predictions,
    overlap_audit,
    save_ground_truth,
    save_manifest,
    save_predictions,
    sha256_file,
)
from .decomposition import (
    DEFAULT_IOU_PA,
    DEFAULT_IOU_TP,
    DEFAULT_SIGMA_OP,
    DEFAULT_TAU_HARD,
    BranchRoleAudit,
    audit_branches,
    classify_roles,
    decompose_errors,
    hcec_table_rows,
)
from .errors import DataError, EdccfError, InvalidThresholds, MissingClass, MissingRepairBranch, ProtocolViolation
from .fusion import DEFAULT_DEDUP_IOU, DEFAULT_WBF_IOU, FusionWeights, nms, soft_nms, union_low_threshold, wbf
from .matching import evaluate
from .policy import PolicyConfig, run_edccf
from .stats import fold_trials, report, subset_trials, summary_csv, summary_rows

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_PROTOCOL = 0, 2, 3, 4

DEFAULTS: dict[str, Any] = {
    "tau_hard": DEFAULT_TAU_HARD,
    "sigma_op": DEFAULT_SIGMA_OP,
    "iou_tp": DEFAULT_IOU_TP,
    "iou_pa": DEFAULT_IOU_PA,
    "sigma_c": 0.05,
    "w_c": 0.15,
    "dedup_iou": DEFAULT_DEDUP_IOU,
    "wbf_iou": DEFAULT_WBF_IOU,
    "seed": 0,
    "trials": 50,
    "subset": 450,
    "k": 15,
    "resamples": 1000,
}


class UsageError(EdccfError):
    pass


@dataclass
class RunConfig:
    command: str
    inputs: dict[str, str]
    params: dict[str, Any]
    out: str

    def validate(self) -> None:
        p = self.params
        for name in ("tau_hard", "sigma_op", "iou_tp", "iou_pa", "dedup_iou", "wbf_iou"):
            if name in p and not 0.0 < p[name] < 1.0:
                raise InvalidThresholds(f"{name} must lie in (0, 1), got {p[name]}")
        if "iou_pa" in p and "iou_tp" in p and not p["iou_pa"] < p["iou_tp"]:
            raise InvalidThresholds("iou_pa must be below iou_tp")
        if "sigma_c" in p and not 0.0 <= p["sigma_c"] < 1.0:
            raise InvalidThresholds("sigma_c must lie in [0, 1)")
        if "w_c" in p and not 0.10 <= p["w_c"] <= 0.25:
            raise InvalidThresholds("w_c must lie in [0.10, 0.25]")

    def to_dict(self) -> dict:
        return {"command": self.command, "inputs": dict(sorted(self.inputs.items())), "params": dict(sorted(self.params.items()))}

    @property
    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


@dataclass
class RunManifest:
    config: RunConfig
    input_digests: dict[str, str] = field(default_factory=dict)
    timings: dict[str, float] = field(default_factory=dict)
    outputs: list[str] = field(default_factory=list)

    def stage(self, name: str):
        return _Timer(self.timings, name)

    def to_dict(self) -> dict:
        return {
            "tool_version": __version__,
            "config": self.config.to_dict(),
            "config_hash": self.config.config_hash,
            "input_digests": self.input_digests,
            "outputs": sorted(self.outputs),
            "timings_s": self.timings,
        }


class _Timer:
    def __init__(self, sink: dict, name: str):
        self.sink, self.name = sink, name

    def __enter__(self):
        self.t0 = time.perf_counter()

    def __exit__(self, *exc):
        self.sink[self.name] = self.sink.get(self.name, 0.0) + time.perf_counter() - self.t0


class _Run:
    """Output directory, config echo and manifest bookkeeping for one invocation."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.out = Path(cfg.out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.manifest = RunManifest(cfg)
        for name, path in sorted(cfg.inputs.items()):
            if path and Path(path).is_file():
                self.manifest.input_digests[name] = sha256_file(path)

    def stage(self, name: str):
        return self.manifest.stage(name)

    def _path(self, name: str) -> Path:
        self.manifest.outputs.append(name)
        return self.out / name

    def write_json(self, name: str, obj: Any, *, echo: bool = True) -> None:
        if echo and isinstance(obj, dict):
            obj = {"config": self.cfg.to_dict(), **obj}
        self._path(name).write_text(json.dumps(obj, indent=2, sort_keys=False) + "\n", encoding="utf-8")

    def write_text(self, name: str, text: str) -> None:
        self._path(name).write_text(text, encoding="utf-8")

    def write_csv(self, name: str, rows: Sequence[dict], columns: Sequence[str] | None = None) -> None:
        self.write_text(name, _csv(rows, columns))

    def write_predictions(self, name: str, preds: BranchPredictions) -> None:
        save_predictions(preds, self._path(name))

    def finish(self) -> None:
        path = self.out / "run_manifest.json"
        path.write_text(json.dumps(self.manifest.to_dict(), indent=2) + "\n", encoding="utf-8")


def _csv(rows: Sequence[dict], columns: Sequence[str] | None = None) -> str:
    buf = io.StringIO()
    cols = list(columns or (rows[0].keys() if rows else []))
    w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    for r in rows:
        w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    return buf.getvalue()


# ---------------------------------------------------------------------------
# argument handling


def _floats(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _repair_spec(text: str) -> tuple[str, str]:
    cls, sep, path = text.partition("=")
    if not sep or not cls or not path:
        raise argparse.ArgumentTypeError(f"expected CLASS=PATH, got {text!r}")
    return cls, path


def _add_common(p: argparse.ArgumentParser, *names: str) -> None:
    p.add_argument("--out", default=".", help="output directory (default: current)")
    p.add_argument("--config", help="JSON file with parameter overrides")
    for n in names:
        kind = int if isinstance(DEFAULTS[n], int) else float
        p.add_argument(f"--{n.replace('_', '-')}", dest=n, type=kind, default=None)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="edccf", description="Error-decomposed class-conditional fusion toolkit")
    ap.add_argument("--version", action="version", version=f"edccf {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("audit", help="prediction-file integrity and train/val overlap")
    p.add_argument("--pred", action="append", default=[], help="prediction file (repeatable)")
    p.add_argument("--gt", help="ground-truth file to check as well")
    p.add_argument("--manifest", required=True)
    p.add_argument("--train-manifest")
    p.add_argument("--hashes", help="JSON map image id -> content hash, for the overlap audit")
    _add_common(p)

    p = sub.add_parser("evaluate", help="per-class AP50 / AP50-95")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--manifest")
    p.add_argument("--max-dets", type=int, default=None)
    _add_common(p)

    p = sub.add_parser("decompose", help="error buckets, HCEC and BSR per class")
    p.add_argument("--pred", required=True, help="the global branch")
    p.add_argument("--branch", action="append", default=[], help="additional branch for the role audit")
    p.add_argument("--gt", required=True)
    p.add_argument("--manifest")
    _add_common(p, "tau_hard", "sigma_op", "iou_tp", "iou_pa")

    p = sub.add_parser("fuse", help="apply one operator uniformly to every class")
    p.add_argument("--op", required=True, choices=["nms", "softnms", "wbf", "union"])
    p.add_argument("--pred", action="append", required=True, help="input branch (repeatable; union: global then repair)")
    p.add_argument("--manifest")
    p.add_argument("--iou", type=float, default=None, help="NMS / WBF cluster IoU")
    p.add_argument("--slope", type=float, default=1.0, help="soft-NMS linear slope or gaussian sigma")
    p.add_argument("--softnms-mode", choices=["linear", "gaussian"], default="linear")
    p.add_argument("--weights", type=_floats, help="WBF branch weights, comma separated")
    _add_common(p, "sigma_c", "dedup_iou")

    p = sub.add_parser("edccf", help="decompose, derive and apply the class-conditional policy")
    p.add_argument("--global", dest="global_pred", required=True)
    p.add_argument("--repair", action="append", type=_repair_spec, default=[], help="CLASS=PATH (repeatable)")
    p.add_argument("--gt", required=True)
    p.add_argument("--manifest")
    p.add_argument("--arm-order", choices=["positional", "severity"], default="positional")
    p.add_argument("--strict", action="store_true", help="exit 4 when a stable class regresses")
    _add_common(p, "tau_hard", "sigma_op", "iou_tp", "iou_pa", "sigma_c", "w_c", "dedup_iou", "wbf_iou")

    p = sub.add_parser("calibrate", help="CRC fit / RCV sweep")
    csub = p.add_subparsers(dest="mode", required=True)
    c = csub.add_parser("crc")
    c.add_argument("--pred", required=True)
    c.add_argument("--gt", required=True)
    c.add_argument("--class", dest="class_code", default="cz")
    c.add_argument("--split", type=float, default=0.5)
    c.add_argument("--manifest")
    _add_common(c, "seed")
    c = csub.add_parser("rcv")
    c.add_argument("--global", dest="global_pred", required=True)
    c.add_argument("--hard", required=True)
    c.add_argument("--gt", required=True)
    c.add_argument("--class", dest="class_code", default="cz")
    c.add_argument("--alphas", type=_floats, default=list(DEFAULT_ALPHAS))
    c.add_argument("--blend", choices=["wbf", "scaled_union"], default="wbf")
    c.add_argument("--manifest")
    _add_common(c)

    p = sub.add_parser("stats", help="paired subset trials or five-fold view")
    p.add_argument("view", nargs="?", choices=["trials", "folds"], default="trials")
    p.add_argument("--baseline", required=True)
    p.add_argument("--candidate", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--manifest")
    p.add_argument("--classes", default="cz", help="comma-separated classes reported individually")
    _add_common(p, "trials", "subset", "seed", "k", "resamples")

    p = sub.add_parser("synth", help="synthetic bundles and dominance experiments")
    p.add_argument("kind", nargs="?", choices=["scene", "dominance"], default="scene")
    p.add_argument("--profile", choices=["longtail"], default="longtail")
    p.add_argument("--images", type=int, default=600)
    p.add_argument("--variant", choices=["default", "no_signal", "corrupted"], default="default")
    p.add_argument("--seeds", type=int, default=200)
    p.add_argument("--precisions", type=_floats, default=[0.9, 0.3])
    p.add_argument("--recalls", type=_floats, default=[0.9, 0.3])
    p.add_argument("--calibration", choices=["order_preserving", "scrambled"], default="order_preserving")
    _add_common(p, "seed")

    p = sub.add_parser("report", help="plot-data CSV and SVG from a stats report")
    p.add_argument("--stats", required=True, help="report.json written by `stats`")
    _add_common(p)

    p = sub.add_parser("bench", help="post-processing latency of KeepGlobal vs multi-source WBF")
    p.add_argument("--global", dest="global_pred", required=True)
    p.add_argument("--pred", action="append", default=[], help="extra WBF source (repeatable)")
    p.add_argument("--images", type=int, default=100)
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--manifest")
    _add_common(p)
    return ap


def _resolve(args: argparse.Namespace) -> dict[str, Any]:
    overrides: dict[str, Any] = {}
    if getattr(args, "config", None):
        try:
            overrides = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, ValueError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(overrides, dict):
            raise UsageError("config file must hold a JSON object")
        unknown = sorted(set(overrides) - set(DEFAULTS))
        if unknown:
            raise UsageError(f"unknown config keys: {unknown}")
    params = {}
    for name, default in DEFAULTS.items():
        if not hasattr(args, name):
            continue
        value = getattr(args, name)
        params[name] = value if value is not None else overrides.get(name, default)
    return params


def _config(args: argparse.Namespace, inputs: dict[str, str | None], extra: dict | None = None) -> RunConfig:
    params = _resolve(args)
    params.update(extra or {})
    cfg = RunConfig(args.command if not getattr(args, "mode", None) else f"{args.command} {args.mode}",
                    {k: v for k, v in inputs.items() if v}, params, args.out)
    cfg.validate()
    return cfg


def _manifest(args) -> list[str] | None:
    return load_manifest(args.manifest) if getattr(args, "manifest", None) else None


# ---------------------------------------------------------------------------
# sub-commands


def cmd_audit(args) -> int:
    inputs = {"manifest": args.manifest, "gt": args.gt, "train_manifest": args.train_manifest, "hashes": args.hashes}
    inputs.update({f"pred{i}": p for i, p in enumerate(args.pred)})
    run = _Run(_config(args, inputs))
    manifest = load_manifest(args.manifest)
    files = {}
    with run.stage("integrity"):
        for p in args.pred:
            files[p] = check_integrity(p, manifest).to_dict()
        if args.gt:
            files[args.gt] = check_integrity(args.gt, manifest, with_score=False).to_dict()
    result: dict[str, Any] = {"files": files}
    if args.train_manifest:
        if not args.hashes:
            raise UsageError("--train-manifest needs --hashes")
        try:
            hashes = json.loads(Path(args.hashes).read_text(encoding="utf-8"))
        except (OSError, ValueError) as exc:
            raise DataError(f"cannot read hashes {args.hashes}: {exc}") from exc
        with run.stage("overlap"):
            pairs = overlap_audit(load_manifest(args.train_manifest), manifest, hashes)
        result["overlap"] = [list(p) for p in pairs]
    result["clean"] = all(f["clean"] for f in files.values()) and not result.get("overlap")
    run.write_json("audit.json", result)
    run.finish()
    return EXIT_OK


def cmd_evaluate(args) -> int:
    run = _Run(_config(args, {"pred": args.pred, "gt": args.gt, "manifest": args.manifest}, {"max_dets": args.max_dets}))
    m = _manifest(args)
    with run.stage("load"):
        gt = load_ground_truth(args.gt, manifest=m)
        preds = load_predictions(args.pred, manifest=m or gt.image_ids)
    with run.stage("evaluate"):
        res = evaluate(preds, gt, max_dets=args.max_dets)
    classes = list(DEFAULT_VOCAB.codes)
    run.write_json("eval.json", res.to_dict())
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(res.csv_header(classes))
    w.writerow([repr(v) if isinstance(v, float) else v for v in res.csv_row(classes)])
    run.write_text("eval.csv", buf.getvalue())
    run.finish()
    return EXIT_OK


def _branch_ids(paths: Sequence[str], reserved: Sequence[str] = ()) -> list[str]:
    ids, taken = [], set(reserved)
    for p in paths:
        base = Path(p).stem
        name, n = base, 1
        while name in taken:
            n += 1
            name = f"{base}#{n}"
        taken.add(name)
        ids.append(name)
    return ids


def cmd_decompose(args) -> int:
    inputs = {"pred": args.pred, "gt": args.gt, "manifest": args.manifest}
    inputs.update({f"branch{i}": b for i, b in enumerate(args.branch)})
    cfg = _config(args, inputs)
    run = _Run(cfg)
    p = cfg.params
    m = _manifest(args)
    with run.stage("load"):
        gt = load_ground_truth(args.gt, manifest=m)
        ids = gt.image_ids
        names = _branch_ids([args.pred, *args.branch])
        branches = [load_predictions(path, manifest=m or ids, branch_id=b) for path, b in zip([args.pred, *args.branch], names)]
    with run.stage("decompose"):
        buckets = decompose_errors(branches[0], gt, sigma_op=p["sigma_op"], iou_tp=p["iou_tp"], iou_pa=p["iou_pa"])
        audit = audit_branches(branches, gt)
        if audit.global_best != branches[0].branch_id:
            audit = BranchRoleAudit(branches[0].branch_id, dict(audit.class_best), audit.map_all_by_branch,
                                    audit.map_class_by_branch, audit.results)
        profiles = classify_roles(audit, buckets, p["tau_hard"])
    rows = hcec_table_rows(profiles)
    run.write_csv("decompose.csv", rows)
    run.write_json("decompose.json", {"profiles": {c: pr.to_dict() for c, pr in profiles.items()}, "audit": audit.to_dict()})
    run.finish()
    return EXIT_OK


def cmd_fuse(args) -> int:
    inputs = {f"pred{i}": x for i, x in enumerate(args.pred)}
    inputs["manifest"] = args.manifest
    extra = {"op": args.op, "iou": args.iou, "slope": args.slope, "softnms_mode": args.softnms_mode, "weights": args.weights}
    cfg = _config(args, inputs, extra)
    run = _Run(cfg)
    m = _manifest(args)
    with run.stage("load"):
        names = _branch_ids(args.pred)
        first = load_predictions(args.pred[0], manifest=m, branch_id=names[0])
        ids = m or first.image_ids
        branches = [first] + [load_predictions(x, manifest=ids, branch_id=b) for x, b in zip(args.pred[1:], names[1:])]
    op = args.op
    if op == "union" and len(branches) != 2:
        raise UsageError("union needs exactly two --pred files: global then repair")
    weights = None
    if op == "wbf":
        w = args.weights or [1.0] * len(branches)
        if len(w) != len(branches):
            raise UsageError("--weights must give one value per --pred")
        weights = FusionWeights(dict(zip(names, w)))
    per_image = {}
    with run.stage("fuse"):
        for i in ids:
            dets = [d for b in branches for d in b.per_image.get(i, ())]
            if op == "nms":
                per_image[i] = nms(dets, args.iou if args.iou is not None else 0.5)
            elif op == "softnms":
                per_image[i] = soft_nms(dets, args.slope, args.softnms_mode)
            elif op == "wbf":
                src = [(b.branch_id, b.per_image.get(i, ())) for b in branches]
                per_image[i] = [t.fused for t in wbf(src, weights, args.iou if args.iou is not None else DEFAULT_WBF_IOU)]
            else:
                per_image[i] = union_low_threshold(
                    list(branches[0].per_image[i]), list(branches[1].per_image[i]),
                    cfg.params["sigma_c"], cfg.params["dedup_iou"],
                )
    run.write_predictions("fused.json", BranchPredictions(op, per_image))
    run.finish()
    return EXIT_OK


def cmd_edccf(args) -> int:
    inputs = {"global": args.global_pred, "gt": args.gt, "manifest": args.manifest}
    inputs.update({f"repair_{c}": path for c, path in args.repair})
    cfg = _config(args, inputs, {"arm_order": args.arm_order, "strict": args.strict})
    run = _Run(cfg)
    p = cfg.params
    m = _manifest(args)
    with run.stage("load"):
        gt = load_ground_truth(args.gt, manifest=m)
        ids = m or gt.image_ids
        glob = load_predictions(args.global_pred, manifest=ids, branch_id="global")
        paths = list(dict.fromkeys(path for _, path in args.repair))
        names = _branch_ids(paths, reserved=["global"])
        repairs = [load_predictions(path, manifest=ids, branch_id=b) for path, b in zip(paths, names)]
    config = PolicyConfig(
        sigma_c=p["sigma_c"], w_c=p["w_c"], dedup_iou=p["dedup_iou"], wbf_iou=p["wbf_iou"], arm_order=args.arm_order
    )
    with run.stage("pipeline"):
        result = run_edccf(glob, repairs, gt, sigma_op=p["sigma_op"], iou_tp=p["iou_tp"], iou_pa=p["iou_pa"],
                           tau_hard=p["tau_hard"], config=config)
    name_of = dict(zip(paths, names))
    named = {c: name_of[path] for c, path in args.repair}
    run.write_predictions("fused.json", result.fused.predictions)
    run.write_json("edccf_report.json", {**result.to_dict(), "repair_files": named})
    run.finish()
    if args.strict and result.preservation.stable_violations:
        raise ProtocolViolation(
            "stable classes regressed: " + ", ".join(c for c, _, _ in result.preservation.stable_violations)
        )
    return EXIT_OK


def cmd_calibrate(args) -> int:
    if args.mode == "crc":
        cfg = _config(args, {"pred": args.pred, "gt": args.gt, "manifest": args.manifest},
                      {"class": args.class_code, "split": args.split})
        run = _Run(cfg)
        m = _manifest(args)
        gt = load_ground_truth(args.gt, manifest=m)
        preds = load_predictions(args.pred, manifest=m or gt.image_ids)
        with run.stage("crc"):
            check = crc_check(preds, gt, args.class_code, split_fraction=args.split, seed=cfg.params["seed"])
        summary = check.summary()
        summary.pop("fit_images", None)
        run.write_csv("crc.csv", [summary])
        run.write_json("crc.json", {"summary": check.summary(), "before": check.before.to_dict(), "after": check.after.to_dict()})
    else:
        cfg = _config(args, {"global": args.global_pred, "hard": args.hard, "gt": args.gt, "manifest": args.manifest},
                      {"class": args.class_code, "alphas": args.alphas, "blend": args.blend})
        run = _Run(cfg)
        m = _manifest(args)
        gt = load_ground_truth(args.gt, manifest=m)
        ids = m or gt.image_ids
        glob = load_predictions(args.global_pred, manifest=ids, branch_id="global")
        hard = load_predictions(args.hard, manifest=ids, branch_id="hard")
        with run.stage("rcv"):
            sweep = rcv_sweep(glob, hard, gt, args.class_code, args.alphas, mode=args.blend)
        run.write_csv("rcv.csv", sweep.rows())
        run.write_json("rcv.json", {"summary": sweep.summary(), "rows": sweep.rows()})
    run.finish()
    return EXIT_OK


def cmd_stats(args) -> int:
    classes = tuple(c for c in args.classes.split(",") if c)
    cfg = _config(args, {"baseline": args.baseline, "candidate": args.candidate, "gt": args.gt, "manifest": args.manifest},
                  {"view": args.view, "classes": list(classes)})
    run = _Run(cfg)
    p = cfg.params
    m = _manifest(args)
    with run.stage("load"):
        gt = load_ground_truth(args.gt, manifest=m)
        ids = m or gt.image_ids
        base = load_predictions(args.baseline, manifest=ids, branch_id="baseline")
        cand = load_predictions(args.candidate, manifest=ids, branch_id="candidate")
    with run.stage("trials"):
        if args.view == "trials":
            if p["subset"] > len(ids):
                raise UsageError(f"--subset {p['subset']} exceeds the {len(ids)} available images")
            table = subset_trials(base, cand, gt, p["trials"], p["subset"], p["seed"], classes=classes)
        else:
            table = fold_trials(base, cand, gt, p["seed"], classes=classes)
    with run.stage("tests"):
        reports = report(table, p["k"], p["resamples"], p["seed"])
    run.write_text("trials.csv", table.csv_text())
    run.write_text("summary.csv", summary_csv(reports))
    run.write_json("report.json", {"metrics": {mname: r.to_dict() for mname, r in reports.items()},
                                   "summary": summary_rows(reports)})
    run.finish()
    return EXIT_OK


def cmd_synth(args) -> int:
    from .synthetic import child_seed, dominance_suite, generate_scene, scenario_branches

    extra = {"kind": args.kind, "profile": args.profile}
    if args.kind == "scene":
        extra.update(images=args.images, variant=args.variant)
    else:
        extra.update(seeds=args.seeds, precisions=args.precisions, recalls=args.recalls, calibration=args.calibration)
    cfg = _config(args, {}, extra)
    run = _Run(cfg)
    seed = cfg.params["seed"]
    if args.kind == "scene":
        if args.images <= 0:
            raise UsageError("--images must be positive")
        with run.stage("generate"):
            gt = generate_scene(None, args.images, (1, 2), child_seed(seed, 0))
            glob, repair = scenario_branches(gt, seed, args.variant)
        save_ground_truth(gt, run._path("gt.json"))
        save_manifest(gt.image_ids, run._path("manifest.txt"))
        run.write_predictions("global.json", glob)
        run.write_predictions("specialist.json", repair)
    else:
        if len(args.precisions) != len(args.recalls) or len(args.precisions) < 2:
            raise UsageError("--precisions and --recalls need the same length, at least 2")
        with run.stage("dominance"):
            res = dominance_suite(args.seeds, seed, precisions=args.precisions, recalls=args.recalls,
                                  calibration=args.calibration)
        run.write_csv("dominance.csv", [r.to_row() for r in res])
    run.finish()
    return EXIT_OK


def _svg(rows: list[dict]) -> str:
    """Bar chart of mean deltas with bootstrap CI whiskers, one bar per metric."""
    width, height, pad, bar = 120 * max(len(rows), 1) + 80, 320, 40, 50
    vals = [v for r in rows for v in (r["mean_delta"], r["ci_lo"], r["ci_hi"])] + [0.0]
    lo, hi = min(vals), max(vals)
    span = (hi - lo) or 1.0

    def y(v: float) -> float:
        return round(pad + (hi - v) / span * (height - 2 * pad), 3)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        f'<line x1="{pad}" y1="{y(0.0)}" x2="{width - pad}" y2="{y(0.0)}" stroke="black"/>',
    ]
    for k, r in enumerate(rows):
        x = pad + 20 + 120 * k
        top, bottom = sorted((y(r["mean_delta"]), y(0.0)))
        cx = x + bar / 2
        parts += [
            f'<rect x="{x}" y="{top}" width="{bar}" height="{round(bottom - top, 3)}" fill="steelblue"/>',
            f'<line x1="{cx}" y1="{y(r["ci_lo"])}" x2="{cx}" y2="{y(r["ci_hi"])}" stroke="black"/>',
            f'<line x1="{cx - 8}" y1="{y(r["ci_lo"])}" x2="{cx + 8}" y2="{y(r["ci_lo"])}" stroke="black"/>',
            f'<line x1="{cx - 8}" y1="{y(r["ci_hi"])}" x2="{cx + 8}" y2="{y(r["ci_hi"])}" stroke="black"/>',
            f'<text x="{cx}" y="{height - 10}" text-anchor="middle" font-size="12">{r["metric"]}</text>',
        ]
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def cmd_report(args) -> int:
    run = _Run(_config(args, {"stats": args.stats}))
    try:
        data = json.loads(Path(args.stats).read_text(encoding="utf-8"))
        summary = data["summary"]
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise DataError(f"{args.stats} is not a stats report: {exc}") from exc
    rows = [
        {
            "metric": s["metric"],
            "mean_delta": float(s["mean_delta"]),
            "ci_lo": float(s["delta_ci_lo"]),
            "ci_hi": float(s["delta_ci_hi"]),
            "win_rate": float(s["win_rate"]),
            "p_adjusted": float(s["p_adjusted"]),
        }
        for s in summary
    ]
    run.write_csv("figure.csv", rows, ["metric", "mean_delta", "ci_lo", "ci_hi", "win_rate", "p_adjusted"])
    run.write_text("figure.svg", _svg(rows))
    run.finish()
    return EXIT_OK


def bench_postprocess(
    global_branch: BranchPredictions,
    sources: Sequence[BranchPredictions],
    n_images: int = 100,
    repeats: int = 5,
) -> list[dict]:
    """Median wall-clock seconds of the post-processing stage alone, per candidate pipeline."""
    ids = global_branch.image_ids
    if n_images > len(ids):
        raise UsageError(f"n_images {n_images} exceeds the {len(ids)} available images")
    ids = ids[:n_images]
    all_src = [global_branch, *sources]
    weights = FusionWeights.uniform([b.branch_id for b in all_src])

    def keep_global():
        return {i: list(global_branch.per_image[i]) for i in ids}

    def wbf_all():
        return {i: [t.fused for t in wbf([(b.branch_id, b.per_image.get(i, ())) for b in all_src], weights)] for i in ids}

    rows = []
    for name, fn in (("keep_global", keep_global), (f"wbf_{len(all_src)}_sources", wbf_all)):
        times = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            fn()
            times.append(time.perf_counter() - t0)
        rows.append({"pipeline": name, "n_images": len(ids), "repeats": repeats, "median_s": statistics.median(times)})
    ref = rows[-1]["median_s"]
    for r in rows:
        r["relative_to_wbf"] = (r["median_s"] - ref) / ref if ref > 0 else 0.0
    return rows


def cmd_bench(args) -> int:
    inputs = {"global": args.global_pred, "manifest": args.manifest}
    inputs.update({f"pred{i}": x for i, x in enumerate(args.pred)})
    run = _Run(_config(args, inputs, {"images": args.images, "repeats": args.repeats}))
    if args.repeats < 1:
        raise UsageError("--repeats must be at least 1")
    m = _manifest(args)
    glob = load_predictions(args.global_pred, manifest=m, branch_id="global")
    names = _branch_ids(args.pred, reserved=["global"])
    sources = [load_predictions(x, manifest=m or glob.image_ids, branch_id=b) for x, b in zip(args.pred, names)]
    with run.stage("bench"):
        rows = bench_postprocess(glob, sources, args.images, args.repeats)
    run.write_csv("bench.csv", rows)
    run.finish()
    return EXIT_OK


COMMANDS = {
    "audit": cmd_audit,
    "evaluate": cmd_evaluate,
    "decompose": cmd_decompose,
    "fuse": cmd_fuse,
    "edccf": cmd_edccf,
    "calibrate": cmd_calibrate,
    "stats": cmd_stats,
    "synth": cmd_synth,
    "report": cmd_report,
    "bench": cmd_bench,
}


def run(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return COMMANDS[args.command](args)
    except ProtocolViolation as exc:
        print(f"edccf: protocol violation: {exc}", file=sys.stderr)
        return EXIT_PROTOCOL
    except (UsageError, InvalidThresholds) as exc:
        print(f"edccf: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, MissingRepairBranch, MissingClass) as exc:
        print(f"edccf: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except EdccfError as exc:
        print(f"edccf: {exc}", file=sys.stderr)
        return EXIT_DATA


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
