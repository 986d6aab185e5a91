"""On-disk formats, the class vocabulary, and integrity checks.

Prediction file::

    {"<image-id>": [{"category": "cz", "bbox": [x, y, w, h], "score": 0.73}, ...], ...}

Ground-truth files use the same shape without ``"score"``. Manifests are
newline-separated image ids. Boxes are absolute ``[x, y, w, h]``; pass
``box_format="xyxy"`` to read ``[x1, y1, x2, y2]`` input instead.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Iterator, Mapping, Sequence

from .errors import ManifestMismatch, ParseError, SchemaError

DEFAULT_CLASS_CODES: tuple[str, ...] = ("lmlj", "hbgdf", "hxlf", "zxlf", "jl", "kc", "ssf", "cz")
ROLES = ("hard", "stable")
BOX_FORMATS = ("xywh", "xyxy")


@dataclass(frozen=True)
class ClassVocabulary:
    codes: tuple[str, ...] = DEFAULT_CLASS_CODES
    roles: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        codes = tuple(self.codes)
        object.__setattr__(self, "codes", codes)
        if any(not isinstance(c, str) or not c for c in codes):
            raise ValueError("class codes must be non-empty strings")
        if len(set(codes)) != len(codes):
            raise ValueError("class codes must be unique")
        for code, role in self.roles.items():
            if code not in codes:
                raise ValueError(f"role assigned to unknown class {code!r}")
            if role not in ROLES:
                raise ValueError(f"unknown role {role!r}")
        object.__setattr__(self, "roles", dict(self.roles))

    def __contains__(self, code: object) -> bool:
        return code in self.codes

    def __iter__(self) -> Iterator[str]:
        return iter(self.codes)

    def __len__(self) -> int:
        return len(self.codes)

    def role(self, code: str) -> str:
        return self.roles.get(code, "stable")

    def with_roles(self, roles: Mapping[str, str]) -> "ClassVocabulary":
        return ClassVocabulary(self.codes, {**self.roles, **roles})

    @property
    def hard_classes(self) -> list[str]:
        return [c for c in self.codes if self.role(c) == "hard"]


DEFAULT_VOCAB = ClassVocabulary()


@dataclass(frozen=True, order=True)
class Box:
    """Axis-aligned box, left/top corner plus positive width and height."""

    x: float
    y: float
    w: float
    h: float

    def __post_init__(self) -> None:
        vals = (self.x, self.y, self.w, self.h)
        if not all(math.isfinite(v) for v in vals):
            raise SchemaError(f"non-finite box coordinate in {vals}")
        if self.w <= 0 or self.h <= 0:
            raise SchemaError(f"box must have positive width and height, got {vals}")
        if self.x < 0 or self.y < 0:
            raise SchemaError(f"box origin must be non-negative, got {vals}")

    @property
    def x2(self) -> float:
        return self.x + self.w

    @property
    def y2(self) -> float:
        return self.y + self.h

    @property
    def area(self) -> float:
        return self.w * self.h

    def as_xyxy(self) -> tuple[float, float, float, float]:
        return (self.x, self.y, self.x + self.w, self.y + self.h)

    @classmethod
    def from_xyxy(cls, x1: float, y1: float, x2: float, y2: float) -> "Box":
        return cls(x1, y1, x2 - x1, y2 - y1)

    def to_list(self) -> list[float]:
        return [self.x, self.y, self.w, self.h]


@dataclass(frozen=True)
class Detection:
    class_code: str
    box: Box
    score: float

    def __post_init__(self) -> None:
        if not (0.0 <= self.score <= 1.0):
            raise SchemaError(f"score {self.score!r} outside [0, 1]")

    def with_score(self, score: float) -> "Detection":
        return Detection(self.class_code, self.box, score)

    def sort_key(self) -> tuple:
        """Content key used wherever a deterministic tie-break is needed."""
        return (-self.score, self.box.x, self.box.y, self.box.w, self.box.h, self.class_code)

    def to_json(self) -> dict[str, Any]:
        return {"category": self.class_code, "bbox": self.box.to_list(), "score": self.score}


@dataclass(frozen=True)
class GroundTruth:
    class_code: str
    box: Box

    def to_json(self) -> dict[str, Any]:
        return {"category": self.class_code, "bbox": self.box.to_list()}


@dataclass(frozen=True)
class BranchPredictions:
    branch_id: str
    per_image: Mapping[str, tuple[Detection, ...]]

    def __post_init__(self) -> None:
        object.__setattr__(self, "per_image", {k: tuple(v) for k, v in self.per_image.items()})

    @property
    def image_ids(self) -> list[str]:
        return list(self.per_image)

    def n_detections(self) -> int:
        return sum(len(v) for v in self.per_image.values())

    def subset(self, image_ids: Iterable[str]) -> "BranchPredictions":
        return BranchPredictions(self.branch_id, {i: self.per_image[i] for i in image_ids})

    def for_class(self, class_code: str) -> dict[str, tuple[Detection, ...]]:
        return {i: tuple(d for d in dets if d.class_code == class_code) for i, dets in self.per_image.items()}

    def renamed(self, branch_id: str) -> "BranchPredictions":
        return BranchPredictions(branch_id, self.per_image)


@dataclass(frozen=True)
class GroundTruthSet:
    per_image: Mapping[str, tuple[GroundTruth, ...]]

    def __post_init__(self) -> None:
        object.__setattr__(self, "per_image", {k: tuple(v) for k, v in self.per_image.items()})

    @property
    def image_ids(self) -> list[str]:
        return list(self.per_image)

    def n_boxes(self) -> int:
        return sum(len(v) for v in self.per_image.values())

    def class_counts(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for gts in self.per_image.values():
            for g in gts:
                counts[g.class_code] = counts.get(g.class_code, 0) + 1
        return counts

    def subset(self, image_ids: Iterable[str]) -> "GroundTruthSet":
        return GroundTruthSet({i: self.per_image[i] for i in image_ids})


@dataclass
class IntegrityReport:
    missing_images: list[str] = field(default_factory=list)
    extra_images: list[str] = field(default_factory=list)
    schema_violations: list[tuple[str, str]] = field(default_factory=list)
    duplicate_image_ids: list[str] = field(default_factory=list)

    @property
    def is_clean(self) -> bool:
        return not (self.missing_images or self.extra_images or self.schema_violations or self.duplicate_image_ids)

    def to_dict(self) -> dict[str, Any]:
        return {
            "clean": self.is_clean,
            "missing_images": self.missing_images,
            "extra_images": self.extra_images,
            "schema_violations": [list(v) for v in self.schema_violations],
            "duplicate_image_ids": self.duplicate_image_ids,
        }


# ---------------------------------------------------------------------------
# parsing


def _is_number(v: Any) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def parse_box(raw: Any, box_format: str = "xywh") -> Box:
    if box_format not in BOX_FORMATS:
        raise ValueError(f"unknown box format {box_format!r}")
    if not isinstance(raw, list) or len(raw) != 4 or not all(_is_number(v) for v in raw):
        raise SchemaError(f"bbox must be a list of 4 numbers, got {raw!r}")
    vals = [float(v) for v in raw]
    if not all(math.isfinite(v) for v in vals):
        raise SchemaError(f"non-finite bbox coordinate in {raw!r}")
    if box_format == "xyxy":
        return Box.from_xyxy(*vals)
    return Box(*vals)


def parse_entry(raw: Any, vocab: ClassVocabulary, with_score: bool = True, box_format: str = "xywh"):
    """Parse one JSON entry into a Detection (or GroundTruth when ``with_score`` is False)."""
    if not isinstance(raw, dict):
        raise SchemaError(f"entry must be an object, got {type(raw).__name__}")
    if "category" not in raw or "bbox" not in raw:
        raise SchemaError("entry needs 'category' and 'bbox'")
    code = raw["category"]
    if not isinstance(code, str) or code not in vocab:
        raise SchemaError(f"unknown class code {code!r}")
    box = parse_box(raw["bbox"], box_format)
    if not with_score:
        return GroundTruth(code, box)
    if "score" not in raw:
        raise SchemaError("prediction entry needs 'score'")
    score = raw["score"]
    if not _is_number(score) or not math.isfinite(score):
        raise SchemaError(f"score must be a finite number, got {score!r}")
    return Detection(code, box, float(score))


class _Pairs(list):
    """A JSON object kept as its raw key/value pairs so duplicate keys survive."""


def _read_json_pairs(path: str | Path) -> list[tuple[str, Any]]:
    """Read a top-level JSON object as an ordered key/value list (duplicates kept)."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise ParseError(f"cannot read {path}: {exc}") from exc
    try:
        top = json.loads(text, object_pairs_hook=_Pairs)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: invalid JSON: {exc}") from exc
    if not isinstance(top, _Pairs):
        raise ParseError(f"{path}: top level must be a JSON object keyed by image id")
    return list(top)


def _as_obj(value: Any) -> Any:
    """Undo the pair-list hook below the top level."""
    if isinstance(value, _Pairs):
        return {k: _as_obj(v) for k, v in value}
    if isinstance(value, list):
        return [_as_obj(v) for v in value]
    return value


def _check_manifest(keys: Sequence[str], manifest: Sequence[str] | None, path: str | Path) -> None:
    if manifest is None:
        return
    missing = [i for i in manifest if i not in set(keys)]
    mset = set(manifest)
    extra = [k for k in keys if k not in mset]
    if missing or extra:
        raise ManifestMismatch(
            f"{path}: {len(missing)} manifest image(s) missing, {len(extra)} extra "
            f"(missing: {missing[:5]}, extra: {extra[:5]})",
            missing=missing,
            extra=extra,
        )


def _load(path, vocab, manifest, with_score, box_format):
    pairs = _read_json_pairs(path)
    seen: set[str] = set()
    per_image: dict[str, list] = {}
    for image_id, raw_list in pairs:
        if image_id in seen:
            raise SchemaError(f"{path}: duplicate image id {image_id!r}")
        seen.add(image_id)
        raw_list = _as_obj(raw_list)
        if not isinstance(raw_list, list):
            raise SchemaError(f"{path}: value for {image_id!r} must be a list")
        try:
            per_image[image_id] = [parse_entry(r, vocab, with_score, box_format) for r in raw_list]
        except SchemaError as exc:
            raise SchemaError(f"{path}: image {image_id!r}: {exc}") from None
    _check_manifest(list(per_image), manifest, path)
    if manifest is not None:
        per_image = {i: per_image[i] for i in manifest}
    return per_image


def load_predictions(
    path: str | Path,
    vocab: ClassVocabulary = DEFAULT_VOCAB,
    manifest: Sequence[str] | None = None,
    *,
    box_format: str = "xywh",
    branch_id: str | None = None,
) -> BranchPredictions:
    """Load a prediction file.

    With a manifest, the returned ``per_image`` follows manifest order and any
    difference in the key set raises :class:`ManifestMismatch`.
    """
    per_image = _load(path, vocab, manifest, True, box_format)
    return BranchPredictions(branch_id or Path(path).stem, per_image)


def load_ground_truth(
    path: str | Path,
    vocab: ClassVocabulary = DEFAULT_VOCAB,
    manifest: Sequence[str] | None = None,
    *,
    box_format: str = "xywh",
) -> GroundTruthSet:
    return GroundTruthSet(_load(path, vocab, manifest, False, box_format))


def load_manifest(path: str | Path) -> list[str]:
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except (OSError, UnicodeDecodeError) as exc:
        raise ParseError(f"cannot read manifest {path}: {exc}") from exc
    ids = [ln.strip() for ln in lines if ln.strip()]
    dupes = sorted({i for i in ids if ids.count(i) > 1}) if len(set(ids)) != len(ids) else []
    if dupes:
        raise SchemaError(f"manifest {path} repeats image ids: {dupes[:5]}")
    return ids


def save_manifest(ids: Iterable[str], path: str | Path) -> None:
    Path(path).write_text("".join(f"{i}\n" for i in ids), encoding="utf-8")


def predictions_to_json(preds: BranchPredictions) -> dict[str, list[dict]]:
    return {i: [d.to_json() for d in dets] for i, dets in preds.per_image.items()}


def save_predictions(preds: BranchPredictions, path: str | Path) -> None:
    _write_json(predictions_to_json(preds), path)


def save_ground_truth(gt: GroundTruthSet, path: str | Path) -> None:
    _write_json({i: [g.to_json() for g in gts] for i, gts in gt.per_image.items()}, path)


def _write_json(obj: Any, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, separators=(",", ":"))
        fh.write("\n")


def validate_detection(det: Detection, vocab: ClassVocabulary = DEFAULT_VOCAB) -> None:
    """Raise SchemaError unless ``det`` could be written to a valid prediction file."""
    if det.class_code not in vocab:
        raise SchemaError(f"unknown class code {det.class_code!r}")
    if not (0.0 <= det.score <= 1.0) or not math.isfinite(det.score):
        raise SchemaError(f"score {det.score!r} outside [0, 1]")
    b = det.box
    if not all(math.isfinite(v) for v in (b.x, b.y, b.w, b.h)) or b.w <= 0 or b.h <= 0 or b.x < 0 or b.y < 0:
        raise SchemaError(f"invalid box {b}")


# ---------------------------------------------------------------------------
# integrity


def check_integrity(
    path: str | Path,
    manifest: Sequence[str],
    vocab: ClassVocabulary = DEFAULT_VOCAB,
    *,
    with_score: bool = True,
    box_format: str = "xywh",
) -> IntegrityReport:
    """Enumerate key-level and schema-level problems of a raw file.

    Read-only and label-free. Only an unreadable / non-JSON file raises.
    """
    pairs = _read_json_pairs(path)
    report = IntegrityReport()
    counts: dict[str, int] = {}
    for image_id, raw_list in pairs:
        counts[image_id] = counts.get(image_id, 0) + 1
        raw_list = _as_obj(raw_list)
        if not isinstance(raw_list, list):
            report.schema_violations.append((image_id, "value must be a list of entries"))
            continue
        for k, raw in enumerate(raw_list):
            try:
                parse_entry(raw, vocab, with_score, box_format)
            except SchemaError as exc:
                report.schema_violations.append((image_id, f"entry {k}: {exc}"))
    report.duplicate_image_ids = [i for i, n in counts.items() if n > 1]
    mset = set(manifest)
    report.missing_images = [i for i in manifest if i not in counts]
    report.extra_images = [i for i in counts if i not in mset]
    return report


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def overlap_audit(
    train_ids: Sequence[str], val_ids: Sequence[str], content_hashes: Mapping[str, str]
) -> list[tuple[str, str]]:
    """Cross-split pairs whose image bytes hash identically, whatever their names."""
    by_hash: dict[str, list[str]] = {}
    for vid in val_ids:
        if vid in content_hashes:
            by_hash.setdefault(content_hashes[vid], []).append(vid)
    pairs = []
    for tid in train_ids:
        h = content_hashes.get(tid)
        for vid in by_hash.get(h, ()):
            pairs.append((tid, vid))
    return pairs
