"""Error-decomposed class-conditional fusion for multi-branch object detection outputs."""

from .dataset_io import (
    DEFAULT_VOCAB,
    Box,
    BranchPredictions,
    ClassVocabulary,
    Detection,
    GroundTruth,
    GroundTruthSet,
    load_ground_truth,
    load_manifest,
    load_predictions,
)
from .calibration import crc_check, rcv_sweep
from .decomposition import ErrorBucketCounts, audit_branches, bsr, decompose_errors, hcec
from .fusion import FusionWeights, nms, soft_nms, wbf
from .matching import EvalResult, evaluate
from .policy import FusionPolicy, PolicyConfig, apply_policy, derive_policy, run_edccf
from .stats import report, subset_trials, wilcoxon_one_sided

__version__ = "0.1.0"

__all__ = [
    "Box",
    "BranchPredictions",
    "ClassVocabulary",
    "DEFAULT_VOCAB",
    "Detection",
    "ErrorBucketCounts",
    "EvalResult",
    "FusionPolicy",
    "FusionWeights",
    "GroundTruth",
    "GroundTruthSet",
    "PolicyConfig",
    "apply_policy",
    "audit_branches",
    "bsr",
    "crc_check",
    "decompose_errors",
    "derive_policy",
    "evaluate",
    "hcec",
    "load_ground_truth",
    "load_manifest",
    "load_predictions",
    "nms",
    "rcv_sweep",
    "report",
    "run_edccf",
    "soft_nms",
    "subset_trials",
    "wbf",
    "wilcoxon_one_sided",
]
