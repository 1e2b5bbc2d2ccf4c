"""Keypoint error taxonomy, error synthesis, heatmap codecs, COCO evaluation and a toy pose refiner."""

__version__ = "0.1.0"

from .core import (  # noqa: E402
    ERROR_TYPES,
    Anchor,
    ErrorType,
    InstanceContext,
    JointRole,
    Keypoint,
    Pose,
    SkeletonSpec,
    Visibility,
    anchor_set,
    coco_skeleton,
    load_skeleton,
)
from .similarity import ks, ks_radius, oks  # noqa: E402
from .taxonomy import ErrorFrequencyReport, TaxonomyThresholds, classify_keypoint, diagnose  # noqa: E402
from .synthesis import ErrorDistributionTable, SynthesisConfig, synthesize_keypoint, synthesize_pose  # noqa: E402

__all__ = [
    "ERROR_TYPES",
    "Anchor",
    "ErrorType",
    "InstanceContext",
    "JointRole",
    "Keypoint",
    "Pose",
    "SkeletonSpec",
    "Visibility",
    "anchor_set",
    "coco_skeleton",
    "load_skeleton",
    "ks",
    "ks_radius",
    "oks",
    "ErrorFrequencyReport",
    "TaxonomyThresholds",
    "classify_keypoint",
    "diagnose",
    "ErrorDistributionTable",
    "SynthesisConfig",
    "synthesize_keypoint",
    "synthesize_pose",
]
