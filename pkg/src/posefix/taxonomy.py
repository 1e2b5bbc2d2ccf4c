"""Five-way keypoint status taxonomy: good, jitter, inversion, swap, miss.

The classifier mirrors the synthesis bands exactly, so a keypoint produced by
:mod:`posefix.synthesis` with type T is classified as T.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Hashable, Iterable, Mapping, Sequence

import numpy as np

from .core import (
    ERROR_TYPES,
    Anchor,
    ErrorType,
    InstanceContext,
    JointRole,
    Keypoint,
    Pose,
    SkeletonSpec,
    anchor_set,
)
from .similarity import ks_radius


@dataclass(frozen=True)
class TaxonomyThresholds:
    k_good: float = 0.85
    k_jitter: float = 0.5
    k_miss: float = 0.1
    # Measure inversion distance with the partner joint's kappa instead of j's.
    inversion_uses_partner_kappa: bool = False

    def __post_init__(self):
        if not 1 > self.k_good > self.k_jitter > self.k_miss > 0:
            raise ValueError(
                f"thresholds must satisfy 1 > k_good > k_jitter > k_miss > 0, got "
                f"{self.k_good}, {self.k_jitter}, {self.k_miss}"
            )


@dataclass(frozen=True)
class Bands:
    """KS radii for one joint at one scale."""

    good: float  # d^{k_good}
    jitter: float  # d^{k_jitter}
    miss: float  # d^{k_miss}

    @classmethod
    def for_joint(cls, s: float, kappa: float, t: TaxonomyThresholds) -> "Bands":
        return cls(ks_radius(t.k_good, s, kappa), ks_radius(t.k_jitter, s, kappa), ks_radius(t.k_miss, s, kappa))


def anchor_distances(x: float, y: float, anchors: Sequence[Anchor]) -> list[float]:
    # single distance routine shared with synthesis so acceptance checks and
    # classification agree bit for bit
    return [math.hypot(x - a.xy[0], y - a.xy[1]) for a in anchors]


def nearest_anchor(dists: Sequence[float]) -> int:
    """Index of the closest anchor; ties go to the earliest (target j, target j', neighbors)."""
    best = 0
    for i in range(1, len(dists)):
        if dists[i] < dists[best]:
            best = i
    return best


def classify_point(
    x: float,
    y: float,
    anchors: Sequence[Anchor],
    bands: Bands,
    inversion_radius: float | None = None,
) -> ErrorType:
    if not anchors or not anchors[0].is_target or anchors[0].role is not JointRole.SAME:
        raise ValueError("first anchor must be the labeled target joint")
    dists = anchor_distances(x, y, anchors)
    best = nearest_anchor(dists)
    a, d = anchors[best], dists[best]
    if a.is_target and a.role is JointRole.SAME:
        if d < bands.good:
            return ErrorType.GOOD
        if d < bands.jitter:
            return ErrorType.JITTER
    elif a.is_target:
        if d < (bands.jitter if inversion_radius is None else inversion_radius):
            return ErrorType.INVERSION
    elif d < bands.jitter:
        return ErrorType.SWAP
    return ErrorType.MISS


def classify_keypoint(
    est: Keypoint,
    ctx: InstanceContext,
    spec: SkeletonSpec,
    j: int,
    thresholds: TaxonomyThresholds = TaxonomyThresholds(),
) -> ErrorType:
    """Status of an estimated keypoint for joint ``j`` of the target person.

    Raises ``ValueError`` when the target's joint ``j`` is unlabeled. An
    estimate that carries no coordinate at all counts as a miss.
    """
    if not ctx.target.keypoints[j].labeled:
        raise ValueError(f"joint {j} is not labeled in the ground truth")
    if not est.labeled:
        return ErrorType.MISS
    if not (math.isfinite(est.x) and math.isfinite(est.y)):
        raise ValueError("estimated keypoint is not finite")
    anchors = anchor_set(ctx, spec, j)
    bands = Bands.for_joint(ctx.scale_s, spec.kappa[j], thresholds)
    inv_radius = None
    partner = spec.partner(j)
    if thresholds.inversion_uses_partner_kappa and partner is not None:
        inv_radius = ks_radius(thresholds.k_jitter, ctx.scale_s, spec.kappa[partner])
    return classify_point(est.x, est.y, anchors, bands, inv_radius)


@dataclass
class ErrorFrequencyReport:
    joint_names: tuple[str, ...]
    counts: np.ndarray = field(default=None)  # (K, 5) int64, columns in ERROR_TYPES order
    skipped: int = 0

    def __post_init__(self):
        if self.counts is None:
            self.counts = np.zeros((len(self.joint_names), len(ERROR_TYPES)), dtype=np.int64)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def overall(self) -> dict[ErrorType, int]:
        return {t: int(c) for t, c in zip(ERROR_TYPES, self.counts.sum(0))}

    def per_joint(self, j: int) -> dict[ErrorType, int]:
        return {t: int(c) for t, c in zip(ERROR_TYPES, self.counts[j])}

    def add(self, j: int, t: ErrorType) -> None:
        self.counts[j, ERROR_TYPES.index(t)] += 1

    def merge(self, other: "ErrorFrequencyReport") -> "ErrorFrequencyReport":
        if other.joint_names != self.joint_names:
            raise ValueError("cannot merge reports over different skeletons")
        return ErrorFrequencyReport(self.joint_names, self.counts + other.counts, self.skipped + other.skipped)

    def to_dict(self) -> dict:
        types = [t.value for t in ERROR_TYPES]
        total = self.total
        return {
            "error_types": types,
            "joints": [
                {
                    "index": j,
                    "joint": name,
                    "counts": dict(zip(types, map(int, self.counts[j]))),
                    "total": int(self.counts[j].sum()),
                }
                for j, name in enumerate(self.joint_names)
            ],
            "overall": dict(zip(types, map(int, self.counts.sum(0)))),
            "frequency": {t: (int(c) / total if total else 0.0) for t, c in zip(types, self.counts.sum(0))},
            "total": total,
            "skipped": self.skipped,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=False) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["joint", *[t.value for t in ERROR_TYPES], "total"])
        for j, name in enumerate(self.joint_names):
            w.writerow([name, *map(int, self.counts[j]), int(self.counts[j].sum())])
        w.writerow(["all", *map(int, self.counts.sum(0)), self.total])
        return buf.getvalue()

    @classmethod
    def from_dict(cls, d: dict) -> "ErrorFrequencyReport":
        types = d["error_types"]
        names = tuple(row["joint"] for row in d["joints"])
        counts = np.array([[row["counts"][t] for t in types] for row in d["joints"]], dtype=np.int64)
        order = [types.index(t.value) for t in ERROR_TYPES]
        return cls(names, counts[:, order].reshape(len(names), len(ERROR_TYPES)), int(d.get("skipped", 0)))


def diagnose(
    estimates: Iterable[tuple[Pose, Hashable]],
    truths: Mapping[Hashable, InstanceContext],
    spec: SkeletonSpec,
    thresholds: TaxonomyThresholds = TaxonomyThresholds(),
) -> ErrorFrequencyReport:
    """Histogram of statuses over pre-matched ``(pose, instance_id)`` estimates.

    Estimates whose id has no ground truth are counted in ``skipped``; joints
    unlabeled in the ground truth are not counted.
    """
    report = ErrorFrequencyReport(spec.joint_names)
    for pose, inst_id in estimates:
        ctx = truths.get(inst_id)
        if ctx is None:
            report.skipped += 1
            continue
        if len(pose) != spec.num_joints:
            raise ValueError(f"estimate for {inst_id!r} has {len(pose)} joints, expected {spec.num_joints}")
        for j in range(spec.num_joints):
            if ctx.target.keypoints[j].labeled:
                report.add(j, classify_keypoint(pose.keypoints[j], ctx, spec, j, thresholds))
    return report
