"""Corrupt ground-truth poses with realistic keypoint errors.

Each labeled joint gets a status drawn from an :class:`ErrorDistributionTable`
row (conditioned on joint, number of labeled keypoints and overlap), then a
keypoint is rejection-sampled inside that status's KS band around the proper
anchor until the nearest-anchor constraint holds.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Mapping, NamedTuple, Optional, Sequence

import numpy as np
import yaml

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
    pose_bbox_iou,
)
from .taxonomy import Bands, TaxonomyThresholds, anchor_distances

log = logging.getLogger(__name__)

DEFAULT_BINS: tuple[tuple[int, int], ...] = ((1, 6), (6, 11), (11, 18))


class UnavailableErrorType(ValueError):
    """The requested status cannot be synthesized for this joint; resample the status."""


@dataclass(frozen=True)
class SynthesisConfig:
    thresholds: TaxonomyThresholds = TaxonomyThresholds()
    max_rejection_attempts: int = 100
    rng_seed: int = 0
    # Bins used when building a table in code; a loaded table carries its own.
    visible_count_bins: tuple[tuple[int, int], ...] = DEFAULT_BINS
    overlap_iou_threshold: float = 0.1

    def __post_init__(self):
        if self.max_rejection_attempts < 1:
            raise ValueError("max_rejection_attempts must be >= 1")
        if not 0.0 <= self.overlap_iou_threshold <= 1.0:
            raise ValueError("overlap_iou_threshold must lie in [0, 1]")
        _check_bins(self.visible_count_bins)


def _check_bins(bins):
    for lo, hi in bins:
        if not lo < hi:
            raise ValueError(f"empty visible-count bin [{lo}, {hi})")


def _probs(values: Mapping[str, float] | Sequence[float], where: str) -> np.ndarray:
    if isinstance(values, Mapping):
        unknown = set(values) - {t.value for t in ERROR_TYPES}
        if unknown:
            raise ValueError(f"{where}: unknown error types {sorted(unknown)}")
        p = np.array([float(values.get(t.value, 0.0)) for t in ERROR_TYPES])
    else:
        p = np.asarray(values, dtype=np.float64)
        if p.shape != (len(ERROR_TYPES),):
            raise ValueError(f"{where}: expected {len(ERROR_TYPES)} probabilities")
    if np.any(p < 0) or not np.all(np.isfinite(p)):
        raise ValueError(f"{where}: probabilities must be finite and non-negative")
    if abs(p.sum() - 1.0) > 1e-9:
        raise ValueError(f"{where}: probabilities sum to {p.sum():.12g}, not 1")
    return p


@dataclass(frozen=True)
class ErrorDistributionTable:
    """Categorical status distributions keyed by ``(joint, bin index, overlap)``."""

    bins: tuple[tuple[int, int], ...]
    rows: Mapping[tuple[int, int, bool], np.ndarray] = field(default_factory=dict)
    fallback: Optional[np.ndarray] = None

    def __post_init__(self):
        _check_bins(self.bins)
        rows = {}
        for key, p in self.rows.items():
            rows[(int(key[0]), int(key[1]), bool(key[2]))] = _probs(p, f"row {key}")
        object.__setattr__(self, "rows", rows)
        if self.fallback is not None:
            object.__setattr__(self, "fallback", _probs(self.fallback, "fallback"))

    def bin_index(self, visible_count: int) -> Optional[int]:
        for i, (lo, hi) in enumerate(self.bins):
            if lo <= visible_count < hi:
                return i
        return None

    def row(self, j: int, visible_count: int, overlap: bool) -> np.ndarray:
        b = self.bin_index(visible_count)
        p = self.rows.get((j, b, bool(overlap))) if b is not None else None
        if p is None:
            p = self.fallback
        if p is None:
            raise KeyError(f"no table row for joint {j}, {visible_count} visible, overlap={overlap} and no fallback")
        return p

    @classmethod
    def constant(cls, probs: Mapping[str, float], bins=DEFAULT_BINS) -> "ErrorDistributionTable":
        """Table whose every lookup returns ``probs``."""
        return cls(tuple(bins), {}, _probs(probs, "constant"))

    @classmethod
    def from_dict(cls, d: dict, spec: SkeletonSpec) -> "ErrorDistributionTable":
        if "fallback" not in d:
            raise ValueError("error table needs a `fallback` row")
        if "error_types" in d and list(d["error_types"]) != [t.value for t in ERROR_TYPES]:
            raise ValueError(f"error_types must be {[t.value for t in ERROR_TYPES]}")
        bins = tuple(tuple(int(v) for v in b) for b in d.get("visible_count_bins", DEFAULT_BINS))
        rows: dict[tuple[int, int, bool], np.ndarray] = {}
        for i, r in enumerate(d.get("rows") or []):
            where = f"rows[{i}]"
            joints = [spec.index(n) if isinstance(n, str) else int(n) for n in r["joints"]]
            b_sel = r.get("visible_count_bin")
            b_list = range(len(bins)) if b_sel is None else [int(b_sel)]
            ov = r.get("overlap")
            ov_list = (False, True) if ov is None else (bool(ov),)
            p = _probs(r["probs"], where)
            for j in joints:
                if not 0 <= j < spec.num_joints:
                    raise ValueError(f"{where}: joint {j} out of range")
                for b in b_list:
                    if not 0 <= b < len(bins):
                        raise ValueError(f"{where}: visible_count_bin {b} out of range")
                    for o in ov_list:
                        rows[(j, b, o)] = p
        return cls(bins, rows, _probs(d["fallback"], "fallback"))

    def to_dict(self, spec: SkeletonSpec) -> dict:
        def named(p):
            return {t.value: float(v) for t, v in zip(ERROR_TYPES, p)}

        return {
            "error_types": [t.value for t in ERROR_TYPES],
            "visible_count_bins": [list(b) for b in self.bins],
            "fallback": named(self.fallback) if self.fallback is not None else None,
            "rows": [
                {"joints": [spec.joint_names[j]], "visible_count_bin": b, "overlap": o, "probs": named(p)}
                for (j, b, o), p in sorted(self.rows.items())
            ],
        }


def load_table(path: str | Path, spec: SkeletonSpec) -> ErrorDistributionTable:
    with open(path) as f:
        return ErrorDistributionTable.from_dict(yaml.safe_load(f), spec)


def _packaged_table(name: str, spec: SkeletonSpec) -> ErrorDistributionTable:
    text = resources.files("posefix").joinpath(f"data/{name}").read_text()
    return ErrorDistributionTable.from_dict(yaml.safe_load(text), spec)


def default_table(spec: SkeletonSpec) -> ErrorDistributionTable:
    return _packaged_table("default_error_table.yaml", spec)


def jitter_heavy_table(spec: SkeletonSpec) -> ErrorDistributionTable:
    return _packaged_table("jitter_heavy_table.yaml", spec)


def _categorical(p: np.ndarray, rng: np.random.Generator) -> int:
    u = rng.random()
    c = np.cumsum(p)
    idx = int(np.searchsorted(c, u * c[-1], side="right"))
    # guard against u * total landing exactly on the last edge
    idx = min(idx, len(p) - 1)
    while p[idx] == 0:
        idx -= 1
    return idx


def sample_error_type(
    table: ErrorDistributionTable,
    j: int,
    visible_count: int,
    overlap: bool,
    rng: np.random.Generator,
    available: Optional[Sequence[ErrorType]] = None,
) -> ErrorType:
    """Draw a status from the table row for ``(j, visible_count, overlap)``.

    When ``available`` is given, mass on the other statuses is redistributed
    proportionally over the available ones. If none of them has mass the draw
    is ``good``.
    """
    p = table.row(j, visible_count, overlap)
    if available is not None:
        mask = np.array([t in available for t in ERROR_TYPES])
        p = np.where(mask, p, 0.0)
        if p.sum() <= 0:
            return ErrorType.GOOD
        p = p / p.sum()
    return ERROR_TYPES[_categorical(p, rng)]


class SynthesizedKeypoint(NamedTuple):
    keypoint: Keypoint
    attempts: int
    # True when rejection sampling gave up and the ground truth was emitted as good
    fell_back: bool = False
    error_type: ErrorType = ErrorType.GOOD


def available_error_types(anchors: Sequence[Anchor]) -> list[ErrorType]:
    out = [ErrorType.GOOD, ErrorType.JITTER]
    if any(a.is_target and a.role is JointRole.FLIPPED for a in anchors):
        out.append(ErrorType.INVERSION)
    if any(not a.is_target for a in anchors):
        out.append(ErrorType.SWAP)
    out.append(ErrorType.MISS)
    return out


def _accept(error_type: ErrorType, dists: list[float], src: int, anchors: Sequence[Anchor], bands: Bands) -> bool:
    """Band and nearest-anchor constraint for one candidate."""
    d = dists[src]
    if error_type is ErrorType.GOOD:
        return d < bands.good and all(d < o for i, o in enumerate(dists) if i != src)
    if error_type is ErrorType.MISS:
        return bands.jitter <= d < bands.miss and min(dists) >= bands.jitter
    if not bands.good <= d < bands.jitter:
        return False
    if error_type is ErrorType.SWAP:
        near_neighbor = min(o for o, a in zip(dists, anchors) if not a.is_target)
        near_target = min(o for o, a in zip(dists, anchors) if a.is_target)
        return near_neighbor < near_target
    # jitter and inversion: the source anchor must be strictly closest
    return all(d < o for i, o in enumerate(dists) if i != src)


def synthesize_keypoint(
    error_type: ErrorType,
    ctx: InstanceContext,
    spec: SkeletonSpec,
    j: int,
    config: SynthesisConfig,
    rng: np.random.Generator,
) -> SynthesizedKeypoint:
    """Rejection-sample one corrupted keypoint of status ``error_type`` for joint ``j``.

    Raises :class:`UnavailableErrorType` if the status has no anchor to work
    from (unlabeled ground truth, no labeled flip partner for inversion, no
    labeled neighbor anchor for swap). After ``max_rejection_attempts`` failed
    draws the ground-truth keypoint is returned tagged good with
    ``fell_back=True``.
    """
    error_type = ErrorType(error_type)
    gt = ctx.target.keypoints[j]
    if not gt.labeled:
        raise UnavailableErrorType(f"joint {j} is not labeled")
    anchors = anchor_set(ctx, spec, j)
    bands = Bands.for_joint(ctx.scale_s, spec.kappa[j], config.thresholds)

    if error_type in (ErrorType.GOOD, ErrorType.JITTER):
        sources = [0]
    elif error_type is ErrorType.INVERSION:
        sources = [i for i, a in enumerate(anchors) if a.is_target and a.role is JointRole.FLIPPED]
    elif error_type is ErrorType.SWAP:
        sources = [i for i, a in enumerate(anchors) if not a.is_target]
    else:
        sources = list(range(len(anchors)))
    if not sources:
        raise UnavailableErrorType(f"{error_type.value} has no anchor for joint {j}")

    if error_type is ErrorType.GOOD:
        lo, hi = 0.0, bands.good
    elif error_type is ErrorType.MISS:
        lo, hi = bands.jitter, bands.miss
    else:
        lo, hi = bands.good, bands.jitter

    for attempt in range(1, config.max_rejection_attempts + 1):
        src = sources[int(rng.integers(len(sources)))] if len(sources) > 1 else sources[0]
        theta = rng.uniform(0.0, 2.0 * math.pi)
        r = rng.uniform(lo, hi)
        ax, ay = anchors[src].xy
        x, y = ax + r * math.cos(theta), ay + r * math.sin(theta)
        dists = anchor_distances(x, y, anchors)
        if _accept(error_type, dists, src, anchors, bands):
            return SynthesizedKeypoint(Keypoint(x, y, gt.visibility), attempt, False, error_type)
    log.debug("joint %d: %s not placed after %d attempts, emitting ground truth", j, error_type.value, attempt)
    return SynthesizedKeypoint(gt, attempt, True, ErrorType.GOOD)


@dataclass(frozen=True)
class SynthesizedPose:
    pose: Pose
    error_types: tuple[Optional[ErrorType], ...]  # None for unlabeled joints
    attempts: tuple[int, ...]
    fallbacks: tuple[bool, ...]
    overlap: bool


def instance_overlaps(ctx: InstanceContext, threshold: float) -> bool:
    return any(pose_bbox_iou(ctx.target, n) >= threshold for n in ctx.neighbors)


def synthesize_pose(
    ctx: InstanceContext,
    spec: SkeletonSpec,
    table: ErrorDistributionTable,
    config: SynthesisConfig,
    rng: np.random.Generator,
) -> SynthesizedPose:
    """Corrupt every labeled joint of ``ctx.target``; unlabeled joints stay unlabeled."""
    target = ctx.target
    visible = target.num_labeled
    if visible == 0:
        raise ValueError("target pose has no labeled joints")
    overlap = instance_overlaps(ctx, config.overlap_iou_threshold)
    kps, types, attempts, fallbacks = [], [], [], []
    for j, gt in enumerate(target.keypoints):
        if not gt.labeled:
            kps.append(gt)
            types.append(None)
            attempts.append(0)
            fallbacks.append(False)
            continue
        available = available_error_types(anchor_set(ctx, spec, j))
        t = sample_error_type(table, j, visible, overlap, rng, available)
        out = synthesize_keypoint(t, ctx, spec, j, config, rng)
        kps.append(out.keypoint)
        types.append(out.error_type)
        attempts.append(out.attempts)
        fallbacks.append(out.fell_back)
    return SynthesizedPose(
        target.with_keypoints(kps), tuple(types), tuple(attempts), tuple(fallbacks), overlap
    )
