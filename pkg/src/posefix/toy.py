"""Procedurally rendered stick figures standing in for cropped person images."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .core import ErrorType, InstanceContext, Pose, SkeletonSpec, Visibility
from .rng import derive_rng
from .synthesis import ErrorDistributionTable, SynthesisConfig, synthesize_pose

# limbs of the COCO skeleton, drawn as line segments
LIMBS = (
    (0, 1), (0, 2), (1, 3), (2, 4),
    (5, 6), (5, 7), (7, 9), (6, 8), (8, 10),
    (5, 11), (6, 12), (11, 12),
    (11, 13), (13, 15), (12, 14), (14, 16),
)

# joint type per COCO joint; left and right share a type so a mirrored image
# is still a valid image
JOINT_TYPE = (0, 1, 1, 2, 2, 3, 3, 4, 4, 5, 5, 6, 6, 7, 7, 8, 8)
_LEVELS = (0.35, 0.7, 1.0)
TYPE_CODE = tuple((_LEVELS[t // 3], _LEVELS[t % 3]) for t in range(9))


@dataclass(frozen=True)
class ToySample:
    image: np.ndarray  # (3, h, w) float32
    gt_pose: Pose
    corrupted_pose: Pose
    scale: float
    neighbors: tuple[Pose, ...] = ()
    error_types: tuple[Optional[ErrorType], ...] = ()
    seed: tuple = ()

    @property
    def context(self) -> InstanceContext:
        _, h, w = self.image.shape
        return InstanceContext(self.gt_pose, self.neighbors, self.scale, (w, h))


def _unit(a: float) -> np.ndarray:
    # angle measured from straight down, positive toward image right
    return np.array([math.sin(a), math.cos(a)])


def articulate(rng: np.random.Generator, center: tuple[float, float], size: float) -> np.ndarray:
    """Random COCO-17 joint positions for a person facing the camera."""
    hx, hy = center
    tilt = rng.normal(0.0, 0.12)
    up = -_unit(tilt)  # from hips toward neck
    right = np.array([-up[1], up[0]])  # image-right, perpendicular to the torso
    if right[0] < 0:
        right = -right
    hip_c = np.array([hx, hy])
    neck = hip_c + 15.0 * size * up
    xy = np.zeros((17, 2))
    head_tilt = tilt + rng.normal(0.0, 0.15)
    hup = -_unit(head_tilt)
    hright = np.array([-hup[1], hup[0]]) * (1 if -hup[1] >= 0 else -1)
    nose = neck + 5.5 * size * hup
    turn = rng.uniform(-0.8, 0.8)  # head yaw shifts face points sideways
    xy[0] = nose + turn * size * hright
    # the person's left side is on the image right
    xy[1] = nose + 1.6 * size * hup + 1.7 * size * hright + 0.5 * turn * size * hright
    xy[2] = nose + 1.6 * size * hup - 1.7 * size * hright + 0.5 * turn * size * hright
    xy[3] = nose + 0.6 * size * hup + 3.4 * size * hright
    xy[4] = nose + 0.6 * size * hup - 3.4 * size * hright
    shoulder = 6.0 * size * rng.uniform(0.9, 1.1)
    hip = 4.0 * size * rng.uniform(0.9, 1.1)
    xy[5], xy[6] = neck + shoulder * right, neck - shoulder * right
    xy[11], xy[12] = hip_c + hip * right, hip_c - hip * right
    for side, (s, e, w) in ((1.0, (5, 7, 9)), (-1.0, (6, 8, 10))):
        a_upper = side * rng.uniform(-0.4, 2.6) + tilt
        a_fore = a_upper + side * rng.uniform(-0.3, 2.2) * rng.choice([-1.0, 1.0])
        xy[e] = xy[s] + 8.0 * size * _unit(a_upper)
        xy[w] = xy[e] + 7.0 * size * _unit(a_fore)
    for side, (h_, k, a) in ((1.0, (11, 13, 15)), (-1.0, (12, 14, 16))):
        a_thigh = side * rng.uniform(-0.25, 0.7) + 0.5 * tilt
        a_shin = a_thigh - side * rng.uniform(-0.2, 0.9)
        xy[k] = xy[h_] + 10.0 * size * _unit(a_thigh)
        xy[a] = xy[k] + 9.5 * size * _unit(a_shin)
    return xy


def _segment_dist(px: np.ndarray, py: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = b - a
    L2 = float(d @ d)
    t = np.zeros_like(px) if L2 == 0 else np.clip(((px - a[0]) * d[0] + (py - a[1]) * d[1]) / L2, 0.0, 1.0)
    return np.hypot(px - (a[0] + t * d[0]), py - (a[1] + t * d[1]))


def render(xy: np.ndarray, labeled: np.ndarray, canvas: np.ndarray, limb_width: float = 1.2, joint_radius: float = 1.1) -> None:
    """Draw one figure into ``canvas`` (3, h, w) in place, anti-aliased.

    Channel 0 holds limbs, channels 1-2 hold joint discs colored by joint type.
    """
    _, h, w = canvas.shape
    py, px = np.mgrid[0:h, 0:w].astype(np.float64)
    for a, b in LIMBS:
        if labeled[a] and labeled[b]:
            cov = np.clip(limb_width / 2 + 0.5 - _segment_dist(px, py, xy[a], xy[b]), 0.0, 1.0)
            np.maximum(canvas[0], cov, out=canvas[0])
    for j, (x, y) in enumerate(xy):
        if not labeled[j]:
            continue
        cov = np.clip(joint_radius + 0.5 - np.hypot(px - x, py - y), 0.0, 1.0)
        c1, c2 = TYPE_CODE[JOINT_TYPE[j]]
        for ch, level in ((1, c1), (2, c2)):
            np.maximum(canvas[ch], cov * level, out=canvas[ch])
        # the target's own discs occlude whatever was drawn behind them
        canvas[1:, cov > 0.5] = canvas[1:, cov > 0.5] * 0 + np.array([c1, c2])[:, None] * cov[cov > 0.5]


def _keypoint_scale(xy: np.ndarray, labeled: np.ndarray) -> float:
    pts = xy[labeled]
    span = pts.max(0) - pts.min(0)
    return float(math.sqrt(max(span[0], 1.0) * max(span[1], 1.0)))


def generate_toy_dataset(
    n: int,
    spec: SkeletonSpec,
    table: ErrorDistributionTable,
    seed: int,
    *,
    size: tuple[int, int] = (48, 64),
    second_person_prob: float = 0.3,
    unlabeled_prob: float = 0.03,
    noise: float = 0.03,
    synthesis: SynthesisConfig = SynthesisConfig(),
    start: int = 0,
) -> list[ToySample]:
    """``n`` rendered samples on ``size = (w, h)`` canvases, each with a synthesized corruption.

    Sample ``i`` depends only on ``(seed, start + i)``.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if spec.num_joints != 17:
        raise ValueError("toy figures are built for the 17-joint COCO skeleton")
    w, h = size
    samples = []
    for i in range(start, start + n):
        rng = derive_rng(seed, "toy-figure", i)
        fig = float(rng.uniform(0.85, 1.05)) * h / 64.0
        cx = w / 2.0 + rng.uniform(-3, 3)
        cy = h * 0.56 + rng.uniform(-2, 2)
        xy = articulate(rng, (cx, cy), fig)
        labeled = rng.random(17) >= unlabeled_prob
        if not labeled.any():
            labeled[0] = True
        canvas = np.zeros((3, h, w))
        neighbors: tuple[Pose, ...] = ()
        if rng.random() < second_person_prob:
            dx = rng.choice([-1.0, 1.0]) * rng.uniform(12, 22)
            nxy = articulate(rng, (cx + dx, cy + rng.uniform(-4, 4)), fig * rng.uniform(0.9, 1.05))
            nlab = (nxy[:, 0] >= 0) & (nxy[:, 0] <= w - 1) & (nxy[:, 1] >= 0) & (nxy[:, 1] <= h - 1)
            render(nxy, nlab, canvas)
            if nlab.any():
                neighbors = (Pose.from_arrays(nxy, np.where(nlab, Visibility.LABELED_VISIBLE, Visibility.NOT_LABELED)),)
        render(xy, labeled, canvas)
        if noise > 0:
            canvas += rng.normal(0.0, noise, canvas.shape)
        gt = Pose.from_arrays(xy, np.where(labeled, Visibility.LABELED_VISIBLE, Visibility.NOT_LABELED))
        scale = _keypoint_scale(xy, labeled)
        ctx = InstanceContext(gt, neighbors, scale, (w, h))
        syn = synthesize_pose(ctx, spec, table, synthesis, derive_rng(seed, "toy-corrupt", i))
        samples.append(
            ToySample(canvas.astype(np.float32), gt, syn.pose, scale, neighbors, syn.error_types, (seed, i))
        )
    return samples


@dataclass
class ToyArrays:
    """Column-stacked view of a toy dataset used by the trainer."""

    images: np.ndarray  # (N, 3, h, w)
    gt_xy: np.ndarray  # (N, K, 2)
    gt_labeled: np.ndarray  # (N, K)
    in_xy: np.ndarray
    in_labeled: np.ndarray
    scale: np.ndarray  # (N,)

    def __len__(self) -> int:
        return len(self.images)

    @classmethod
    def stack(cls, samples: Sequence[ToySample]) -> "ToyArrays":
        if not samples:
            raise ValueError("empty dataset")
        return cls(
            np.stack([s.image for s in samples]),
            np.stack([s.gt_pose.xy for s in samples]),
            np.stack([s.gt_pose.labeled for s in samples]),
            np.stack([s.corrupted_pose.xy for s in samples]),
            np.stack([s.corrupted_pose.labeled for s in samples]),
            np.array([s.scale for s in samples], dtype=np.float64),
        )

    def subset(self, idx) -> "ToyArrays":
        return ToyArrays(self.images[idx], self.gt_xy[idx], self.gt_labeled[idx], self.in_xy[idx], self.in_labeled[idx], self.scale[idx])
