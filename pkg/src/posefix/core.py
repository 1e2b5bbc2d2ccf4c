"""Domain types shared by every module: skeletons, keypoints, poses, instances."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from functools import cached_property
from importlib import resources
from pathlib import Path
from typing import NamedTuple, Optional, Sequence

import numpy as np
import yaml


class Visibility(enum.IntEnum):
    """COCO visibility flag ``v`` of a keypoint triplet."""

    NOT_LABELED = 0
    LABELED_OCCLUDED = 1
    LABELED_VISIBLE = 2


class ErrorType(str, enum.Enum):
    GOOD = "good"
    JITTER = "jitter"
    INVERSION = "inversion"
    SWAP = "swap"
    MISS = "miss"


ERROR_TYPES: tuple[ErrorType, ...] = tuple(ErrorType)


@dataclass(frozen=True)
class SkeletonSpec:
    joint_names: tuple[str, ...]
    flip_pairs: tuple[tuple[int, int], ...]
    kappa: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "joint_names", tuple(self.joint_names))
        object.__setattr__(self, "flip_pairs", tuple((int(a), int(b)) for a, b in self.flip_pairs))
        object.__setattr__(self, "kappa", tuple(float(k) for k in self.kappa))
        k = len(self.joint_names)
        if k == 0:
            raise ValueError("skeleton needs at least one joint")
        if len(self.kappa) != k:
            raise ValueError(f"kappa has {len(self.kappa)} entries for {k} joints")
        if not all(math.isfinite(v) and v > 0 for v in self.kappa):
            raise ValueError("kappa entries must be finite and positive")
        seen: set[int] = set()
        for a, b in self.flip_pairs:
            if a == b:
                raise ValueError(f"flip pair ({a}, {b}) maps a joint to itself")
            for idx in (a, b):
                if not 0 <= idx < k:
                    raise ValueError(f"flip pair index {idx} out of range for {k} joints")
                if idx in seen:
                    raise ValueError(f"joint {idx} appears in more than one flip pair")
                seen.add(idx)

    @property
    def num_joints(self) -> int:
        return len(self.joint_names)

    @cached_property
    def flip_index(self) -> np.ndarray:
        """Permutation mapping each joint to its mirror partner (itself if none)."""
        perm = np.arange(self.num_joints)
        for a, b in self.flip_pairs:
            perm[a], perm[b] = b, a
        return perm

    @cached_property
    def kappa_array(self) -> np.ndarray:
        return np.asarray(self.kappa, dtype=np.float64)

    def partner(self, j: int) -> Optional[int]:
        p = int(self.flip_index[j])
        return None if p == j else p

    def index(self, name: str) -> int:
        try:
            return self.joint_names.index(name)
        except ValueError:
            raise KeyError(f"unknown joint name {name!r}") from None

    def to_dict(self) -> dict:
        return {
            "joint_names": list(self.joint_names),
            "flip_pairs": [list(p) for p in self.flip_pairs],
            "kappa": list(self.kappa),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SkeletonSpec":
        missing = {"joint_names", "flip_pairs", "kappa"} - set(d)
        if missing:
            raise ValueError(f"skeleton config missing keys: {sorted(missing)}")
        return cls(d["joint_names"], d["flip_pairs"], d["kappa"])


def load_skeleton(path: str | Path) -> SkeletonSpec:
    with open(path) as f:
        return SkeletonSpec.from_dict(yaml.safe_load(f))


def coco_skeleton() -> SkeletonSpec:
    text = resources.files("posefix").joinpath("data/coco_skeleton.yaml").read_text()
    return SkeletonSpec.from_dict(yaml.safe_load(text))


@dataclass(frozen=True)
class Keypoint:
    x: float
    y: float
    visibility: Visibility = Visibility.LABELED_VISIBLE

    def __post_init__(self):
        object.__setattr__(self, "visibility", Visibility(self.visibility))
        if self.labeled and not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise ValueError(f"labeled keypoint has non-finite coordinates ({self.x}, {self.y})")

    @property
    def labeled(self) -> bool:
        # occluded and visible are treated identically everywhere
        return self.visibility != Visibility.NOT_LABELED

    @classmethod
    def unlabeled(cls) -> "Keypoint":
        return cls(0.0, 0.0, Visibility.NOT_LABELED)


@dataclass(frozen=True)
class Pose:
    keypoints: tuple[Keypoint, ...]
    score: Optional[float] = None

    def __post_init__(self):
        object.__setattr__(self, "keypoints", tuple(self.keypoints))

    def __len__(self) -> int:
        return len(self.keypoints)

    @cached_property
    def xy(self) -> np.ndarray:
        """(K, 2) float64 coordinates; unlabeled rows hold whatever was stored."""
        return np.array([(kp.x, kp.y) for kp in self.keypoints], dtype=np.float64).reshape(-1, 2)

    @cached_property
    def labeled(self) -> np.ndarray:
        return np.array([kp.labeled for kp in self.keypoints], dtype=bool)

    @property
    def num_labeled(self) -> int:
        return int(self.labeled.sum())

    @classmethod
    def from_arrays(cls, xy, visibility, score: Optional[float] = None) -> "Pose":
        xy = np.asarray(xy, dtype=np.float64)
        vis = np.broadcast_to(np.asarray(visibility), (len(xy),))
        return cls(tuple(Keypoint(float(x), float(y), Visibility(int(v))) for (x, y), v in zip(xy, vis)), score)

    @classmethod
    def from_coco(cls, flat: Sequence[float], score: Optional[float] = None) -> "Pose":
        arr = np.asarray(flat, dtype=np.float64).reshape(-1, 3)
        return cls.from_arrays(arr[:, :2], arr[:, 2].astype(int), score)

    def to_coco(self) -> list[float]:
        out: list[float] = []
        for kp in self.keypoints:
            if kp.labeled:
                out += [float(kp.x), float(kp.y), int(kp.visibility)]
            else:
                out += [0, 0, 0]
        return out

    def with_keypoints(self, keypoints: Sequence[Keypoint]) -> "Pose":
        return Pose(tuple(keypoints), self.score)

    def translated(self, dx: float, dy: float) -> "Pose":
        return self.with_keypoints(
            [Keypoint(kp.x + dx, kp.y + dy, kp.visibility) if kp.labeled else kp for kp in self.keypoints]
        )


@dataclass(frozen=True)
class InstanceContext:
    """Target person ``p`` with its scale and the other people ``p'`` in the image."""

    target: Pose
    neighbors: tuple[Pose, ...] = ()
    scale_s: float = 1.0
    image_size: tuple[int, int] = (0, 0)

    def __post_init__(self):
        object.__setattr__(self, "neighbors", tuple(self.neighbors))
        if not (math.isfinite(self.scale_s) and self.scale_s > 0):
            raise ValueError(f"scale_s must be positive, got {self.scale_s}")
        k = len(self.target)
        for n in self.neighbors:
            if len(n) != k:
                raise ValueError(f"neighbor pose has {len(n)} joints, target has {k}")


class JointRole(str, enum.Enum):
    SAME = "j"
    FLIPPED = "j'"


class Anchor(NamedTuple):
    """One reference keypoint for joint j. ``person`` 0 is the target, i+1 is neighbor i."""

    person: int
    role: JointRole
    joint: int
    xy: tuple[float, float]

    @property
    def is_target(self) -> bool:
        return self.person == 0

    @property
    def tag(self) -> tuple[int, JointRole]:
        return (self.person, self.role)


def anchor_set(ctx: InstanceContext, spec: SkeletonSpec, j: int) -> list[Anchor]:
    """Labeled anchors for joint ``j`` in tie-break order.

    Order is target j, target j', then each neighbor's j and j' in input order.
    """
    if not 0 <= j < spec.num_joints:
        raise IndexError(f"joint {j} out of range for {spec.num_joints} joints")
    jp = spec.partner(j)
    anchors: list[Anchor] = []
    for person, pose in enumerate((ctx.target, *ctx.neighbors)):
        for role, joint in ((JointRole.SAME, j), (JointRole.FLIPPED, jp)):
            if joint is None:
                continue
            kp = pose.keypoints[joint]
            if kp.labeled:
                anchors.append(Anchor(person, role, joint, (kp.x, kp.y)))
    return anchors


def pose_bbox_iou(a: Pose, b: Pose) -> float:
    """IoU of the tight boxes around the labeled keypoints of two poses."""
    if a.num_labeled == 0 or b.num_labeled == 0:
        return 0.0
    pa, pb = a.xy[a.labeled], b.xy[b.labeled]
    lo = np.maximum(pa.min(0), pb.min(0))
    hi = np.minimum(pa.max(0), pb.max(0))
    inter = float(np.prod(np.clip(hi - lo, 0, None)))
    area_a = float(np.prod(pa.max(0) - pa.min(0)))
    area_b = float(np.prod(pb.max(0) - pb.min(0)))
    union = area_a + area_b - inter
    return inter / union if union > 0 else 0.0


__all__ = [
    "Anchor",
    "ERROR_TYPES",
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
    "pose_bbox_iou",
]
