"""Top-down data plumbing: boxes, crop transforms, flips and COCO keypoint files.

Pixel convention: integer coordinates are pixel centers, so a crop of width W
spans ``[-0.5, W - 0.5]`` and a horizontal mirror is ``x' = W - 1 - x``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np

from .core import InstanceContext, Keypoint, Pose, SkeletonSpec, Visibility


class CocoFormatError(ValueError):
    """A COCO file violates the expected schema; the message names the JSON path."""


@dataclass(frozen=True)
class BBox:
    x: float
    y: float
    width: float
    height: float

    def __post_init__(self):
        if not (self.width > 0 and self.height > 0):
            raise ValueError(f"bbox must have positive size, got {self.width}x{self.height}")

    @property
    def center(self) -> tuple[float, float]:
        return (self.x + self.width / 2.0, self.y + self.height / 2.0)

    @property
    def area(self) -> float:
        return self.width * self.height


def bbox_from_pose(pose: Pose, margin_fraction: float = 0.25) -> BBox:
    """Tight box over labeled keypoints, grown by ``margin_fraction`` of its size on each side."""
    if pose.num_labeled == 0:
        raise ValueError("pose has no labeled keypoints")
    pts = pose.xy[pose.labeled]
    lo, hi = pts.min(0), pts.max(0)
    w, h = hi - lo
    if w <= 0 or h <= 0:
        raise ValueError("labeled keypoints span a zero-area box")
    return BBox(lo[0] - margin_fraction * w, lo[1] - margin_fraction * h, w * (1 + 2 * margin_fraction), h * (1 + 2 * margin_fraction))


def extend_aspect(b: BBox, target_h_over_w: float = 4.0 / 3.0) -> BBox:
    """Grow one side about the center so that height / width equals the target."""
    cx, cy = b.center
    w, h = b.width, b.height
    if h > w * target_h_over_w:
        w = h / target_h_over_w
    elif h < w * target_h_over_w:
        h = w * target_h_over_w
    return BBox(cx - w / 2.0, cy - h / 2.0, w, h)


@dataclass(frozen=True)
class AffineTransform:
    """2x3 matrix mapping source coordinates to crop coordinates."""

    matrix: np.ndarray
    out_size: Optional[tuple[int, int]] = None  # (w, h) of the crop

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.shape != (2, 3):
            raise ValueError(f"affine matrix must be 2x3, got {m.shape}")
        if abs(np.linalg.det(m[:, :2])) < 1e-12:
            raise ValueError("affine transform is not invertible")
        object.__setattr__(self, "matrix", m)

    def apply(self, pts) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64)
        return pts @ self.matrix[:, :2].T + self.matrix[:, 2]

    def inverse(self) -> "AffineTransform":
        a_inv = np.linalg.inv(self.matrix[:, :2])
        return AffineTransform(np.hstack([a_inv, -(a_inv @ self.matrix[:, 2])[:, None]]))

    def compose(self, first: "AffineTransform") -> "AffineTransform":
        """``self`` after ``first``."""
        a = self.matrix[:, :2] @ first.matrix[:, :2]
        t = self.matrix[:, :2] @ first.matrix[:, 2] + self.matrix[:, 2]
        return AffineTransform(np.hstack([a, t[:, None]]), self.out_size)

    @classmethod
    def identity(cls, out_size=None) -> "AffineTransform":
        return cls(np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]), out_size)

    @classmethod
    def mirror(cls, width: int, height: Optional[int] = None) -> "AffineTransform":
        return cls(np.array([[-1.0, 0.0, width - 1.0], [0.0, 1.0, 0.0]]), (width, height) if height else None)

    def inside(self, pts) -> np.ndarray:
        """Which crop-space points fall within the crop."""
        if self.out_size is None:
            raise ValueError("transform has no crop size")
        w, h = self.out_size
        p = np.asarray(pts, dtype=np.float64)
        return (p[..., 0] >= -0.5) & (p[..., 0] <= w - 0.5) & (p[..., 1] >= -0.5) & (p[..., 1] <= h - 0.5)


def crop_transform(
    b: BBox,
    out_w: int,
    out_h: int,
    scale_aug: float = 1.0,
    rot_aug_deg: float = 0.0,
    flip: bool = False,
) -> AffineTransform:
    """Map the (aspect-corrected) box onto an ``out_w x out_h`` crop.

    ``scale_aug > 1`` zooms out, ``rot_aug_deg`` rotates about the box center
    and ``flip`` mirrors the result horizontally.
    """
    if not (b.width > 0 and b.height > 0) or not scale_aug > 0:
        raise ValueError("degenerate crop box or scale")
    cx, cy = b.center
    k = out_w / (b.width * scale_aug)
    t = math.radians(rot_aug_deg)
    c, s = math.cos(t), math.sin(t)
    a = k * np.array([[c, s], [-s, c]])
    ox, oy = (out_w - 1) / 2.0, (out_h - 1) / 2.0
    m = np.hstack([a, (np.array([ox, oy]) - a @ np.array([cx, cy]))[:, None]])
    if flip:
        m = np.array([[-1.0, 0.0, out_w - 1.0], [0.0, 1.0, 0.0]]) @ np.vstack([m, [0.0, 0.0, 1.0]])
    return AffineTransform(m, (out_w, out_h))


@dataclass(frozen=True)
class AugmentParams:
    scale: float = 1.0
    rotation: float = 0.0
    flip: bool = False


@dataclass(frozen=True)
class AugmentConfig:
    scale_range: float = 0.3
    rotation_range: float = 40.0
    scale_prob: float = 1.0
    rotation_prob: float = 0.6
    flip_prob: float = 0.5

    def sample(self, rng: np.random.Generator) -> AugmentParams:
        scale = 1.0 + rng.uniform(-self.scale_range, self.scale_range) if rng.random() < self.scale_prob else 1.0
        rot = rng.uniform(-self.rotation_range, self.rotation_range) if rng.random() < self.rotation_prob else 0.0
        return AugmentParams(scale, rot, bool(rng.random() < self.flip_prob))


def apply_to_pose(t: AffineTransform, pose: Pose, spec: SkeletonSpec, flipped: bool) -> Pose:
    """Transform labeled keypoints; with ``flipped`` also swap left/right slots.

    Points that land outside the crop keep their coordinates; use
    :func:`inside_crop` to flag them.
    """
    xy = t.apply(pose.xy)
    kps = [Keypoint(float(x), float(y), kp.visibility) if kp.labeled else kp for (x, y), kp in zip(xy, pose.keypoints)]
    if flipped:
        kps = [kps[i] for i in spec.flip_index]
    return pose.with_keypoints(kps)


def inside_crop(t: AffineTransform, pose: Pose) -> np.ndarray:
    """Per-joint flag: labeled and within the crop bounds (``pose`` already in crop space)."""
    return pose.labeled & t.inside(pose.xy)


def flip_merge(heatmaps: np.ndarray, flipped_heatmaps: np.ndarray, spec: SkeletonSpec) -> np.ndarray:
    """Average logits with the un-mirrored logits of the flipped input."""
    a = np.asarray(heatmaps)
    b = np.asarray(flipped_heatmaps)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.shape[-3] != spec.num_joints:
        raise ValueError(f"expected {spec.num_joints} joint channels, got {a.shape[-3]}")
    unflipped = b[..., spec.flip_index, :, ::-1]
    return 0.5 * (a + unflipped)


def mirror_heatmaps(maps: np.ndarray, spec: SkeletonSpec) -> np.ndarray:
    return np.asarray(maps)[..., spec.flip_index, :, ::-1]


def warp_image(image: np.ndarray, t: AffineTransform, out_w: int, out_h: int) -> np.ndarray:
    """Bilinear resample of a ``(C, H, W)`` image into crop space; outside pixels are 0."""
    img = np.asarray(image)
    _, h, w = img.shape
    ys, xs = np.mgrid[0:out_h, 0:out_w]
    src = t.inverse().apply(np.stack([xs.ravel(), ys.ravel()], axis=1).astype(np.float64))
    sx, sy = src[:, 0], src[:, 1]
    x0, y0 = np.floor(sx).astype(int), np.floor(sy).astype(int)
    fx, fy = sx - x0, sy - y0
    out = np.zeros((img.shape[0], out_h * out_w), dtype=img.dtype)
    for dx, dy, wgt in ((0, 0, (1 - fx) * (1 - fy)), (1, 0, fx * (1 - fy)), (0, 1, (1 - fx) * fy), (1, 1, fx * fy)):
        xi, yi = x0 + dx, y0 + dy
        ok = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
        out[:, ok] += (img[:, yi[ok], xi[ok]] * wgt[ok]).astype(img.dtype)
    return out.reshape(img.shape[0], out_h, out_w)


# --------------------------------------------------------------------------
# COCO files


@dataclass(frozen=True)
class GroundTruthInstance:
    ann_id: int
    image_id: int
    context: InstanceContext
    area: float
    bbox: Optional[tuple[float, float, float, float]] = None
    iscrowd: bool = False
    category_id: int = 1

    @property
    def pose(self) -> Pose:
        return self.context.target

    @property
    def degenerate(self) -> bool:
        return self.context.target.num_labeled == 0

    @property
    def usable(self) -> bool:
        """Not crowd and at least one labeled keypoint."""
        return not self.iscrowd and not self.degenerate


@dataclass
class CocoGroundTruth:
    instances: list[GroundTruthInstance]
    images: list[dict] = field(default_factory=list)
    categories: list[dict] = field(default_factory=list)

    def by_id(self) -> dict[int, GroundTruthInstance]:
        return {g.ann_id: g for g in self.instances}

    def by_image(self) -> dict[int, list[GroundTruthInstance]]:
        out: dict[int, list[GroundTruthInstance]] = {}
        for g in self.instances:
            out.setdefault(g.image_id, []).append(g)
        return out


@dataclass(frozen=True)
class Detection:
    image_id: int
    pose: Pose
    category_id: int = 1
    index: int = 0  # position in the results file

    @property
    def score(self) -> float:
        return float(self.pose.score if self.pose.score is not None else 0.0)


def _req(obj: Any, key: str, path: str, kind=None):
    if not isinstance(obj, dict) or key not in obj:
        raise CocoFormatError(f"{path}: missing key '{key}'")
    v = obj[key]
    if kind is not None and not isinstance(v, kind):
        raise CocoFormatError(f"{path}.{key}: expected {getattr(kind, '__name__', kind)}, got {type(v).__name__}")
    return v


def _keypoints(raw, k: int, path: str, who: str) -> np.ndarray:
    if not isinstance(raw, list):
        raise CocoFormatError(f"{path}.keypoints: expected a list ({who})")
    if len(raw) != 3 * k:
        raise CocoFormatError(f"{path}.keypoints: expected {3 * k} values, got {len(raw)} ({who})")
    try:
        arr = np.asarray(raw, dtype=np.float64).reshape(k, 3)
    except (TypeError, ValueError) as e:
        raise CocoFormatError(f"{path}.keypoints: non-numeric value ({who})") from e
    return arr


def parse_coco_ground_truth(data: dict, spec: SkeletonSpec) -> CocoGroundTruth:
    images = _req(data, "images", "$", list)
    anns = _req(data, "annotations", "$", list)
    sizes = {}
    for i, im in enumerate(images):
        sizes[_req(im, "id", f"$.images[{i}]")] = (int(im.get("width", 0)), int(im.get("height", 0)))
    raw = []
    for i, a in enumerate(anns):
        path = f"$.annotations[{i}]"
        ann_id = _req(a, "id", path)
        who = f"annotation id {ann_id}"
        image_id = _req(a, "image_id", path)
        arr = _keypoints(_req(a, "keypoints", path), spec.num_joints, path, who)
        v = arr[:, 2].astype(int)
        if np.any((v < 0) | (v > 2)) or np.any(v != arr[:, 2]):
            raise CocoFormatError(f"{path}.keypoints: visibility flags must be 0, 1 or 2 ({who})")
        pose = Pose.from_arrays(arr[:, :2], v)
        area = float(a.get("area", 0.0) or 0.0)
        bbox = a.get("bbox")
        if bbox is not None:
            if not (isinstance(bbox, list) and len(bbox) == 4):
                raise CocoFormatError(f"{path}.bbox: expected [x, y, w, h] ({who})")
            bbox = tuple(float(b) for b in bbox)
        raw.append((ann_id, image_id, pose, area, bbox, bool(a.get("iscrowd", 0)), int(a.get("category_id", 1))))

    by_image: dict[Any, list[int]] = {}
    for idx, r in enumerate(raw):
        by_image.setdefault(r[1], []).append(idx)
    instances = []
    for idx, (ann_id, image_id, pose, area, bbox, crowd, cat) in enumerate(raw):
        neighbors = tuple(
            raw[o][2] for o in by_image[image_id] if o != idx and not raw[o][5] and raw[o][2].num_labeled > 0
        )
        s2 = area if area > 0 else (bbox[2] * bbox[3] if bbox else 0.0)
        scale = math.sqrt(s2) if s2 > 0 else 1.0
        ctx = InstanceContext(pose, neighbors, scale, sizes.get(image_id, (0, 0)))
        instances.append(GroundTruthInstance(ann_id, image_id, ctx, area, bbox, crowd, cat))
    return CocoGroundTruth(instances, list(images), list(data.get("categories", [])))


def load_coco_ground_truth(path: str | Path, spec: SkeletonSpec) -> CocoGroundTruth:
    with open(path) as f:
        return parse_coco_ground_truth(json.load(f), spec)


def coco_ground_truth_dict(gt: CocoGroundTruth) -> dict:
    anns = []
    for g in gt.instances:
        pose = g.context.target
        a = {
            "id": g.ann_id,
            "image_id": g.image_id,
            "category_id": g.category_id,
            "keypoints": pose.to_coco(),
            "num_keypoints": pose.num_labeled,
            "area": g.area,
            "iscrowd": int(g.iscrowd),
        }
        if g.bbox is not None:
            a["bbox"] = list(g.bbox)
        anns.append(a)
    return {"images": gt.images, "annotations": anns, "categories": gt.categories}


def save_coco_ground_truth(gt: CocoGroundTruth, path: str | Path) -> None:
    Path(path).write_text(json.dumps(coco_ground_truth_dict(gt)) + "\n")


def parse_coco_results(data: list, spec: SkeletonSpec) -> dict[int, list[Detection]]:
    if not isinstance(data, list):
        raise CocoFormatError("$: results file must be a JSON list")
    out: dict[int, list[Detection]] = {}
    for i, r in enumerate(data):
        path = f"$[{i}]"
        image_id = _req(r, "image_id", path)
        arr = _keypoints(_req(r, "keypoints", path), spec.num_joints, path, f"result {i}")
        score = _req(r, "score", path)
        if not isinstance(score, (int, float)):
            raise CocoFormatError(f"{path}.score: expected a number")
        # a detector output has a coordinate for every joint unless it wrote (0, 0, 0)
        vis = np.where((arr == 0).all(axis=1), Visibility.NOT_LABELED, Visibility.LABELED_VISIBLE)
        pose = Pose.from_arrays(arr[:, :2], vis, float(score))
        out.setdefault(image_id, []).append(Detection(image_id, pose, int(r.get("category_id", 1)), i))
    return out


def load_coco_results(path: str | Path, spec: SkeletonSpec) -> dict[int, list[Detection]]:
    with open(path) as f:
        return parse_coco_results(json.load(f), spec)


def result_entry(image_id: int, pose: Pose, category_id: int = 1, score: Optional[float] = None) -> dict:
    kps: list[float] = []
    for kp in pose.keypoints:
        kps += [float(kp.x), float(kp.y), 1] if kp.labeled else [0, 0, 0]
    sc = score if score is not None else (pose.score if pose.score is not None else 1.0)
    return {"image_id": image_id, "category_id": category_id, "keypoints": kps, "score": float(sc)}


def coco_results_list(dets: dict[int, list[Detection]] | Sequence[Detection]) -> list[dict]:
    flat = [d for v in dets.values() for d in v] if isinstance(dets, dict) else list(dets)
    flat.sort(key=lambda d: d.index)
    return [result_entry(d.image_id, d.pose, d.category_id) for d in flat]


def save_coco_results(entries: Sequence[dict], path: str | Path) -> None:
    Path(path).write_text(json.dumps(list(entries)) + "\n")
