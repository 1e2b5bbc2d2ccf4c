"""Trainable coarse-to-fine pose refiner and its toy training loop.

The network sees image channels concatenated with one Gaussian channel per
input joint and emits one logit heatmap per joint. Heatmap cell ``(hx, hy)``
covers crop pixels centred at ``stride * h + (stride - 1) / 2``.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import nn
from .codec import encode_pose, hard_argmax, integral_loss, mse_loss, soft_argmax, spatial_softmax
from .core import Keypoint, Pose, SkeletonSpec, coco_skeleton
from .pipeline import AffineTransform, bbox_from_pose, crop_transform, extend_aspect, flip_merge, warp_image
from .rng import derive_rng
from .similarity import oks_arrays
from .toy import ToyArrays, ToySample

log = logging.getLogger(__name__)

LOSS_MODES = ("C2F", "C2C", "F2F", "C2F_LH_only", "C2F_LC_only")
MODE_ALIASES = {"C2F_LH": "C2F_LH_only", "C2F_LC": "C2F_LC_only"}
IMAGE_CHANNELS = 3


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; carries the offending batch positions."""

    def __init__(self, message: str, sample_indices: Sequence[int], epoch: int = -1, step: int = -1):
        super().__init__(message)
        self.sample_indices = list(sample_indices)
        self.epoch = epoch
        self.step = step


def canonical_mode(mode: str) -> str:
    m = MODE_ALIASES.get(mode, mode)
    if m not in LOSS_MODES:
        raise ValueError(f"unknown loss mode {mode!r}; expected one of {LOSS_MODES}")
    return m


@dataclass(frozen=True)
class RefinerConfig:
    input_size: tuple[int, int] = (48, 64)  # (w, h)
    heatmap_size: tuple[int, int] = (24, 32)
    widths: tuple[int, ...] = (32, 64)
    architecture: str = "toy"
    learning_rate: float = 1e-3
    decay_epochs: Optional[tuple[int, ...]] = None  # default: 2/3 and 5/6 of epochs
    decay_factor: float = 0.1
    batch_size: int = 32
    epochs: int = 12
    loss_mode: str = "C2F"
    seed: int = 0
    input_sigma: float = 2.0  # coarse input blob, input pixels
    fine_input_sigma: float = 0.5  # F2F input blob
    target_sigma: float = 1.0  # C2C target blob, heatmap cells
    init_std: float = 0.01
    flip_prob: float = 0.0  # horizontal flip augmentation during training
    num_joints: int = 17
    dtype: str = "float32"

    def __post_init__(self):
        object.__setattr__(self, "loss_mode", canonical_mode(self.loss_mode))
        object.__setattr__(self, "input_size", tuple(int(v) for v in self.input_size))
        object.__setattr__(self, "heatmap_size", tuple(int(v) for v in self.heatmap_size))
        object.__setattr__(self, "widths", tuple(int(v) for v in self.widths))
        if self.decay_epochs is not None:
            object.__setattr__(self, "decay_epochs", tuple(int(v) for v in self.decay_epochs))
        if self.architecture not in nn.ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.architecture!r}")
        (iw, ih), (hw, hh) = self.input_size, self.heatmap_size
        if hw <= 0 or hh <= 0 or iw % hw or ih % hh or iw // hw != ih // hh:
            raise ValueError(f"heatmap_size {self.heatmap_size} must evenly divide input_size {self.input_size}")
        if iw // hw != nn.output_stride(self.layers()):
            raise ValueError(f"architecture {self.architecture!r} has stride {nn.output_stride(self.layers())}, sizes imply {iw // hw}")
        if self.batch_size < 1 or self.epochs < 0 or not self.learning_rate > 0:
            raise ValueError("batch_size >= 1, epochs >= 0 and learning_rate > 0 required")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    @property
    def stride(self) -> int:
        return self.input_size[0] // self.heatmap_size[0]

    @property
    def in_channels(self) -> int:
        return IMAGE_CHANNELS + self.num_joints

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    @property
    def pose_sigma(self) -> float:
        return self.fine_input_sigma if self.loss_mode == "F2F" else self.input_sigma

    def schedule(self) -> tuple[int, ...]:
        if self.decay_epochs is not None:
            return self.decay_epochs
        return (round(self.epochs * 2 / 3), round(self.epochs * 5 / 6))

    def lr_at(self, epoch: int) -> float:
        return self.learning_rate * self.decay_factor ** sum(epoch >= e for e in self.schedule())

    def layers(self) -> list[nn.Layer]:
        return nn.ARCHITECTURES[self.architecture](IMAGE_CHANNELS + self.num_joints, self.num_joints, self.widths)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RefinerConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown refiner config keys: {sorted(unknown)}")
        kw = {k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items()}
        return cls(**kw)


def init_refiner(config: RefinerConfig) -> dict[str, np.ndarray]:
    return nn.init_params(config.layers(), derive_rng(config.seed, "init"), config.init_std, config.np_dtype)


# --------------------------------------------------------------------------
# encoding helpers


def heatmap_to_crop(hxy: np.ndarray, stride: int) -> np.ndarray:
    return stride * np.asarray(hxy, dtype=np.float64) + (stride - 1) / 2.0


def crop_to_heatmap(xy: np.ndarray, stride: int) -> np.ndarray:
    return (np.asarray(xy, dtype=np.float64) - (stride - 1) / 2.0) / stride


def network_input(images: np.ndarray, pose_xy: np.ndarray, pose_labeled: np.ndarray, config: RefinerConfig) -> np.ndarray:
    """``(B, 3 + K, h, w)`` stack of image channels and coarse input-pose maps."""
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[None]
        pose_xy, pose_labeled = np.asarray(pose_xy)[None], np.asarray(pose_labeled)[None]
    w, h = config.input_size
    b = images.shape[0]
    if images.shape[1:] != (IMAGE_CHANNELS, h, w):
        raise ValueError(f"images must be (B, {IMAGE_CHANNELS}, {h}, {w}), got {images.shape}")
    if pose_xy.shape != (b, config.num_joints, 2):
        raise ValueError(f"input pose must be ({b}, {config.num_joints}, 2), got {pose_xy.shape}")
    x = np.empty((b, config.in_channels, h, w), dtype=config.np_dtype)
    x[:, :IMAGE_CHANNELS] = images
    for i in range(b):
        x[i, IMAGE_CHANNELS:] = encode_pose(pose_xy[i], pose_labeled[i], config.pose_sigma, w, h)
    # Gaussian tails underflow to subnormals in float32, which make BLAS crawl
    x[np.abs(x) < np.finfo(x.dtype).tiny] = 0.0
    return x


def bilinear_targets(hxy: np.ndarray, w: int, h: int) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised :func:`codec.target_encode` over ``(N, 2)`` grid coordinates.

    Returns targets ``(N, h, w)`` and a flag for coordinates that needed clamping.
    """
    hxy = np.asarray(hxy, dtype=np.float64)
    n = hxy.shape[0]
    cx = np.clip(hxy[:, 0], 0.0, w - 1.0)
    cy = np.clip(hxy[:, 1], 0.0, h - 1.0)
    clamped = (cx != hxy[:, 0]) | (cy != hxy[:, 1])
    x0 = np.floor(cx).astype(int)
    y0 = np.floor(cy).astype(int)
    fx, fy = cx - x0, cy - y0
    x1, y1 = np.minimum(x0 + 1, w - 1), np.minimum(y0 + 1, h - 1)
    out = np.zeros((n, h * w))
    rows = np.arange(n)
    for xi, yi, wgt in ((x0, y0, (1 - fx) * (1 - fy)), (x1, y0, fx * (1 - fy)), (x0, y1, (1 - fx) * fy), (x1, y1, fx * fy)):
        np.add.at(out, (rows, yi * w + xi), wgt)
    return out.reshape(n, h, w), clamped


def batch_loss(logits: np.ndarray, gt_xy: np.ndarray, gt_labeled: np.ndarray, config: RefinerConfig):
    """Loss of a batch of logits ``(B, K, h, w)`` against crop-space ground truth.

    Joints that are unlabeled or fall off the heatmap grid are masked out.
    """
    b, k, h, w = logits.shape
    hxy = crop_to_heatmap(gt_xy.reshape(-1, 2), config.stride)
    mask = np.asarray(gt_labeled, dtype=bool).reshape(-1)
    z = logits.reshape(b * k, h, w).astype(np.float64)
    if config.loss_mode == "C2C":
        targets = encode_pose(hxy, mask, config.target_sigma, w, h)
        res = mse_loss(z, targets, mask)
    else:
        targets, clamped = bilinear_targets(hxy, w, h)
        mask = mask & ~clamped
        hw, cw = {"C2F": (1.0, 1.0), "F2F": (1.0, 1.0), "C2F_LH_only": (1.0, 0.0), "C2F_LC_only": (0.0, 1.0)}[config.loss_mode]
        res = integral_loss(z, targets, hxy, mask, heatmap_weight=hw, coord_weight=cw)
    per_sample = None
    if not math.isfinite(res.total):
        per_sample = [i for i in range(b) if not np.all(np.isfinite(logits[i]))] or list(range(b))
    return res, per_sample


def decode(logits: np.ndarray, config: RefinerConfig) -> np.ndarray:
    """Crop-space coordinates ``(..., K, 2)`` from logit heatmaps."""
    if config.loss_mode == "C2C":
        hxy = hard_argmax(logits)
    else:
        hxy = soft_argmax(spatial_softmax(np.asarray(logits, dtype=np.float64)))
    return heatmap_to_crop(hxy, config.stride)


# --------------------------------------------------------------------------
# network entry points


def forward(params: dict[str, np.ndarray], image: np.ndarray, input_pose, config: RefinerConfig, keep_cache: bool = False):
    """Logit heatmaps ``(B, K, h, w)`` for crop-space images and input poses.

    ``input_pose`` is a :class:`Pose` (single image) or a pair of arrays
    ``(xy (B, K, 2), labeled (B, K))``. Returns ``(logits, cache)``.
    """
    if isinstance(input_pose, Pose):
        xy, lab = input_pose.xy, input_pose.labeled
    else:
        xy, lab = input_pose
    x = network_input(image, np.asarray(xy), np.asarray(lab), config)
    out, caches = nn.forward(params, config.layers(), x, keep_cache=keep_cache)
    wh, hh = config.heatmap_size
    if out.shape[1:] != (config.num_joints, hh, wh):
        raise ValueError(f"network produced {out.shape[1:]}, expected {(config.num_joints, hh, wh)}")
    return out, caches


def backward(params: dict[str, np.ndarray], batch: ToyArrays, config: RefinerConfig):
    """Loss and gradient of every parameter on one batch of crop-space samples."""
    logits, caches = forward(params, batch.images, (batch.in_xy, batch.in_labeled), config, keep_cache=True)
    res, bad = batch_loss(logits, batch.gt_xy, batch.gt_labeled, config)
    if bad is not None:
        raise TrainingDiverged(f"non-finite loss {res.total}", bad)
    dout = res.grad.reshape(logits.shape).astype(logits.dtype)
    grads = nn.backward(params, config.layers(), caches, dout)
    return res.total, grads


def mirror_batch(batch: ToyArrays, spec: SkeletonSpec, width: int) -> ToyArrays:
    """Horizontal mirror of crop images and poses, with left/right joints swapped."""

    def mx(xy):
        out = xy[:, spec.flip_index].copy()
        out[..., 0] = width - 1 - out[..., 0]
        return out

    return ToyArrays(
        batch.images[..., ::-1].copy(),
        mx(batch.gt_xy),
        batch.gt_labeled[:, spec.flip_index],
        mx(batch.in_xy),
        batch.in_labeled[:, spec.flip_index],
        batch.scale,
    )


def predict(params, images, in_xy, in_labeled, config: RefinerConfig, spec: SkeletonSpec, flip_tta: bool = False, batch_size: int = 64) -> np.ndarray:
    """Crop-space refined coordinates ``(B, K, 2)`` for a batch."""
    out = np.empty((len(images), config.num_joints, 2))
    w = config.input_size[0]
    for lo in range(0, len(images), batch_size):
        sl = slice(lo, lo + batch_size)
        logits, _ = forward(params, images[sl], (in_xy[sl], in_labeled[sl]), config)
        if flip_tta:
            view = ToyArrays(images[sl], in_xy[sl], in_labeled[sl], in_xy[sl], in_labeled[sl], np.ones(len(images[sl])))
            m = mirror_batch(view, spec, w)
            flipped, _ = forward(params, m.images, (m.in_xy, m.in_labeled), config)
            logits = flip_merge(logits, flipped, spec)
        out[sl] = decode(logits, config)
    return out


def refine(
    params: dict[str, np.ndarray],
    image: np.ndarray,
    input_pose: Pose,
    config: RefinerConfig,
    flip_tta: bool = False,
    *,
    spec: Optional[SkeletonSpec] = None,
    transform: Optional[AffineTransform] = None,
) -> Pose:
    """Refined copy of ``input_pose``; the score is carried over unchanged.

    ``image`` is ``(3, H, W)`` in source coordinates. Without an explicit
    ``transform`` an image already at ``input_size`` is used as the crop;
    otherwise the crop is taken around the input pose's box.
    """
    spec = spec or coco_skeleton()
    w, h = config.input_size
    image = np.asarray(image)
    if transform is None:
        if image.shape[1:] == (h, w):
            transform = AffineTransform.identity((w, h))
        else:
            transform = crop_transform(extend_aspect(bbox_from_pose(input_pose), h / w), w, h)
    crop = image if image.shape[1:] == (h, w) and np.array_equal(transform.matrix, AffineTransform.identity().matrix) else warp_image(image, transform, w, h)
    in_xy = transform.apply(input_pose.xy)
    xy = predict(params, crop[None], in_xy[None], input_pose.labeled[None], config, spec, flip_tta)[0]
    src = transform.inverse().apply(xy)
    kps = [Keypoint(float(x), float(y), kp.visibility) if kp.labeled else kp for (x, y), kp in zip(src, input_pose.keypoints)]
    return input_pose.with_keypoints(kps)


# --------------------------------------------------------------------------
# training


def mean_oks(pred_xy: np.ndarray, data: ToyArrays, spec: SkeletonSpec) -> float:
    kappa = spec.kappa_array
    vals = [oks_arrays(pred_xy[i], data.gt_xy[i], data.gt_labeled[i], float(data.scale[i]), kappa)[0] for i in range(len(data))]
    return float(np.mean(vals))


@dataclass
class EpochMetrics:
    epoch: int
    loss: float
    lr: float
    input_oks: Optional[float] = None
    refined_oks: Optional[float] = None
    seconds: float = 0.0


@dataclass
class TrainResult:
    params: dict[str, np.ndarray]
    history: list[EpochMetrics] = field(default_factory=list)
    config: Optional[RefinerConfig] = None


def _as_arrays(data) -> ToyArrays:
    if isinstance(data, ToyArrays):
        return data
    return ToyArrays.stack(list(data))


def train(
    dataset: Sequence[ToySample] | ToyArrays,
    config: RefinerConfig,
    spec: Optional[SkeletonSpec] = None,
    *,
    eval_set: Sequence[ToySample] | ToyArrays | None = None,
    eval_every: int = 1,
    params: Optional[dict[str, np.ndarray]] = None,
) -> TrainResult:
    """Adam on the selected loss; shuffles come from ``derive_rng(seed, "shuffle", epoch)``.

    Mean input / refined OKS are tracked on ``eval_set`` when given.
    """
    spec = spec or coco_skeleton()
    data = _as_arrays(dataset)
    if len(data) == 0:
        raise ValueError("empty training set")
    if data.images.shape[2:] != (config.input_size[1], config.input_size[0]):
        raise ValueError(f"training images are {data.images.shape[2:]}, config expects (h, w) = {config.input_size[::-1]}")
    ev = _as_arrays(eval_set) if eval_set is not None else None
    ev_input = mean_oks(ev.in_xy, ev, spec) if ev is not None else None
    params = {k: v.copy() for k, v in (params or init_refiner(config)).items()}
    opt = nn.Adam(params, lr=config.learning_rate)
    history = []
    n = len(data)
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        opt.lr = config.lr_at(epoch)
        order = derive_rng(config.seed, "shuffle", epoch).permutation(n)
        flips = derive_rng(config.seed, "flip", epoch).random(n) < config.flip_prob
        total, count = 0.0, 0
        for step, lo in enumerate(range(0, n, config.batch_size)):
            idx = order[lo : lo + config.batch_size]
            batch = data.subset(idx)
            f = flips[lo : lo + config.batch_size]
            if f.any():
                m = mirror_batch(batch.subset(f), spec, config.input_size[0])
                for name in ("images", "gt_xy", "gt_labeled", "in_xy", "in_labeled"):
                    getattr(batch, name)[f] = getattr(m, name)
            try:
                loss, grads = backward(params, batch, config)
            except TrainingDiverged as e:
                raise TrainingDiverged(
                    f"training diverged at epoch {epoch} step {step}: {e}", [int(idx[i]) for i in e.sample_indices], epoch, step
                ) from None
            opt.step(params, grads)
            total += loss * len(idx)
            count += len(idx)
        m = EpochMetrics(epoch, total / count, opt.lr)
        if ev is not None and (epoch % eval_every == eval_every - 1 or epoch == config.epochs - 1):
            m.input_oks = ev_input
            m.refined_oks = mean_oks(predict(params, ev.images, ev.in_xy, ev.in_labeled, config, spec), ev, spec)
        m.seconds = time.perf_counter() - t0
        log.info("epoch %d loss %.5f lr %.1e input OKS %s refined OKS %s (%.1fs)", epoch, m.loss, m.lr, m.input_oks, m.refined_oks, m.seconds)
        history.append(m)
    return TrainResult(params, history, config)


def evaluate_refiner(params, data, config: RefinerConfig, spec: Optional[SkeletonSpec] = None, flip_tta: bool = False) -> dict:
    """Mean OKS of the corrupted inputs and of the refined outputs."""
    spec = spec or coco_skeleton()
    arr = _as_arrays(data)
    pred = predict(params, arr.images, arr.in_xy, arr.in_labeled, config, spec, flip_tta)
    return {"input_oks": mean_oks(arr.in_xy, arr, spec), "refined_oks": mean_oks(pred, arr, spec), "samples": len(arr)}


def ablate(
    train_set,
    eval_set,
    base: RefinerConfig,
    modes: Sequence[str] = LOSS_MODES,
    seeds: Sequence[int] = (0, 1, 2),
    spec: Optional[SkeletonSpec] = None,
) -> list[dict]:
    """Train every mode under an identical budget for each seed; one row per (mode, seed)."""
    spec = spec or coco_skeleton()
    tr, ev = _as_arrays(train_set), _as_arrays(eval_set)
    rows = []
    for mode in modes:
        for seed in seeds:
            cfg = replace(base, loss_mode=mode, seed=seed)
            res = train(tr, cfg, spec, eval_set=None)
            r = evaluate_refiner(res.params, ev, cfg, spec)
            rows.append({"mode": cfg.loss_mode, "seed": seed, "input_oks": r["input_oks"], "refined_oks": r["refined_oks"], "final_loss": res.history[-1].loss if res.history else None})
    return rows


def summarize_ablation(rows: Sequence[dict]) -> list[dict]:
    """Mean and spread of refined OKS per mode, in first-seen mode order."""
    modes = list(dict.fromkeys(r["mode"] for r in rows))
    out = []
    for m in modes:
        v = np.array([r["refined_oks"] for r in rows if r["mode"] == m])
        inp = np.array([r["input_oks"] for r in rows if r["mode"] == m])
        out.append({"mode": m, "seeds": len(v), "input_oks": float(inp.mean()), "refined_oks_mean": float(v.mean()), "refined_oks_std": float(v.std())})
    return out


# --------------------------------------------------------------------------
# serialization


def save_params(params: dict[str, np.ndarray], config: RefinerConfig, path: str | Path, extra: Optional[dict] = None) -> None:
    """Little-endian float32 tensors back to back in ``path``, described by ``path.json``."""
    path = Path(path)
    entries, offset, chunks = [], 0, []
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name], dtype="<f4")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
        chunks.append(arr.tobytes())
        offset += arr.size * 4
    path.write_bytes(b"".join(chunks))
    manifest = {"format": "posefix-params-v1", "dtype": "float32-le", "tensors": entries, "config": config.to_dict()}
    if extra:
        manifest.update(extra)
    Path(str(path) + ".json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_params(path: str | Path) -> tuple[dict[str, np.ndarray], RefinerConfig]:
    path = Path(path)
    manifest = json.loads(Path(str(path) + ".json").read_text())
    if manifest.get("format") != "posefix-params-v1":
        raise ValueError(f"{path}: unrecognised params format {manifest.get('format')!r}")
    raw = path.read_bytes()
    config = RefinerConfig.from_dict(manifest["config"])
    params = {}
    for e in manifest["tensors"]:
        arr = np.frombuffer(raw, dtype="<f4", count=e["count"], offset=e["offset"]).reshape(e["shape"])
        params[e["name"]] = arr.astype(config.np_dtype)
    expected = set(nn.init_params(config.layers(), np.random.default_rng(0)))
    if set(params) != expected:
        raise ValueError(f"{path}: tensors {sorted(set(params) ^ expected)} do not match the architecture")
    return params, config
