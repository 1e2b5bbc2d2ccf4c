"""Coarse and fine pose representations and the integral loss.

Heatmaps are numpy arrays shaped ``(..., h, w)``; value ``[y, x]`` sits at the
0-based grid point ``(x, y)``. Coordinates are ``(x, y)`` pairs in grid units.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import NamedTuple

import numpy as np

DEFAULT_SIGMA = 2.0


def gaussian_encode(center, sigma: float, w: int, h: int) -> np.ndarray:
    """Unnormalized Gaussian blob, peak 1 when the center sits on a grid point.

    ``center`` may be ``None`` (unlabeled joint), which gives an all-zero map.
    """
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    if center is None:
        return np.zeros((h, w))
    cx, cy = float(center[0]), float(center[1])
    gx = np.exp(-((np.arange(w) - cx) ** 2) / (2.0 * sigma * sigma))
    gy = np.exp(-((np.arange(h) - cy) ** 2) / (2.0 * sigma * sigma))
    return gy[:, None] * gx[None, :]


def encode_pose(xy: np.ndarray, labeled: np.ndarray, sigma: float, w: int, h: int, dtype=np.float64) -> np.ndarray:
    """Stack of :func:`gaussian_encode` maps ``(K, h, w)``; unlabeled joints are zero."""
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    xy = np.asarray(xy, dtype=np.float64)
    labeled = np.asarray(labeled, dtype=bool)
    gx = np.exp(-((np.arange(w)[None, :] - xy[:, :1]) ** 2) / (2.0 * sigma * sigma))
    gy = np.exp(-((np.arange(h)[None, :] - xy[:, 1:]) ** 2) / (2.0 * sigma * sigma))
    maps = gy[:, :, None] * gx[:, None, :]
    maps[~labeled] = 0.0
    return maps.astype(dtype, copy=False)


def target_encode(center, w: int, h: int, *, return_clamped: bool = False):
    """One-hot target, or bilinear weights over the four surrounding grid points.

    Centers outside ``[0, w-1] x [0, h-1]`` are clamped onto the grid.
    """
    x, y = float(center[0]), float(center[1])
    cx, cy = min(max(x, 0.0), w - 1.0), min(max(y, 0.0), h - 1.0)
    out = np.zeros((h, w))
    x0, y0 = int(np.floor(cx)), int(np.floor(cy))
    fx, fy = cx - x0, cy - y0
    x1, y1 = min(x0 + 1, w - 1), min(y0 + 1, h - 1)
    # accumulate so a one-hot center (fx = fy = 0) keeps exactly 1.0
    out[y0, x0] += (1 - fx) * (1 - fy)
    out[y0, x1] += fx * (1 - fy)
    out[y1, x0] += (1 - fx) * fy
    out[y1, x1] += fx * fy
    if return_clamped:
        return out, (cx, cy) != (x, y)
    return out


def gaussian_target(center, sigma: float, w: int, h: int) -> np.ndarray:
    """Coarse target for the heatmap-regression (MSE) pipeline; same blob as the input encoding."""
    return gaussian_encode(center, sigma, w, h)


def spatial_softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits)
    if not np.all(np.isfinite(z)):
        raise ValueError("logits must be finite")
    flat = z.reshape(*z.shape[:-2], -1)
    e = np.exp(flat - flat.max(axis=-1, keepdims=True))
    return (e / e.sum(axis=-1, keepdims=True)).reshape(z.shape)


def soft_argmax(prob: np.ndarray) -> np.ndarray:
    """Expected grid coordinate ``(x, y)`` under each probability map."""
    p = np.asarray(prob)
    total = p.sum(axis=(-2, -1))
    if np.any(np.abs(total - 1.0) > 1e-4):
        raise ValueError("soft_argmax expects maps that sum to 1")
    h, w = p.shape[-2:]
    x = (p.sum(axis=-2) * np.arange(w, dtype=p.dtype)).sum(axis=-1)
    y = (p.sum(axis=-1) * np.arange(h, dtype=p.dtype)).sum(axis=-1)
    return np.stack([x, y], axis=-1)


def hard_argmax(maps: np.ndarray) -> np.ndarray:
    """Grid coordinate ``(x, y)`` of the maximum of each map."""
    m = np.asarray(maps)
    h, w = m.shape[-2:]
    idx = m.reshape(*m.shape[:-2], -1).argmax(axis=-1)
    return np.stack([idx % w, idx // w], axis=-1).astype(np.float64)


def entropy(prob: np.ndarray) -> float:
    p = np.asarray(prob).ravel()
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())


class LossResult(NamedTuple):
    total: float
    heatmap: float  # cross-entropy term
    coord: float  # L1 coordinate term
    grad: np.ndarray  # dL/dlogits, same shape as logits


def integral_loss(
    logits: np.ndarray,
    targets: np.ndarray,
    target_coords: np.ndarray,
    mask: np.ndarray | None = None,
    *,
    heatmap_weight: float = 1.0,
    coord_weight: float = 1.0,
) -> LossResult:
    """Cross-entropy on softmaxed heatmaps plus L1 on soft-argmax coordinates.

    ``logits`` and ``targets`` are ``(N, h, w)``; ``target_coords`` is ``(N, 2)``.
    Joints where ``mask`` is False contribute nothing, and the average is over
    the ``N'`` masked-in joints. The L1 subgradient at zero is 0.
    """
    z = np.asarray(logits)
    t = np.asarray(targets)
    c_star = np.asarray(target_coords)
    if z.shape != t.shape or z.ndim != 3 or c_star.shape != (z.shape[0], 2):
        raise ValueError(f"shape mismatch: logits {z.shape}, targets {t.shape}, coords {c_star.shape}")
    m = np.ones(z.shape[0], dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    n = int(m.sum())
    if n == 0:
        raise ValueError("no labeled joints to average the loss over")
    h, w = z.shape[-2:]

    flat = z.reshape(z.shape[0], -1)
    shifted = flat - flat.max(axis=1, keepdims=True)
    log_p = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    p = np.exp(log_p).reshape(z.shape)
    log_p = log_p.reshape(z.shape)

    ce = -(t * log_p).sum(axis=(1, 2))
    l_h = float(ce[m].sum() / n)

    c = soft_argmax(p)
    diff = c - c_star
    l_c = float(np.abs(diff[m]).sum() / n)

    sx, sy = np.sign(diff[:, 0]), np.sign(diff[:, 1])
    xs = np.arange(w, dtype=z.dtype)[None, None, :]
    ys = np.arange(h, dtype=z.dtype)[None, :, None]
    g_h = p * t.sum(axis=(1, 2))[:, None, None] - t
    g_c = p * (sx[:, None, None] * (xs - c[:, 0, None, None]) + sy[:, None, None] * (ys - c[:, 1, None, None]))
    grad = (heatmap_weight * g_h + coord_weight * g_c) / n
    grad[~m] = 0.0
    return LossResult(heatmap_weight * l_h + coord_weight * l_c, l_h, l_c, grad)


def mse_loss(pred: np.ndarray, targets: np.ndarray, mask: np.ndarray | None = None) -> LossResult:
    """Mean square error between raw heatmaps and Gaussian targets.

    Averaged over masked-in joints and grid cells. ``coord`` is reported as 0.
    """
    y = np.asarray(pred)
    t = np.asarray(targets)
    if y.shape != t.shape or y.ndim != 3:
        raise ValueError(f"shape mismatch: pred {y.shape}, targets {t.shape}")
    m = np.ones(y.shape[0], dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    n = int(m.sum())
    if n == 0:
        raise ValueError("no labeled joints to average the loss over")
    cells = y.shape[1] * y.shape[2]
    diff = np.where(m[:, None, None], y - t, 0.0)
    loss = float((diff * diff).sum() / (n * cells))
    return LossResult(loss, loss, 0.0, (2.0 / (n * cells)) * diff)


def write_heatmaps(path: str | Path, maps: np.ndarray) -> None:
    """Dump ``(joints, h, w)`` maps as little-endian float32 plus a JSON sidecar."""
    path = Path(path)
    arr = np.asarray(maps, dtype="<f4")
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise ValueError("expected (joints, h, w) maps")
    path.write_bytes(np.ascontiguousarray(arr).tobytes())
    meta = {"w": arr.shape[2], "h": arr.shape[1], "joints": arr.shape[0], "dtype": "float32-le", "layout": "joints,h,w row-major"}
    Path(str(path) + ".json").write_text(json.dumps(meta, indent=2) + "\n")


def read_heatmaps(path: str | Path) -> np.ndarray:
    path = Path(path)
    meta = json.loads(Path(str(path) + ".json").read_text())
    arr = np.frombuffer(path.read_bytes(), dtype="<f4")
    return arr.reshape(meta["joints"], meta["h"], meta["w"]).astype(np.float32)
