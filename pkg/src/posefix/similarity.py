"""Keypoint similarity (KS), object keypoint similarity (OKS) and KS radii."""

from __future__ import annotations

import math

import numpy as np

from .core import InstanceContext, Pose, SkeletonSpec


def _check_finite(**values):
    for name, v in values.items():
        if not np.all(np.isfinite(v)):
            raise ValueError(f"{name} must be finite")


def _scalars(*values) -> bool:
    return all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in values)


def ks(d, s, kappa):
    """KS = exp(-d^2 / (2 s^2 kappa^2)). Broadcasts over numpy inputs."""
    if _scalars(d, s, kappa) and math.isfinite(d) and d >= 0 and s > 0 and kappa > 0 and math.isfinite(s * kappa):
        return math.exp(-(d * d) / (2.0 * s * s * kappa * kappa))
    _check_finite(d=d, s=s, kappa=kappa)
    if np.any(np.asarray(d) < 0):
        raise ValueError("distance must be non-negative")
    if np.any(np.asarray(s) <= 0) or np.any(np.asarray(kappa) <= 0):
        raise ValueError("scale and kappa must be positive")
    d, s, kappa = np.asarray(d, float), np.asarray(s, float), np.asarray(kappa, float)
    out = np.exp(-(d * d) / (2.0 * s * s * kappa * kappa))
    return float(out) if out.ndim == 0 else out


def ks_radius(k, s, kappa):
    """Distance at which KS drops to ``k``: s * kappa * sqrt(-2 ln k)."""
    # plain floats skip the array validation; this sits on the synthesis hot path
    if _scalars(k, s, kappa) and 0 < k <= 1 and s > 0 and kappa > 0 and math.isfinite(s * kappa):
        return s * kappa * math.sqrt(-2.0 * math.log(k))
    _check_finite(k=k, s=s, kappa=kappa)
    k = np.asarray(k, float)
    if np.any(k <= 0) or np.any(k > 1):
        raise ValueError(f"KS level must lie in (0, 1], got {k}")
    if np.any(np.asarray(s) <= 0) or np.any(np.asarray(kappa) <= 0):
        raise ValueError("scale and kappa must be positive")
    out = np.asarray(s, float) * np.asarray(kappa, float) * np.sqrt(-2.0 * np.log(k))
    return float(out) if out.ndim == 0 else out


def oks_arrays(est_xy: np.ndarray, gt_xy: np.ndarray, labeled: np.ndarray, s: float, kappa: np.ndarray) -> tuple[float, bool]:
    """Array form of :func:`oks`. Returns ``(value, degenerate)``."""
    n = int(np.count_nonzero(labeled))
    if n == 0:
        return 0.0, True
    diff = est_xy[labeled] - gt_xy[labeled]
    d2 = np.einsum("ij,ij->i", diff, diff)
    k = kappa[labeled]
    return float(np.exp(-d2 / (2.0 * s * s * k * k)).sum() / n), False


def oks(estimate: Pose, truth: Pose, ctx: InstanceContext, spec: SkeletonSpec) -> tuple[float, bool]:
    """Mean KS over the joints labeled in ``truth``.

    Returns ``(value, degenerate)``; degenerate instances (no labeled truth
    joint) score 0.0 so callers can skip them explicitly.
    """
    k = spec.num_joints
    if len(estimate) != k or len(truth) != k:
        raise ValueError(f"pose lengths {len(estimate)}/{len(truth)} do not match skeleton size {k}")
    labeled = truth.labeled
    est = estimate.xy
    if not np.all(np.isfinite(est[labeled])):
        raise ValueError("estimate has non-finite coordinates on labeled joints")
    if not math.isfinite(ctx.scale_s):
        raise ValueError("scale must be finite")
    return oks_arrays(est, truth.xy, labeled, ctx.scale_s, spec.kappa_array)
