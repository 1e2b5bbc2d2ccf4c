"""OKS-thresholded keypoint AP/AR following the public COCO conventions.

Greedy score-ordered matching per image, crowd / keypoint-less / out-of-range
ground truths ignored rather than penalised, 101-point interpolated precision.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from .core import SkeletonSpec
from .pipeline import CocoGroundTruth, Detection, GroundTruthInstance

METRIC_NAMES = ("AP", "AP.50", "AP.75", "AP_M", "AP_L", "AR", "AR.50", "AR.75", "AR_M", "AR_L")


@dataclass(frozen=True)
class EvalParams:
    # linspace avoids arange's accumulated drift (0.9 must stay <= 0.9)
    oks_thresholds: tuple[float, ...] = tuple(np.linspace(0.5, 0.95, 10).tolist())
    area_ranges: Mapping[str, tuple[float, float]] = field(
        default_factory=lambda: {"all": (0.0, 1e10), "medium": (32.0**2, 96.0**2), "large": (96.0**2, 1e10)}
    )
    max_dets: int = 20
    recall_thresholds: tuple[float, ...] = tuple(np.linspace(0.0, 1.0, 101).tolist())

    def __post_init__(self):
        t = np.asarray(self.oks_thresholds)
        if t.size == 0 or np.any(np.diff(t) <= 0) or t[0] <= 0 or t[-1] > 1:
            raise ValueError("oks_thresholds must be strictly increasing within (0, 1]")


def _det_area(d: Detection) -> float:
    pts = d.pose.xy
    x0, y0 = pts.min(0)
    x1, y1 = pts.max(0)
    return float((x1 - x0) * (y1 - y0))


def oks_matrix(dets: Sequence[Detection], gts: Sequence[GroundTruthInstance], kappa: np.ndarray) -> np.ndarray:
    """(D, G) OKS between detections and ground truths of one image.

    Ground truths without labeled keypoints use the COCO fallback: distance to
    the nearest point of a box twice the size of the annotated box.
    """
    out = np.zeros((len(dets), len(gts)))
    if not dets or not gts:
        return out
    d_xy = np.stack([d.pose.xy for d in dets])  # (D, K, 2)
    for gi, g in enumerate(gts):
        pose = g.context.target
        vis = pose.labeled
        area = g.area if g.area > 0 else (g.bbox[2] * g.bbox[3] if g.bbox else 0.0)
        area += np.spacing(1)
        if vis.any():
            diff = d_xy - pose.xy[None]
        else:
            if g.bbox is None:
                continue
            bx, by, bw, bh = g.bbox
            x0, x1, y0, y1 = bx - bw, bx + 2 * bw, by - bh, by + 2 * bh
            dx = np.maximum(0, x0 - d_xy[..., 0]) + np.maximum(0, d_xy[..., 0] - x1)
            dy = np.maximum(0, y0 - d_xy[..., 1]) + np.maximum(0, d_xy[..., 1] - y1)
            diff = np.stack([dx, dy], axis=-1)
        e = (diff**2).sum(-1) / (kappa**2) / area / 2.0
        if vis.any():
            e = e[:, vis]
        out[:, gi] = np.exp(-e).sum(1) / e.shape[1]
    return out


@dataclass
class ImageMatch:
    """Matching outcome of one image under one area range."""

    image_id: int
    dt_scores: np.ndarray  # (D,) sorted descending, truncated at max_dets
    dt_matched: np.ndarray  # (T, D) bool
    dt_ignore: np.ndarray  # (T, D) bool
    gt_ignore: np.ndarray  # (G,) bool
    dt_gt: np.ndarray  # (T, D) index of matched gt in this image's sorted gt list, -1 if none
    gt_ids: list


def match_image(
    image_id,
    gts: Sequence[GroundTruthInstance],
    dets: Sequence[Detection],
    params: EvalParams,
    spec: SkeletonSpec,
    area_range: tuple[float, float] = (0.0, 1e10),
) -> Optional[ImageMatch]:
    """Greedy matching of score-sorted detections to ground truths of one image."""
    if not gts and not dets:
        return None
    lo, hi = area_range
    ignore = [(not g.usable) or g.area < lo or g.area > hi for g in gts]
    gt_order = sorted(range(len(gts)), key=lambda i: (ignore[i], gts[i].ann_id))
    gts = [gts[i] for i in gt_order]
    gt_ig = np.array([ignore[i] for i in gt_order], dtype=bool)
    dt_order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, dets[i].index))[: params.max_dets]
    dets = [dets[i] for i in dt_order]
    crowd = [g.iscrowd for g in gts]
    ious = oks_matrix(dets, gts, spec.kappa_array)

    T, D, G = len(params.oks_thresholds), len(dets), len(gts)
    gt_taken = np.zeros((T, G), dtype=bool)
    dt_gt = -np.ones((T, D), dtype=int)
    dt_ig = np.zeros((T, D), dtype=bool)
    for ti, thr in enumerate(params.oks_thresholds):
        for di in range(D):
            best_oks = min(thr, 1 - 1e-10)
            m = -1
            for gi in range(G):
                if gt_taken[ti, gi] and not crowd[gi]:
                    continue
                # once matched to a regular gt, ignored gts (sorted last) cannot win
                if m > -1 and not gt_ig[m] and gt_ig[gi]:
                    break
                o = ious[di, gi]
                # strict improvement after the first hit: equal OKS keeps the lower gt id
                if o < best_oks or (m > -1 and o == best_oks):
                    continue
                best_oks = o
                m = gi
            if m == -1:
                continue
            dt_ig[ti, di] = gt_ig[m]
            dt_gt[ti, di] = m
            gt_taken[ti, m] = True
    matched = dt_gt >= 0
    out_of_range = np.array([not (lo <= _det_area(d) <= hi) for d in dets], dtype=bool)
    dt_ig |= ~matched & out_of_range[None, :]
    return ImageMatch(
        image_id,
        np.array([d.score for d in dets], dtype=np.float64),
        matched,
        dt_ig,
        gt_ig,
        dt_gt,
        [g.ann_id for g in gts],
    )


def match_and_score(
    gts: CocoGroundTruth | Mapping[int, Sequence[GroundTruthInstance]],
    dts: Mapping[int, Sequence[Detection]],
    params: EvalParams = EvalParams(),
    spec: SkeletonSpec | None = None,
    area_range: tuple[float, float] = (0.0, 1e10),
) -> list[ImageMatch]:
    """Per-image match matrices over every image that has ground truth or detections."""
    if spec is None:
        raise ValueError("a skeleton is required for OKS")
    by_image = gts.by_image() if isinstance(gts, CocoGroundTruth) else dict(gts)
    image_ids = sorted(set(by_image) | set(dts), key=lambda x: (str(type(x)), x))
    out = []
    for img in image_ids:
        m = match_image(img, by_image.get(img, []), list(dts.get(img, [])), params, spec, area_range)
        if m is not None:
            out.append(m)
    return out


def accumulate(matches: Sequence[ImageMatch], params: EvalParams) -> tuple[np.ndarray, np.ndarray]:
    """Interpolated precision ``(T, R)`` and final recall ``(T,)``; NaN when undefined."""
    T, R = len(params.oks_thresholds), len(params.recall_thresholds)
    precision = np.full((T, R), np.nan)
    recall = np.full(T, np.nan)
    if not matches:
        return precision, recall
    n_gt = int(sum(int((~m.gt_ignore).sum()) for m in matches))
    if n_gt == 0:
        return precision, recall
    scores = np.concatenate([m.dt_scores for m in matches])
    order = np.argsort(-scores, kind="mergesort")
    tp_all = np.concatenate([m.dt_matched for m in matches], axis=1)[:, order]
    ig_all = np.concatenate([m.dt_ignore for m in matches], axis=1)[:, order]
    rec_thr = np.asarray(params.recall_thresholds)
    for t in range(T):
        tps = tp_all[t] & ~ig_all[t]
        fps = ~tp_all[t] & ~ig_all[t]
        tp = np.cumsum(tps).astype(np.float64)
        fp = np.cumsum(fps).astype(np.float64)
        nd = len(tp)
        rc = tp / n_gt
        pr = tp / (fp + tp + np.spacing(1))
        recall[t] = rc[-1] if nd else 0.0
        # precision envelope: max precision at any recall >= r
        pr = np.maximum.accumulate(pr[::-1])[::-1] if nd else pr
        q = np.zeros(R)
        idx = np.searchsorted(rc, rec_thr, side="left")
        ok = idx < nd
        q[ok] = pr[idx[ok]]
        precision[t] = q
    return precision, recall


@dataclass
class Metrics:
    values: dict[str, Optional[float]]

    def __getitem__(self, key: str) -> Optional[float]:
        return self.values[key]

    def to_dict(self) -> dict:
        return dict(self.values)

    def format(self) -> str:
        lines = []
        for k in METRIC_NAMES:
            v = self.values[k]
            lines.append(f"{k:<6} = {'undefined' if v is None else f'{v:.4f}'}")
        return "\n".join(lines)


def _mean_or_none(a: np.ndarray) -> Optional[float]:
    if a.size == 0 or np.all(np.isnan(a)):
        return None
    return float(np.nanmean(a))


def average_precision(
    gts: CocoGroundTruth | Mapping[int, Sequence[GroundTruthInstance]],
    dts: Mapping[int, Sequence[Detection]],
    spec: SkeletonSpec,
    params: EvalParams = EvalParams(),
) -> Metrics:
    """Keypoint AP/AR record. Metrics over ranges with no ground truth are ``None``."""
    thr = np.asarray(params.oks_thresholds)
    i50 = np.flatnonzero(np.isclose(thr, 0.5))
    i75 = np.flatnonzero(np.isclose(thr, 0.75))
    vals: dict[str, Optional[float]] = {}
    for suffix, rng_name in (("", "all"), ("_M", "medium"), ("_L", "large")):
        if rng_name not in params.area_ranges:
            continue
        matches = match_and_score(gts, dts, params, spec, params.area_ranges[rng_name])
        prec, rec = accumulate(matches, params)
        vals["AP" + suffix] = _mean_or_none(prec)
        vals["AR" + suffix] = _mean_or_none(rec)
        if suffix == "":
            vals["AP.50"] = _mean_or_none(prec[i50]) if i50.size else None
            vals["AP.75"] = _mean_or_none(prec[i75]) if i75.size else None
            vals["AR.50"] = _mean_or_none(rec[i50]) if i50.size else None
            vals["AR.75"] = _mean_or_none(rec[i75]) if i75.size else None
    return Metrics({k: vals.get(k) for k in METRIC_NAMES})


def delta_table(before: Metrics, after: Metrics) -> list[dict]:
    rows = []
    for k in METRIC_NAMES:
        b, a = before[k], after[k]
        rows.append({"metric": k, "before": b, "after": a, "delta": None if a is None or b is None else a - b})
    return rows


def metrics_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: ("" if v is None else (f"{v:.6f}" if isinstance(v, float) else v)) for k, v in r.items()})
    return buf.getvalue()


def metrics_json(obj) -> str:
    def clean(v):
        if isinstance(v, float) and not math.isfinite(v):
            return None
        return v

    if isinstance(obj, Metrics):
        obj = obj.to_dict()
    if isinstance(obj, dict):
        obj = {k: clean(v) for k, v in obj.items()}
    return json.dumps(obj, indent=2) + "\n"
