"""Independent re-implementations used as test oracles.

Nothing here imports library math: constants are retyped from the public COCO
evaluation code and formulas are written out with the ``math`` module.
"""

import math

# per-joint sigmas from the public COCO keypoint evaluation, nose..right_ankle
COCO_SIGMAS = [0.26, 0.25, 0.25, 0.35, 0.35, 0.79, 0.79, 0.72, 0.72, 0.62, 0.62, 1.07, 1.07, 0.87, 0.87, 0.89, 0.89]
COCO_SIGMAS = [v / 10.0 for v in COCO_SIGMAS]
COCO_FLIP = {1: 2, 2: 1, 3: 4, 4: 3, 5: 6, 6: 5, 7: 8, 8: 7, 9: 10, 10: 9, 11: 12, 12: 11, 13: 14, 14: 13, 15: 16, 16: 15}


def oks_direct(est, gt, vis, area):
    """COCO OKS written the way the public evaluator computes it.

    ``est`` and ``gt`` are lists of (x, y); ``vis`` flags; ``area`` is s**2.
    """
    total, n = 0.0, 0
    for (ex, ey), (gx, gy), v, sg in zip(est, gt, vis, COCO_SIGMAS):
        if not v:
            continue
        var = (2.0 * sg) ** 2
        e = ((ex - gx) ** 2 + (ey - gy) ** 2) / var / area / 2.0
        total += math.exp(-e)
        n += 1
    return total / n if n else 0.0


def radius(k, s, sigma):
    """Distance at which COCO KS equals ``k``: exp(-d^2 / (2 s^2 (2 sigma)^2)) = k."""
    return math.sqrt(-2.0 * math.log(k)) * s * 2.0 * sigma


def classify_direct(x, y, j, target, neighbors, s, k_good=0.85, k_jitter=0.5):
    """Five-way status from first principles.

    ``target`` and ``neighbors`` are lists of 17 ``(x, y)`` or ``None``.
    Ties between anchors resolve in the order target j, target j', then each
    neighbor's j and j'.
    """
    sg = COCO_SIGMAS[j]
    r_good, r_jit = radius(k_good, s, sg), radius(k_jitter, s, sg)
    jp = COCO_FLIP.get(j)
    cands = []
    for person, pose in enumerate([target] + list(neighbors)):
        for role, joint in (("j", j), ("j'", jp)):
            if joint is None or pose[joint] is None:
                continue
            ax, ay = pose[joint]
            cands.append((math.hypot(x - ax, y - ay), len(cands), person, role))
    d, _, person, role = min(cands)
    if person == 0 and role == "j":
        if d < r_good:
            return "good"
        if d < r_jit:
            return "jitter"
        return "miss"
    if person == 0:
        return "inversion" if d < r_jit else "miss"
    return "swap" if d < r_jit else "miss"


def interpolated_ap(tp_flags, n_gt, recall_points=101):
    """101-point interpolated AP of one score-ordered list of TP/FP flags."""
    tp = fp = 0
    prec, rec = [], []
    for f in tp_flags:
        tp += f
        fp += not f
        prec.append(tp / (tp + fp))
        rec.append(tp / n_gt)
    for i in range(len(prec) - 2, -1, -1):
        prec[i] = max(prec[i], prec[i + 1])
    total = 0.0
    for r in (i / (recall_points - 1) for i in range(recall_points)):
        p = [pr for pr, rc in zip(prec, rec) if rc >= r]
        total += p[0] if p else 0.0
    return total / recall_points


def constraint_holds(x, y, status, j, target, neighbors, s, k_good=0.85, k_jitter=0.5, k_miss=0.1):
    """Post-hoc band and nearest-anchor check for one synthesized keypoint.

    Same pose lists as :func:`classify_direct`. Strict inequalities mean a
    tie with another anchor never counts as "closer".
    """
    sg = COCO_SIGMAS[j]
    r_good, r_jit, r_miss = (radius(k, s, sg) for k in (k_good, k_jitter, k_miss))
    jp = COCO_FLIP.get(j)
    own, partner, other = None, None, []
    for person, pose in enumerate([target] + list(neighbors)):
        for role, joint in (("j", j), ("j'", jp)):
            if joint is None or pose[joint] is None:
                continue
            d = math.hypot(x - pose[joint][0], y - pose[joint][1])
            if person == 0 and role == "j":
                own = d
            elif person == 0:
                partner = d
            else:
                other.append(d)
    rest_target = [own] + ([partner] if partner is not None else [])
    if status in ("good", "jitter"):
        lo, hi = (0.0, r_good) if status == "good" else (r_good, r_jit)
        others = ([partner] if partner is not None else []) + other
        return lo <= own < hi and all(own < o for o in others)
    if status == "inversion":
        others = [own] + other
        return partner is not None and r_good <= partner < r_jit and all(partner < o for o in others)
    if status == "swap":
        return bool(other) and min(other) < min(rest_target) and min(other) < r_jit
    if status == "miss":
        everything = rest_target + other
        return min(everything) >= r_jit and min(everything) < r_miss
    raise ValueError(status)
