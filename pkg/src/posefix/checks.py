"""Self-checks behind ``posefix codec-check``: codec round trips and gradient checks.

Gradient checks compare analytic gradients with central finite differences
computed in float64. Points where a perturbation flips a ReLU or where a
coordinate error sits within ``kink_margin`` of the L1 kink are redrawn, since
the loss is not differentiable there.
"""

from __future__ import annotations

import math
from typing import Callable, NamedTuple, Sequence

import numpy as np

from . import nn
from .codec import gaussian_encode, integral_loss, mse_loss, soft_argmax, spatial_softmax, target_encode
from .refiner import RefinerConfig, backward, batch_loss, crop_to_heatmap, forward, network_input
from .rng import derive_rng
from .toy import ToyArrays


class CheckResult(NamedTuple):
    name: str
    passed: bool
    value: float  # the measured error
    tolerance: float
    detail: str = ""

    @classmethod
    def measure(cls, name: str, value: float, tolerance: float, detail: str = "") -> "CheckResult":
        value = float(value)
        return cls(name, bool(value < tolerance), value, float(tolerance), detail)

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.name}: {self.value:.3e} (tol {self.tolerance:.0e}) {self.detail}".rstrip()


def rel_err(a: float, n: float, floor: float = 1e-4) -> float:
    # below ``floor`` the comparison is absolute; central differences at
    # h = 1e-5 carry ~1e-10 of round-off and some true gradients are exactly 0
    return abs(a - n) / max(abs(a), abs(n), floor)


def check_target_roundtrip(n: int = 10_000, seed: int = 0, w: int = 24, h: int = 32, tol: float = 1e-9) -> CheckResult:
    """soft_argmax of the bilinear target recovers the in-grid coordinate."""
    rng = derive_rng(seed, "target-roundtrip")
    c = np.column_stack([rng.uniform(0, w - 1, n), rng.uniform(0, h - 1, n)])
    c[: min(n, 4)] = [[0, 0], [w - 1, h - 1], [0, h - 1], [w - 1, 0]][: min(n, 4)]
    err = 0.0
    for x, y in c:
        back = soft_argmax(target_encode((x, y), w, h))
        err = max(err, abs(back[0] - x), abs(back[1] - y))
    return CheckResult.measure("target_encode -> soft_argmax round trip", err, tol, f"{n} coords on {w}x{h}")


def check_gaussian_spots(tol: float = 1e-6) -> CheckResult:
    cases = []
    for sigma in (0.5, 1.0, 2.0, 3.5):
        g = gaussian_encode((10, 7), sigma, 24, 16)
        cases.append(abs(g[7, 10] - 1.0))
        # one sigma away along x, y and both axes
        cases.append(abs(g[7, 10] * math.exp(-0.5) - gaussian_encode((10 - sigma, 7), sigma, 24, 16)[7, 10]))
        cases.append(abs(gaussian_encode((10, 7 + sigma), sigma, 24, 16)[7, 10] - math.exp(-0.5)))
        cases.append(abs(gaussian_encode((10 + sigma, 7 + sigma), sigma, 24, 16)[7, 10] - math.exp(-1.0)))
    err = max(cases)
    return CheckResult.measure("gaussian_encode peak and 1-sigma values", err, tol)


def _fd(f: Callable[[], float], arr: np.ndarray, idx, h: float) -> float:
    old = arr[idx]
    arr[idx] = old + h
    fp = f()
    arr[idx] = old - h
    fm = f()
    arr[idx] = old
    return (fp - fm) / (2 * h)


def check_loss_gradient(seed: int = 0, mode: str = "integral", h: float = 1e-5, tol: float = 1e-5) -> CheckResult:
    """dL/dlogits of the integral (or MSE) loss against finite differences, float64."""
    rng = derive_rng(seed, "loss-grad", mode)
    n, hh, ww = 5, 8, 6
    z = rng.normal(0, 1.0, (n, hh, ww))
    cstar = np.column_stack([rng.uniform(0, ww - 1, n), rng.uniform(0, hh - 1, n)])
    t = np.stack([target_encode(c, ww, hh) for c in cstar])
    mask = np.ones(n, dtype=bool)
    mask[-1] = False

    if mode == "integral":
        # stay clear of the L1 kink
        c = soft_argmax(spatial_softmax(z))
        near = np.abs(c - cstar) < 1e-2
        cstar = cstar + np.where(near, 0.5, 0.0)

        def loss():
            return integral_loss(z, t, cstar, mask).total

        grad = integral_loss(z, t, cstar, mask).grad
    else:
        t = rng.random((n, hh, ww))

        def loss():
            return mse_loss(z, t, mask).total

        grad = mse_loss(z, t, mask).grad
    err = 0.0
    for idx in np.ndindex(z.shape):
        err = max(err, rel_err(grad[idx], _fd(loss, z, idx, h)))
    return CheckResult.measure(f"{mode} loss gradient wrt logits (float64)", err, tol, f"{z.size} entries")


def miniature_setup(seed: int = 0, loss_mode: str = "C2F", dtype: str = "float64", batch: int = 2, joints: int = 2):
    """Two-conv network on 6x8 maps with a random batch; returns (config, params, batch)."""
    cfg = RefinerConfig(
        input_size=(6, 8), heatmap_size=(6, 8), widths=(4,), architecture="mini", num_joints=joints,
        init_std=0.5, loss_mode=loss_mode, dtype=dtype, input_sigma=1.5,
    )
    rng = derive_rng(seed, "mini-net", loss_mode)
    params = nn.init_params(cfg.layers(), rng, cfg.init_std, np.float64)
    for k in params:
        if k.endswith(".bias"):
            params[k] = rng.normal(0, 0.1, params[k].shape)
    data = ToyArrays(
        rng.random((batch, 3, 8, 6)),
        np.column_stack([rng.uniform(0, 5, batch * joints), rng.uniform(0, 7, batch * joints)]).reshape(batch, joints, 2),
        np.ones((batch, joints), dtype=bool),
        np.column_stack([rng.uniform(0, 5, batch * joints), rng.uniform(0, 7, batch * joints)]).reshape(batch, joints, 2),
        np.ones((batch, joints), dtype=bool),
        np.ones(batch),
    )
    return cfg, params, data


def _loss64(params, data: ToyArrays, cfg: RefinerConfig) -> float:
    logits, _ = forward(params, data.images, (data.in_xy, data.in_labeled), cfg)
    return batch_loss(logits, data.gt_xy, data.gt_labeled, cfg)[0].total


def _smooth_at(params, data, cfg, name, idx, h, kink_margin) -> bool:
    """True when +-h around the point keeps every ReLU and L1 sign fixed."""
    x = network_input(data.images, data.in_xy, data.in_labeled, cfg)
    arr = params[name]
    old = arr[idx]
    patterns = []
    for d in (-h, 0.0, h):
        arr[idx] = old + d
        patterns.append(nn.relu_masks(params, cfg.layers(), x))
    arr[idx] = old
    for a, b in zip(patterns[0], patterns[2]):
        if not np.array_equal(a, b):
            return False
    if cfg.loss_mode != "C2C":
        logits, _ = forward(params, data.images, (data.in_xy, data.in_labeled), cfg)
        c = soft_argmax(spatial_softmax(logits.reshape(-1, *logits.shape[2:])))
        cstar = crop_to_heatmap(data.gt_xy.reshape(-1, 2), cfg.stride)
        if np.any(np.abs(c - cstar) < kink_margin):
            return False
    return True


def check_network_gradient(
    seed: int = 0,
    n_params: int = 20,
    loss_mode: str = "C2F",
    dtype: str = "float64",
    h: float = 1e-5,
    tol: float | None = None,
    kink_margin: float = 1e-3,
    floor: float = 1e-4,
) -> CheckResult:
    """Full backward pass of the miniature refiner against float64 finite differences.

    With ``dtype="float32"`` the analytic gradient is computed in 32-bit and
    compared to the 64-bit finite-difference reference. Head biases get an
    exactly zero gradient under the softmax, hence the absolute ``floor``.
    """
    tol = tol if tol is not None else (1e-5 if dtype == "float64" else 1e-3)
    cfg64, params, data = miniature_setup(seed, loss_mode, "float64")
    cfg = RefinerConfig.from_dict({**cfg64.to_dict(), "dtype": dtype})
    p_an = {k: v.astype(cfg.np_dtype) for k, v in params.items()}
    d_an = ToyArrays(data.images.astype(cfg.np_dtype), data.gt_xy, data.gt_labeled, data.in_xy, data.in_labeled, data.scale)
    _, grads = backward(p_an, d_an, cfg)
    rng = derive_rng(seed, "grad-pick", loss_mode)
    names = sorted(params)
    sizes = np.array([params[k].size for k in names], dtype=float)
    err, checked, tries = 0.0, 0, 0
    while checked < n_params and tries < 50 * n_params:
        tries += 1
        name = names[rng.choice(len(names), p=sizes / sizes.sum())]
        idx = tuple(int(rng.integers(s)) for s in params[name].shape)
        if not _smooth_at(params, data, cfg64, name, idx, h, kink_margin):
            continue
        num = _fd(lambda: _loss64(params, data, cfg64), params[name], idx, h)
        err = max(err, rel_err(float(grads[name][idx]), num, floor))
        checked += 1
    ok = bool(checked == n_params and err < tol)
    return CheckResult(
        f"{loss_mode} miniature network gradient ({dtype})", ok, float(err), tol, f"{checked} params, {tries - checked} redrawn"
    )


def run_codec_checks(seed: int = 0, quick: bool = False) -> list[CheckResult]:
    n = 1000 if quick else 10_000
    out = [check_target_roundtrip(n, seed), check_gaussian_spots()]
    out.append(check_loss_gradient(seed, "integral"))
    out.append(check_loss_gradient(seed, "mse"))
    for mode in ("C2F", "C2F_LH_only", "C2F_LC_only", "C2C"):
        out.append(check_network_gradient(seed, loss_mode=mode))
    out.append(check_network_gradient(seed, loss_mode="C2F", dtype="float32"))
    return out


def format_report(results: Sequence[CheckResult]) -> str:
    lines = [r.line() for r in results]
    passed = sum(r.passed for r in results)
    lines.append(f"{passed}/{len(results)} checks passed")
    return "\n".join(lines) + "\n"
