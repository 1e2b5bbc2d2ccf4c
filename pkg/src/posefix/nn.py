"""Minimal convolutional network with hand-written reverse mode.

Activations are kept NHWC internally; weights are ``(out, in, kh, kw)``.
Everything is dtype-generic so gradient checks can run in float64 while
training runs in float32.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class Layer:
    kind: str  # "conv" | "relu" | "up"
    cin: int = 0
    cout: int = 0
    k: int = 1
    stride: int = 1
    name: str = ""


def toy_architecture(in_ch: int, out_ch: int, widths: Sequence[int] = (32, 64)) -> list[Layer]:
    """conv3x3/2 -> conv3x3/2 -> 2x conv3x3 -> nearest up x2 -> conv3x3 -> conv1x1.

    Output resolution is half the input resolution.
    """
    w0, w1 = widths
    return [
        Layer("conv", in_ch, w0, 3, 2, "conv0"),
        Layer("relu"),
        Layer("conv", w0, w1, 3, 2, "conv1"),
        Layer("relu"),
        Layer("conv", w1, w1, 3, 1, "conv2"),
        Layer("relu"),
        Layer("conv", w1, w1, 3, 1, "conv3"),
        Layer("relu"),
        Layer("up", stride=2),
        Layer("conv", w1, w0, 3, 1, "conv4"),
        Layer("relu"),
        Layer("conv", w0, out_ch, 1, 1, "head"),
    ]


def mini_architecture(in_ch: int, out_ch: int, widths: Sequence[int] = (4,)) -> list[Layer]:
    """Two-conv network at full resolution, for gradient checks."""
    return [
        Layer("conv", in_ch, widths[0], 3, 1, "conv0"),
        Layer("relu"),
        Layer("conv", widths[0], out_ch, 1, 1, "head"),
    ]


ARCHITECTURES = {"toy": toy_architecture, "mini": mini_architecture}


def output_stride(layers: Sequence[Layer]) -> int:
    s = 1.0
    for layer in layers:
        if layer.kind == "conv":
            s *= layer.stride
        elif layer.kind == "up":
            s /= layer.stride
    if s != int(s):
        raise ValueError("architecture upsamples past the input resolution")
    return int(s)


def init_params(layers: Sequence[Layer], rng: np.random.Generator, std: float = 0.01, dtype=np.float32) -> dict[str, np.ndarray]:
    """Zero-mean Gaussian weights with standard deviation ``std``; zero biases."""
    params: dict[str, np.ndarray] = {}
    for layer in layers:
        if layer.kind == "conv":
            params[layer.name + ".weight"] = (rng.standard_normal((layer.cout, layer.cin, layer.k, layer.k)) * std).astype(dtype)
            params[layer.name + ".bias"] = np.zeros(layer.cout, dtype=dtype)
    return params


def zero_params(layers: Sequence[Layer], dtype=np.float32) -> dict[str, np.ndarray]:
    return {k: np.zeros_like(v) for k, v in init_params(layers, np.random.default_rng(0), dtype=dtype).items()}


def _im2col(xp: np.ndarray, kh: int, kw: int, ho: int, wo: int, stride: int) -> np.ndarray:
    n, _, _, c = xp.shape
    cols = np.empty((n, ho, wo, kh, kw, c), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j] = xp[:, i : i + (ho - 1) * stride + 1 : stride, j : j + (wo - 1) * stride + 1 : stride]
    return cols.reshape(n * ho * wo, kh * kw * c)


def conv_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int):
    n, h, wd, c = x.shape
    o, _, kh, kw = w.shape
    p = kh // 2
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0))) if p else x
    ho = (h + 2 * p - kh) // stride + 1
    wo = (wd + 2 * p - kw) // stride + 1
    # column order (kh, kw, c) keeps channel blocks contiguous
    cols = _im2col(xp, kh, kw, ho, wo, stride) if kh > 1 or stride > 1 else x.reshape(-1, c)
    out = cols @ w.transpose(0, 2, 3, 1).reshape(o, -1).T
    out += b
    return out.reshape(n, ho, wo, o), (cols, x.shape, stride)


def conv_backward(dout: np.ndarray, w: np.ndarray, cache, need_dx: bool = True):
    cols, xshape, stride = cache
    n, h, wd, c = xshape
    o, _, kh, kw = w.shape
    p = kh // 2
    _, ho, wo, _ = dout.shape
    d2 = dout.reshape(-1, o)
    wm = w.transpose(0, 2, 3, 1).reshape(o, -1)
    dw = (d2.T @ cols).reshape(o, kh, kw, c).transpose(0, 3, 1, 2)
    db = d2.sum(axis=0)
    if not need_dx:
        return None, dw, db
    if stride == 1:
        # same-padded stride-1 conv: dx is dout convolved with the flipped, transposed kernel
        wf = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
        dx, _ = conv_forward(dout, wf, np.zeros(c, dtype=dout.dtype), 1)
        return dx, dw, db
    dcols = (d2 @ wm).reshape(n, ho, wo, kh, kw, c)
    dxp = np.zeros((n, h + 2 * p, wd + 2 * p, c), dtype=dout.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, i : i + (ho - 1) * stride + 1 : stride, j : j + (wo - 1) * stride + 1 : stride] += dcols[:, :, :, i, j]
    dx = dxp[:, p : p + h, p : p + wd] if p else dxp
    return dx, dw, db


def forward(params: dict[str, np.ndarray], layers: Sequence[Layer], x: np.ndarray, keep_cache: bool = True):
    """Run ``x`` (NCHW) through the stack; returns NCHW output and a backward cache."""
    h = np.ascontiguousarray(x.transpose(0, 2, 3, 1))
    caches = []
    for layer in layers:
        if layer.kind == "conv":
            h, c = conv_forward(h, params[layer.name + ".weight"], params[layer.name + ".bias"], layer.stride)
            caches.append(c if keep_cache else None)
        elif layer.kind == "relu":
            mask = h > 0
            h = h * mask
            caches.append(mask if keep_cache else None)
        elif layer.kind == "up":
            s = layer.stride
            h = h.repeat(s, axis=1).repeat(s, axis=2)
            caches.append(None)
        else:
            raise ValueError(f"unknown layer kind {layer.kind!r}")
    return h.transpose(0, 3, 1, 2), caches


def backward(params: dict[str, np.ndarray], layers: Sequence[Layer], caches, dout: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss w.r.t. every parameter, given dloss/doutput (NCHW)."""
    g = np.ascontiguousarray(dout.transpose(0, 2, 3, 1))
    grads: dict[str, np.ndarray] = {}
    first = next(i for i, layer in enumerate(layers) if layer.kind == "conv")
    for i in range(len(layers) - 1, -1, -1):
        layer, cache = layers[i], caches[i]
        if layer.kind == "conv":
            g, dw, db = conv_backward(g, params[layer.name + ".weight"], cache, need_dx=i > first)
            grads[layer.name + ".weight"] = dw
            grads[layer.name + ".bias"] = db
        elif layer.kind == "relu":
            g = g * cache
        elif layer.kind == "up":
            s = layer.stride
            n, h, w, c = g.shape
            g = g.reshape(n, h // s, s, w // s, s, c).sum(axis=(2, 4))
    return grads


def relu_masks(params, layers, x) -> list[np.ndarray]:
    """Sign pattern of every ReLU input; used to keep finite differences off kinks."""
    _, caches = forward(params, layers, x)
    return [c for layer, c in zip(layers, caches) if layer.kind == "relu"]


def receptive_mask(layers: Sequence[Layer], in_hw: tuple[int, int], pixel: tuple[int, int]) -> np.ndarray:
    """Output cells ``(h_out, w_out)`` whose value can depend on input ``pixel = (y, x)``."""
    h, w = in_hw
    m = np.zeros((1, h, w, 1))
    m[0, pixel[0], pixel[1], 0] = 1.0
    for layer in layers:
        if layer.kind == "conv":
            ones = np.ones((1, 1, layer.k, layer.k))
            m, _ = conv_forward(m, ones, np.zeros(1), layer.stride)
            m = (m > 0).astype(np.float64)
        elif layer.kind == "up":
            m = m.repeat(layer.stride, axis=1).repeat(layer.stride, axis=2)
    return m[0, :, :, 0] > 0


class Adam:
    """Adam with bias correction; state lives alongside the params it updates."""

    def __init__(self, params: dict[str, np.ndarray], lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1**self.t
        c2 = 1 - b2**self.t
        for k, g in grads.items():
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            params[k] -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(params[k].dtype)
