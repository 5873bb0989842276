"""Differentiable layer primitives for the U-Net variants.

Convolution is implemented as cross-correlation (no kernel flip) with
stride 1 and either 'same' or 'valid' padding, via an im2col matmul so
the inner loop is BLAS. Even kernels pad asymmetrically in 'same' mode:
the left/top side gets floor((k-1)/2), the remainder goes right/bottom.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, record

__all__ = [
    "ConvParams",
    "DropConnectState",
    "he_uniform_conv",
    "conv2d",
    "elu",
    "relu",
    "maxpool2",
    "upsample2",
    "crop_center",
    "concat_channels",
    "drop_connect",
]

PADDING_MODES = ("same", "valid")


@dataclass
class ConvParams:
    """One conv layer's learnables. weight is (C_out, C_in, k, k); the
    per-output-channel bias is stored (1, C_out, 1, 1) so it broadcasts."""

    weight: Tensor
    bias: Tensor
    padding_mode: str = "same"

    def __post_init__(self):
        co, ci, kh, kw = self.weight.shape
        if kh != kw:
            raise ValueError(f"conv kernel must be square, got {kh}x{kw}")
        if self.bias.shape != (1, co, 1, 1):
            raise ValueError(
                f"bias shape {self.bias.shape} does not match {co} output channels"
            )
        if self.padding_mode not in PADDING_MODES:
            raise ValueError(f"unknown padding mode {self.padding_mode!r}")

    @property
    def kernel_size(self) -> int:
        return self.weight.shape[2]


def he_uniform_conv(c_in: int, c_out: int, k: int, rng: np.random.Generator,
                    padding_mode: str = "same") -> ConvParams:
    """He-uniform fan-in init: U(-L, L), L = sqrt(6 / (C_in * k * k)).
    Bias starts at zero."""
    limit = np.sqrt(6.0 / (c_in * k * k))
    w = rng.uniform(-limit, limit, (c_out, c_in, k, k))
    return ConvParams(
        weight=Tensor(w, requires_grad=True),
        bias=Tensor(np.zeros((1, c_out, 1, 1)), requires_grad=True),
        padding_mode=padding_mode,
    )


def conv2d(x: Tensor, p: ConvParams) -> Tensor:
    n, c, h, w = x.shape
    co, ci, k, _ = p.weight.shape
    if c != ci:
        raise ValueError(f"conv2d: input has {c} channels, weight expects {ci}")
    if p.padding_mode == "same":
        pt = (k - 1) // 2
        pb = (k - 1) - pt
        xp = np.pad(x.data, ((0, 0), (0, 0), (pt, pb), (pt, pb)))
    else:
        if h < k or w < k:
            raise ValueError(f"conv2d: {h}x{w} input too small for k={k} valid conv")
        pt = pb = 0
        xp = x.data
    ho, wo = xp.shape[2] - k + 1, xp.shape[3] - k + 1
    # (N, Cin, Ho, Wo, k, k) view, flattened to rows of receptive fields
    cols = sliding_window_view(xp, (k, k), axis=(2, 3))
    mat = cols.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, ci * k * k)
    wmat = p.weight.data.reshape(co, ci * k * k)
    out_mat = mat @ wmat.T
    out = np.ascontiguousarray(
        out_mat.reshape(n, ho, wo, co).transpose(0, 3, 1, 2)
    ) + p.bias.data
    result = Tensor(out)

    def bwd(g):
        gm = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, co)
        dw = (gm.T @ mat).reshape(p.weight.shape)
        db = g.sum(axis=(0, 2, 3)).reshape(1, co, 1, 1)
        dcols = (gm @ wmat).reshape(n, ho, wo, ci, k, k).transpose(0, 3, 1, 2, 4, 5)
        dxp = np.zeros_like(xp)
        for u in range(k):
            for v in range(k):
                dxp[:, :, u:u + ho, v:v + wo] += dcols[:, :, :, :, u, v]
        if p.padding_mode == "same":
            dx = dxp[:, :, pt:pt + h, pt:pt + w]
        else:
            dx = dxp
        return dx, dw, db

    return record(result, (x, p.weight, p.bias), bwd)


def elu(x: Tensor, alpha: float = 1.0) -> Tensor:
    if alpha <= 0:
        raise ValueError(f"elu: alpha must be positive, got {alpha}")
    pos = x.data > 0
    y = np.where(pos, x.data, alpha * np.expm1(x.data))
    out = Tensor(y)
    # derivative on the x <= 0 branch is alpha*exp(x) = y + alpha there
    return record(out, (x,), lambda g: (g * np.where(pos, 1.0, y + alpha),))


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    out = Tensor(np.where(pos, x.data, 0.0))
    return record(out, (x,), lambda g: (g * pos,))


def maxpool2(x: Tensor) -> tuple[Tensor, np.ndarray]:
    """2x2 max pooling, stride 2. Returns (pooled, argmax indices).

    Indices are 0..3 in row-major window order; ties keep the first
    position in that scan, and the gradient is routed there alone.
    """
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"maxpool2: spatial dims must be even, got {h}x{w}")
    ho, wo = h // 2, w // 2
    windows = x.data.reshape(n, c, ho, 2, wo, 2).transpose(0, 1, 2, 4, 3, 5)
    flat = windows.reshape(n, c, ho, wo, 4)
    idx = flat.argmax(axis=4)
    out = Tensor(np.take_along_axis(flat, idx[..., None], axis=4)[..., 0])

    def bwd(g):
        dflat = np.zeros_like(flat)
        np.put_along_axis(dflat, idx[..., None], g[..., None], axis=4)
        dx = dflat.reshape(n, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return (np.ascontiguousarray(dx.reshape(n, c, h, w)),)

    return record(out, (x,), bwd), idx.copy()


def upsample2(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling; each pixel becomes a 2x2 block."""
    n, c, h, w = x.shape
    out = Tensor(np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3))

    def bwd(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return record(out, (x,), bwd)


def crop_center(x: Tensor, target_h: int, target_w: int) -> Tensor:
    """Center crop; odd excess leaves the extra row/column at the
    bottom/right (the top/left offset is floor(excess / 2))."""
    n, c, h, w = x.shape
    if target_h > h or target_w > w or target_h < 1 or target_w < 1:
        raise ValueError(f"crop_center: cannot crop {h}x{w} to {target_h}x{target_w}")
    top = (h - target_h) // 2
    left = (w - target_w) // 2
    out = Tensor(x.data[:, :, top:top + target_h, left:left + target_w].copy())

    def bwd(g):
        dx = np.zeros_like(x.data)
        dx[:, :, top:top + target_h, left:left + target_w] = g
        return (dx,)

    return record(out, (x,), bwd)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ValueError(
            f"concat_channels: {a.shape} and {b.shape} differ outside the channel axis"
        )
    ca = a.shape[1]
    out = Tensor(np.concatenate([a.data, b.data], axis=1))
    return record(out, (a, b), lambda g: (g[:, :ca].copy(), g[:, ca:].copy()))


@dataclass
class DropConnectState:
    """Per-application drop-connect configuration. rate is the drop
    probability; surviving weights are scaled by 1/(1-rate) so the
    expected weight is unchanged."""

    rate: float
    mode: str = "train"
    rng_seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.rate < 1.0:
            raise ValueError(f"drop rate must be in [0, 1), got {self.rate}")
        if self.mode not in ("train", "infer"):
            raise ValueError(f"unknown mode {self.mode!r}")


def drop_connect(p: ConvParams, state: DropConnectState) -> ConvParams:
    """Randomly zero individual conv weights during training.

    The mask depends only on (rng_seed, weight shape), so a fixed seed
    replays bit-identically. Inference and rate 0 return p untouched.
    Gradients flow through the mask to the original weight tensor.
    """
    if state.mode == "infer" or state.rate == 0.0:
        return p
    rng = np.random.default_rng(state.rng_seed)
    keep = rng.random(p.weight.shape) >= state.rate
    mask = keep / (1.0 - state.rate)
    masked = p.weight * Tensor(mask)
    return replace(p, weight=masked)
