"""Normalization zoo: four moment partitions plus two learnable blends.

All kinds share one recipe: standardize x with mean/variance taken over
some partition of (N, C, H, W), then apply a per-channel affine pair
gamma, beta. The kinds differ only in which partition supplies the
moments and in whether running statistics exist:

  batch     -- moments over (N, H, W) per channel; keeps an EMA of the
               batch moments and uses it at inference.
  layer     -- moments over (C, H, W) per sample; current input always.
  instance  -- moments over (H, W) per (sample, channel); current always.
  group     -- moments over (C/G, H, W) per (sample, group); current.

The blend kinds compute two standardized maps and mix them per channel
before the shared affine:

    y_hat = r * batch_hat + (1 - r) * other_hat,  r = sigmoid(blend_logit)

with other = group ('blend_group_batch') or instance
('blend_instance_batch'). The ratio r is a learnable per-channel
parameter trained by gradient descent like everything else; the batch
side keeps running statistics exactly as the pure batch kind does.

Blending happens on the pre-affine standardized maps, and a single
gamma/beta pair is applied after the mix.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, moments, sigmoid, sqrt

__all__ = [
    "NORM_KINDS",
    "NormSpec",
    "NormState",
    "init_norm_state",
    "normalize",
    "update_running",
    "blend_ratio",
]

NORM_KINDS = (
    "batch",
    "layer",
    "instance",
    "group",
    "blend_group_batch",
    "blend_instance_batch",
)

# kinds that keep running statistics for inference
_TRACKS_RUNNING = ("batch", "blend_group_batch", "blend_instance_batch")
_BLEND_PARTNER = {"blend_group_batch": "group", "blend_instance_batch": "instance"}
_NEEDS_GROUPS = ("group", "blend_group_batch")


@dataclass(frozen=True)
class NormSpec:
    kind: str
    channels: int
    groups: int = 8
    epsilon: float = 1e-5
    momentum: float = 0.9

    def __post_init__(self):
        if self.kind not in NORM_KINDS:
            raise ValueError(f"unknown normalization kind {self.kind!r}")
        if self.channels < 1:
            raise ValueError(f"channels must be positive, got {self.channels}")
        if self.kind in _NEEDS_GROUPS:
            if self.groups < 1 or self.channels % self.groups != 0:
                raise ValueError(
                    f"{self.groups} groups do not divide {self.channels} channels"
                )
        if self.epsilon <= 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if not 0.0 < self.momentum < 1.0:
            raise ValueError(f"momentum must lie in (0, 1), got {self.momentum}")


class NormState:
    """Learnables plus (for batch-statistic kinds) running moments.

    gamma/beta are (1, C, 1, 1) tensors initialized to 1/0. blend kinds
    also carry blend_logit, initialized to 0 so the mix starts at 1:1.
    running_mean/var stay None until the first training batch.
    """

    def __init__(self, gamma: Tensor, beta: Tensor, blend_logit: Tensor | None = None):
        self.gamma = gamma
        self.beta = beta
        self.blend_logit = blend_logit
        self.running_mean: np.ndarray | None = None
        self.running_var: np.ndarray | None = None


def init_norm_state(spec: NormSpec) -> NormState:
    c = spec.channels
    gamma = Tensor(np.ones((1, c, 1, 1)), requires_grad=True)
    beta = Tensor(np.zeros((1, c, 1, 1)), requires_grad=True)
    logit = None
    if spec.kind in _BLEND_PARTNER:
        logit = Tensor(np.zeros((1, c, 1, 1)), requires_grad=True)
    return NormState(gamma, beta, logit)


def update_running(state: NormState, batch_mean: np.ndarray, batch_var: np.ndarray,
                   momentum: float) -> NormState:
    """EMA update; the very first call copies the batch moments outright
    so early inference is not biased toward zero."""
    if state.running_mean is None:
        state.running_mean = batch_mean.copy()
        state.running_var = batch_var.copy()
    else:
        state.running_mean = momentum * state.running_mean + (1.0 - momentum) * batch_mean
        state.running_var = momentum * state.running_var + (1.0 - momentum) * batch_var
    return state


def blend_ratio(state: NormState) -> Tensor:
    """Per-channel mixing ratio sigmoid(blend_logit) of a blend kind."""
    if state.blend_logit is None:
        raise ValueError("blend_ratio: state has no blend parameter (not a blend kind)")
    return sigmoid(state.blend_logit)


def _standardize_current(x: Tensor, partition: str, spec: NormSpec) -> Tensor:
    mean, var = moments(x, partition, groups=spec.groups if partition == "group" else None)
    return (x - mean) / sqrt(var + spec.epsilon)


def _standardize_batch(x: Tensor, spec: NormSpec, state: NormState, mode: str) -> Tensor:
    if mode == "train":
        mean, var = moments(x, "batch")
        update_running(state, mean.data, var.data, spec.momentum)
        return (x - mean) / sqrt(var + spec.epsilon)
    if state.running_mean is None:
        raise ValueError(
            "normalize: batch statistics uninitialized; run at least one training batch"
        )
    rm = Tensor(state.running_mean)
    rv = Tensor(state.running_var)
    return (x - rm) / sqrt(rv + spec.epsilon)


def normalize(x: Tensor, spec: NormSpec, state: NormState, mode: str = "train") -> Tensor:
    """Standardize x per spec.kind, then apply the shared gamma/beta.

    mode selects between batch statistics sources for the batch-tracking
    kinds; layer/instance/group always standardize with the current
    input, so for them train and infer are identical.
    """
    if mode not in ("train", "infer"):
        raise ValueError(f"unknown mode {mode!r}")
    if x.shape[1] != spec.channels:
        raise ValueError(
            f"normalize: input has {x.shape[1]} channels, spec expects {spec.channels}"
        )
    kind = spec.kind
    if kind == "batch":
        x_hat = _standardize_batch(x, spec, state, mode)
    elif kind in ("layer", "instance", "group"):
        x_hat = _standardize_current(x, kind, spec)
    else:
        batch_hat = _standardize_batch(x, spec, state, mode)
        other_hat = _standardize_current(x, _BLEND_PARTNER[kind], spec)
        r = sigmoid(state.blend_logit)
        x_hat = r * batch_hat + (1.0 - r) * other_hat
    return state.gamma * x_hat + state.beta
