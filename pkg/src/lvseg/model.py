"""U-Net assembly: encoder/decoder with a pluggable normalization variant.

Architecture, fixed across variants:

  encoder      depth x { [conv -> norm -> act] x2, then 2x2 maxpool }
  bottleneck   one [conv -> norm -> act] x2 block
  decoder      depth x { upsample 2x, conv, (crop skip in valid mode),
                         concat skip, [conv -> norm -> act] x2 }
  head         1x1 conv to out_channels, raw logits

Channel width doubles per level from base_channels. The five variants
differ only in which normalization sits after each double-conv conv:

  unet  none            bnu  batch            lnu  layer
  gbu   blend_group_batch at every site
  ibu   blend_instance_batch in the first encoder block, batch elsewhere

Up-convs and the head are bare (no norm, no activation). Drop-connect,
when enabled, masks the weights of every conv except the head.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layers import (
    ConvParams,
    DropConnectState,
    concat_channels,
    conv2d,
    crop_center,
    drop_connect,
    elu,
    he_uniform_conv,
    maxpool2,
    relu,
    upsample2,
)
from .norm import NormSpec, NormState, init_norm_state, normalize
from .tensor import Tensor

__all__ = ["VARIANTS", "ACTIVATIONS", "UNetSpec", "ModelState", "build", "forward"]

VARIANTS = ("unet", "bnu", "lnu", "ibu", "gbu")
ACTIVATIONS = ("elu", "relu")


@dataclass(frozen=True)
class UNetSpec:
    depth: int = 4
    base_channels: int = 16
    kernel_size: int = 3
    padding_mode: str = "same"
    variant: str = "unet"
    activation: str = "elu"
    dropconnect_rate: float = 0.1
    in_channels: int = 1
    out_channels: int = 1
    groups: int = 8

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError(f"depth must be at least 1, got {self.depth}")
        if self.base_channels < 1:
            raise ValueError(f"base_channels must be positive, got {self.base_channels}")
        if self.kernel_size not in (2, 3):
            raise ValueError(f"kernel_size must be 2 or 3, got {self.kernel_size}")
        if self.padding_mode not in ("same", "valid"):
            raise ValueError(f"unknown padding mode {self.padding_mode!r}")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if not 0.0 <= self.dropconnect_rate < 1.0:
            raise ValueError(f"dropconnect_rate must be in [0, 1), got {self.dropconnect_rate}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("in/out channel counts must be positive")
        if self.variant == "gbu":
            for ch in self.level_channels():
                if ch % self.groups != 0:
                    raise ValueError(
                        f"variant 'gbu' needs {self.groups} groups to divide every "
                        f"level width; {ch} channels at one level do not"
                    )

    def level_channels(self) -> list[int]:
        """Widths per level, encoder top to bottleneck."""
        return [self.base_channels * (2 ** i) for i in range(self.depth + 1)]


def _site_norm_kind(variant: str, block: str) -> str | None:
    if variant == "unet":
        return None
    if variant == "bnu":
        return "batch"
    if variant == "lnu":
        return "layer"
    if variant == "gbu":
        return "blend_group_batch"
    # ibu: the instance/batch blend sits only in the first encoder block
    return "blend_instance_batch" if block == "enc0" else "batch"


class ModelState:
    """All learnables of one built network, addressable by name.

    convs maps site names like 'enc0.conv1' or 'dec2.up' to ConvParams;
    norms maps 'enc0.norm1'-style names to (NormSpec, NormState). The
    params dict flattens everything into ordered name -> Tensor entries
    ('enc0.conv0.weight', 'enc0.norm0.gamma', ...) shared with the
    structures above, which is what the optimizer and checkpoints use.
    """

    def __init__(self):
        self.convs: dict[str, ConvParams] = {}
        self.norms: dict[str, tuple[NormSpec, NormState]] = {}
        self.params: dict[str, Tensor] = {}

    def _add_conv(self, name: str, p: ConvParams):
        self.convs[name] = p
        self.params[f"{name}.weight"] = p.weight
        self.params[f"{name}.bias"] = p.bias

    def _add_norm(self, name: str, spec: NormSpec, state: NormState):
        self.norms[name] = (spec, state)
        self.params[f"{name}.gamma"] = state.gamma
        self.params[f"{name}.beta"] = state.beta
        if state.blend_logit is not None:
            self.params[f"{name}.blend_logit"] = state.blend_logit

    def named_running(self) -> list[tuple[str, NormState]]:
        """Norm sites that track running statistics, in build order."""
        return [
            (name, state)
            for name, (spec, state) in self.norms.items()
            if spec.kind in ("batch", "blend_group_batch", "blend_instance_batch")
        ]

    def parameter_count(self) -> int:
        return sum(t.data.size for t in self.params.values())

    def export_arrays(self) -> dict:
        """Deep copies of every learnable and running statistic."""
        return {
            "params": {k: t.data.copy() for k, t in self.params.items()},
            "running": {
                name: (
                    None if st.running_mean is None else st.running_mean.copy(),
                    None if st.running_var is None else st.running_var.copy(),
                )
                for name, st in self.named_running()
            },
        }

    def import_arrays(self, snap: dict):
        for k, t in self.params.items():
            t.data[:] = snap["params"][k]
        for name, st in self.named_running():
            rm, rv = snap["running"][name]
            st.running_mean = None if rm is None else rm.copy()
            st.running_var = None if rv is None else rv.copy()


def build(spec: UNetSpec, seed: int = 0) -> ModelState:
    """Initialize a network: He-uniform conv weights drawn in a fixed
    order from one seeded generator, zero biases, identity affines."""
    rng = np.random.default_rng(seed)
    m = ModelState()
    ch = spec.level_channels()
    k, pad = spec.kernel_size, spec.padding_mode

    def add_double(block: str, c_in: int, c_out: int):
        kind = _site_norm_kind(spec.variant, block)
        for j, ci in enumerate((c_in, c_out)):
            m._add_conv(f"{block}.conv{j}", he_uniform_conv(ci, c_out, k, rng, pad))
            if kind is not None:
                nspec = NormSpec(kind, c_out, groups=spec.groups)
                m._add_norm(f"{block}.norm{j}", nspec, init_norm_state(nspec))

    prev = spec.in_channels
    for i in range(spec.depth):
        add_double(f"enc{i}", prev, ch[i])
        prev = ch[i]
    add_double("bottleneck", prev, ch[spec.depth])
    for i in reversed(range(spec.depth)):
        m._add_conv(f"dec{i}.up", he_uniform_conv(ch[i + 1], ch[i], k, rng, pad))
        add_double(f"dec{i}", 2 * ch[i], ch[i])
    m._add_conv("head", he_uniform_conv(ch[0], spec.out_channels, 1, rng, pad))
    return m


def _mix_seed(seed: int, index: int) -> int:
    # splitmix-style spread so per-site masks are decorrelated
    return (seed * 0x9E3779B97F4A7C15 + index * 0xBF58476D1CE4E5B9 + 1) % (2 ** 63)


def forward(m: ModelState, spec: UNetSpec, x: Tensor, mode: str = "infer",
            dropconnect_seed: int | None = None) -> Tensor:
    """Run the network; returns logits.

    In train mode, batch-statistic norms consume the current batch (and
    update their running moments), and drop-connect masks are applied
    with seeds derived from (dropconnect_seed, site index) so a fixed
    seed replays exactly. In infer mode both are inert.
    """
    if mode not in ("train", "infer"):
        raise ValueError(f"unknown mode {mode!r}")
    if x.shape[1] != spec.in_channels:
        raise ValueError(f"forward: input has {x.shape[1]} channels, spec "
                         f"expects {spec.in_channels}")
    if spec.padding_mode == "same":
        div = 2 ** spec.depth
        if x.shape[2] % div or x.shape[3] % div:
            raise ValueError(
                f"forward: same-padding expects H and W divisible by {div}, "
                f"got {x.shape[2]}x{x.shape[3]}"
            )
    act = elu if spec.activation == "elu" else relu
    dropping = mode == "train" and spec.dropconnect_rate > 0.0
    base_seed = 0 if dropconnect_seed is None else dropconnect_seed
    site = 0

    def conv_site(name: str, t: Tensor) -> Tensor:
        nonlocal site
        p = m.convs[name]
        if dropping:
            p = drop_connect(
                p,
                DropConnectState(spec.dropconnect_rate, "train",
                                 _mix_seed(base_seed, site)),
            )
        site += 1
        return conv2d(t, p)

    def double_block(block: str, t: Tensor) -> Tensor:
        for j in (0, 1):
            t = conv_site(f"{block}.conv{j}", t)
            norm = m.norms.get(f"{block}.norm{j}")
            if norm is not None:
                t = normalize(t, norm[0], norm[1], mode)
            t = act(t)
        return t

    skips = []
    t = x
    for i in range(spec.depth):
        t = double_block(f"enc{i}", t)
        skips.append(t)
        t, _ = maxpool2(t)
    t = double_block("bottleneck", t)
    for i in reversed(range(spec.depth)):
        t = upsample2(t)
        t = conv_site(f"dec{i}.up", t)
        skip = skips[i]
        if spec.padding_mode == "valid":
            skip = crop_center(skip, t.shape[2], t.shape[3])
        t = concat_channels(skip, t)
        t = double_block(f"dec{i}", t)
    # the 1x1 head never gets drop-connect: it is the only path to the
    # logits and masking it would blank whole output channels
    return conv2d(t, m.convs["head"])
