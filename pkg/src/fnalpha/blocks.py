"""Composite network blocks.

The centerpiece is :class:`GroupAttentionBlock`: a 1x1 entry conv whose
output is split into four equal channel groups; groups 0 and 2 learn
per-pixel sigmoid attention maps that gate the residual feature groups 1
and 3 to their right. Gated pair outputs pass a per-pair 1x1 conv with
twice the group width, are concatenated back to the body width, combined
(shared-weight 1x1 conv or a fixed channel shuffle), recalibrated by
squeeze-and-excitation, and added to the entry conv output.

Bias convention across every block here: only sigmoid-gated 1x1 convs
carry a bias; all other convs are bias-free (they feed batch norm or an
additive combine).
"""

from __future__ import annotations

import copy

import numpy as np

from .nn import BatchNorm2d, Conv2d, Dense, Module
from .tensor import (
    Tensor,
    concat_channels,
    global_avg_pool,
    leaky_relu,
    matmul,
    permute_channels,
    relu,
    scale_channels,
    sigmoid,
    slice_channels,
)

__all__ = [
    "SqueezeExcite",
    "AttentionModule",
    "AttentionSubblock",
    "ResidualSubblock",
    "GroupAttentionBlock",
    "BasicBlock",
    "PreactBlock",
    "ResNeXtBlock",
    "ResABlock",
    "channel_shuffle",
    "shuffle_permutation",
    "make_block",
    "BLOCK_KINDS",
]


def shuffle_permutation(channels: int, groups: int) -> np.ndarray:
    """Index map of the reshape-transpose shuffle: out[k] = in[(k % g)*(C/g) + k//g]."""
    if channels % groups:
        raise ValueError(f"{channels} channels not divisible by {groups} groups")
    k = np.arange(channels)
    return (k % groups) * (channels // groups) + k // groups


def channel_shuffle(x: Tensor, groups: int) -> Tensor:
    """Fixed bijective channel permutation; gradient is the inverse map."""
    return permute_channels(x, shuffle_permutation(x.shape[1], groups))


class SqueezeExcite(Module):
    """Channel recalibration: GAP -> reduce (ReLU) -> expand (sigmoid) -> scale."""

    def __init__(self, channels: int, reduction: int, rng: np.random.Generator):
        super().__init__()
        if channels % reduction or channels // reduction < 1:
            raise ValueError(f"reduction {reduction} must divide channels {channels}")
        self.channels = channels
        self.reduction = reduction
        latent = channels // reduction
        self.reduce = Dense(channels, latent, rng)
        self.expand = Dense(latent, channels, rng)

    def gates(self, x: Tensor) -> Tensor:
        g = global_avg_pool(x)
        z = relu(matmul(g, self.reduce.weight))
        return sigmoid(matmul(z, self.expand.weight))

    def forward(self, x):
        return scale_channels(x, self.gates(x))


class AttentionModule(Module):
    """Pixelwise sigmoid gating fused with SE channel recalibration.

    Two parallel branches over the block input F: a pixel branch (two
    3x3 conv-ReLU then a biased 1x1 conv-sigmoid) emits a per-pixel,
    per-channel probability map F1, and a feature branch (two 3x3
    conv-ReLU) emits I2. The shared SE stage recalibrates I2 into s,
    the map gates it (P = F1 * s), the same SE stage recalibrates P
    again, and the result is added back: out = F + SE(F1 * SE(I2)).
    """

    def __init__(self, channels: int, se_reduction: int, rng: np.random.Generator,
                 kernel: int = 3):
        super().__init__()
        self.channels = channels
        self.pixel_conv1 = Conv2d(channels, channels, kernel, rng)
        self.pixel_conv2 = Conv2d(channels, channels, kernel, rng)
        self.pixel_gate = Conv2d(channels, channels, 1, rng, bias=True)
        self.feat_conv1 = Conv2d(channels, channels, kernel, rng)
        self.feat_conv2 = Conv2d(channels, channels, kernel, rng)
        self.se = SqueezeExcite(channels, se_reduction, rng)

    def pixel_probabilities(self, f: Tensor) -> Tensor:
        h = relu(self.pixel_conv1(f))
        h = relu(self.pixel_conv2(h))
        return sigmoid(self.pixel_gate(h))

    def forward(self, f):
        f1 = self.pixel_probabilities(f)
        i2 = relu(self.feat_conv1(f))
        i2 = relu(self.feat_conv2(i2))
        s = self.se(i2)
        p = f1 * s
        f2 = self.se(p)
        return f + f2


class AttentionSubblock(Module):
    """Two bn-LeakyReLU-conv stages then a biased 1x1 conv-sigmoid map."""

    def __init__(self, width: int, rng: np.random.Generator, kernel: int = 3,
                 leaky_slope: float = 0.3):
        super().__init__()
        self.leaky_slope = leaky_slope
        self.bn1 = BatchNorm2d(width)
        self.conv1 = Conv2d(width, width, kernel, rng)
        self.bn2 = BatchNorm2d(width)
        self.conv2 = Conv2d(width, width, kernel, rng)
        self.gate = Conv2d(width, width, 1, rng, bias=True)

    def forward(self, x):
        h = self.conv1(leaky_relu(self.bn1(x), self.leaky_slope))
        h = self.conv2(leaky_relu(self.bn2(h), self.leaky_slope))
        return sigmoid(self.gate(h))


class ResidualSubblock(Module):
    """x + F(x) where F is two bn-LeakyReLU-conv stages."""

    def __init__(self, width: int, rng: np.random.Generator, kernel: int = 3,
                 leaky_slope: float = 0.3):
        super().__init__()
        self.leaky_slope = leaky_slope
        self.bn1 = BatchNorm2d(width)
        self.conv1 = Conv2d(width, width, kernel, rng)
        self.bn2 = BatchNorm2d(width)
        self.conv2 = Conv2d(width, width, kernel, rng)

    def forward(self, x):
        h = self.conv1(leaky_relu(self.bn1(x), self.leaky_slope))
        h = self.conv2(leaky_relu(self.bn2(h), self.leaky_slope))
        return x + h


class GatedPair(Module):
    """Per-pair tail: the 1x1 conv-sigmoid attention map and the doubling
    1x1 conv applied to the gated feature group."""

    def __init__(self, width: int, rng: np.random.Generator):
        super().__init__()
        self.gate = Conv2d(width, width, 1, rng, bias=True)
        self.post = Conv2d(width, 2 * width, 1, rng)

    def forward(self, trunk_a, feat_f):
        return self.post(sigmoid(self.gate(trunk_a)) * feat_f)


class ConcatPair(Module):
    """Per-pair tail for the depthwise-concat ablation (gating removed)."""

    def __init__(self, width: int, rng: np.random.Generator):
        super().__init__()
        self.post = Conv2d(2 * width, 2 * width, 1, rng)

    def forward(self, feat_a, feat_f):
        return self.post(concat_channels([feat_a, feat_f]))


class GroupAttentionBlock(Module):
    """Residual block over four channel groups with per-pair attention gating.

    Every group starts with the same two bn-LeakyReLU-conv stages, and
    per-channel batch norm plus grouped convolution keep the four groups
    fully independent, so those stages run as one grouped trunk over the
    whole body width. Attention slots (0 and 2) finish with a biased 1x1
    conv-sigmoid map; feature slots (1 and 3) add their group input back
    (the per-group residual). ``combine_mode`` selects the shared-weight
    1x1 conv (default) or the fixed channel shuffle after the pair
    concat; ``pair_mode='concat'`` replaces gating with a depthwise
    concat of two residual feature groups. ``tied_combine`` shares the
    combine columns across the pair slots, making the combine stage
    invariant (not just equivariant) to pair order.
    """

    GROUPS = 4

    def __init__(self, in_ch: int, out_ch: int, rng: np.random.Generator,
                 se_reduction: int = 8, kernel: int = 3, leaky_slope: float = 0.3,
                 combine_mode: str = "permutation_equivariant_1x1",
                 pair_mode: str = "gate", tied_combine: bool = False):
        super().__init__()
        if out_ch % self.GROUPS:
            raise ValueError(f"body width {out_ch} not divisible by {self.GROUPS}")
        if combine_mode not in ("permutation_equivariant_1x1", "channel_shuffle"):
            raise ValueError(f"unknown combine_mode {combine_mode!r}")
        if pair_mode not in ("gate", "concat"):
            raise ValueError(f"unknown pair_mode {pair_mode!r}")
        self.out_ch = out_ch
        self.leaky_slope = leaky_slope
        self.combine_mode = combine_mode
        self.pair_mode = pair_mode
        self.tied_combine = tied_combine
        self.pair_slots = ((0, 1), (2, 3))
        width = out_ch // self.GROUPS
        self.width = width
        self.entry = Conv2d(in_ch, out_ch, 1, rng)
        self.trunk_bn1 = BatchNorm2d(out_ch)
        self.trunk_conv1 = Conv2d(out_ch, out_ch, kernel, rng, groups=self.GROUPS)
        self.trunk_bn2 = BatchNorm2d(out_ch)
        self.trunk_conv2 = Conv2d(out_ch, out_ch, kernel, rng, groups=self.GROUPS)
        pair_cls = GatedPair if pair_mode == "gate" else ConcatPair
        self.pair0 = pair_cls(width, rng)
        self.pair1 = pair_cls(width, rng)
        if combine_mode == "permutation_equivariant_1x1":
            if tied_combine:
                self.combine = Conv2d(out_ch // 2, out_ch, 1, rng)
            else:
                self.combine = Conv2d(out_ch, out_ch, 1, rng)
        self.se = SqueezeExcite(out_ch, se_reduction, rng)

    def _pairs(self):
        return (self.pair0, self.pair1)

    def forward(self, x):
        u = self.entry(x)
        h = self.trunk_conv1(leaky_relu(self.trunk_bn1(u), self.leaky_slope))
        h = self.trunk_conv2(leaky_relu(self.trunk_bn2(h), self.leaky_slope))
        w = self.width

        def group(t, s):
            return slice_channels(t, s * w, (s + 1) * w)

        outs = []
        for pair, (sa, sf) in zip(self._pairs(), self.pair_slots):
            feat_f = group(u, sf) + group(h, sf)  # per-group residual
            if self.pair_mode == "gate":
                outs.append(pair(group(h, sa), feat_f))
            else:
                feat_a = group(u, sa) + group(h, sa)
                outs.append(pair(feat_a, feat_f))
        if self.combine_mode == "channel_shuffle":
            y = channel_shuffle(concat_channels(outs), self.GROUPS)
        elif self.tied_combine:
            y = self.combine(outs[0]) + self.combine(outs[1])
        else:
            y = self.combine(concat_channels(outs))
        y = self.se(y)
        return u + y

    def permuted_pairs(self, order=(1, 0)) -> "GroupAttentionBlock":
        """Copy with the pair slot assignment reordered and the combine
        1x1 weight columns permuted to match; only valid for the
        shared-weight combine mode."""
        if self.combine_mode != "permutation_equivariant_1x1" or self.tied_combine:
            raise ValueError("pair permutation requires the untied 1x1 combine")
        if sorted(order) != [0, 1]:
            raise ValueError("order must permute the two pairs")
        other = copy.deepcopy(self)
        pairs = [copy.deepcopy(self._pairs()[i]) for i in order]
        other.pair0, other.pair1 = pairs
        other.pair_slots = tuple(self.pair_slots[i] for i in order)
        half = self.out_ch // 2
        col_perm = np.concatenate([np.arange(i * half, (i + 1) * half) for i in order])
        other.combine.weight.data[:] = self.combine.weight.data[:, col_perm]
        return other


class BasicBlock(Module):
    """conv-bn-ReLU-conv-bn plus skip, post-add ReLU; 1x1 proj on width change."""

    def __init__(self, in_ch: int, out_ch: int, rng: np.random.Generator, kernel: int = 3):
        super().__init__()
        if in_ch != out_ch:
            self.proj = Conv2d(in_ch, out_ch, 1, rng)
        self.has_proj = in_ch != out_ch
        self.conv1 = Conv2d(out_ch, out_ch, kernel, rng)
        self.bn1 = BatchNorm2d(out_ch)
        self.conv2 = Conv2d(out_ch, out_ch, kernel, rng)
        self.bn2 = BatchNorm2d(out_ch)

    def forward(self, x):
        u = self.proj(x) if self.has_proj else x
        h = relu(self.bn1(self.conv1(u)))
        h = self.bn2(self.conv2(h))
        return relu(u + h)


class PreactBlock(Module):
    """Full-preactivation residual block: two bn-ReLU-conv stages plus skip."""

    def __init__(self, in_ch: int, out_ch: int, rng: np.random.Generator, kernel: int = 3):
        super().__init__()
        if in_ch != out_ch:
            self.proj = Conv2d(in_ch, out_ch, 1, rng)
        self.has_proj = in_ch != out_ch
        self.bn1 = BatchNorm2d(out_ch)
        self.conv1 = Conv2d(out_ch, out_ch, kernel, rng)
        self.bn2 = BatchNorm2d(out_ch)
        self.conv2 = Conv2d(out_ch, out_ch, kernel, rng)

    def forward(self, x):
        u = self.proj(x) if self.has_proj else x
        h = self.conv1(relu(self.bn1(u)))
        h = self.conv2(relu(self.bn2(h)))
        return u + h


class ResNeXtBranch(Module):
    """Low-dimensional embedding transform: 1x1 reduce, 3x3, 1x1 expand."""

    def __init__(self, channels: int, bottleneck: int, rng: np.random.Generator,
                 kernel: int = 3):
        super().__init__()
        self.reduce = Conv2d(channels, bottleneck, 1, rng)
        self.conv = Conv2d(bottleneck, bottleneck, kernel, rng)
        self.expand = Conv2d(bottleneck, channels, 1, rng)

    def forward(self, x):
        h = relu(self.reduce(x))
        h = relu(self.conv(h))
        return self.expand(h)


class ResNeXtBlock(Module):
    """Aggregated residual transform: x + sum of ``cardinality`` branches,
    optionally SE-recalibrated before the skip add."""

    def __init__(self, in_ch: int, out_ch: int, rng: np.random.Generator,
                 cardinality: int = 4, kernel: int = 3, use_se: bool = False,
                 se_reduction: int = 8):
        super().__init__()
        if out_ch % cardinality:
            raise ValueError(f"width {out_ch} not divisible by cardinality {cardinality}")
        if in_ch != out_ch:
            self.proj = Conv2d(in_ch, out_ch, 1, rng)
        self.has_proj = in_ch != out_ch
        self.cardinality = cardinality
        bottleneck = max(1, out_ch // (2 * cardinality))
        for t in range(cardinality):
            setattr(self, f"branch{t}", ResNeXtBranch(out_ch, bottleneck, rng, kernel))
        self.use_se = use_se
        if use_se:
            self.se = SqueezeExcite(out_ch, se_reduction, rng)

    def forward(self, x):
        u = self.proj(x) if self.has_proj else x
        total = None
        for t in range(self.cardinality):
            b = getattr(self, f"branch{t}")(u)
            total = b if total is None else total + b
        if self.use_se:
            total = self.se(total)
        return u + total


class ResABlock(Module):
    """Residual feature extraction followed by a conv-sigmoid map that
    scales the skip, with the same skip added in parallel."""

    def __init__(self, in_ch: int, out_ch: int, rng: np.random.Generator,
                 kernel: int = 3, leaky_slope: float = 0.3):
        super().__init__()
        if in_ch != out_ch:
            self.proj = Conv2d(in_ch, out_ch, 1, rng)
        self.has_proj = in_ch != out_ch
        self.body = ResidualSubblock(out_ch, rng, kernel, leaky_slope)
        self.gate = Conv2d(out_ch, out_ch, 1, rng, bias=True)

    def forward(self, x):
        u = self.proj(x) if self.has_proj else x
        m = sigmoid(self.gate(self.body(u)))
        return m * u + u


BLOCK_KINDS = (
    "group_attention",
    "basic",
    "identity_preact",
    "resnext",
    "resnext_se",
    "res_a",
    "concat_horizontal",
)


def make_block(kind: str, in_ch: int, out_ch: int, rng: np.random.Generator, *,
               se_reduction: int = 8, kernel: int = 3, leaky_slope: float = 0.3,
               combine_mode: str = "permutation_equivariant_1x1",
               cardinality: int = 4) -> Module:
    """Instantiate the block variant selected by ``kind``."""
    if kind == "group_attention":
        return GroupAttentionBlock(in_ch, out_ch, rng, se_reduction, kernel,
                                   leaky_slope, combine_mode)
    if kind == "concat_horizontal":
        return GroupAttentionBlock(in_ch, out_ch, rng, se_reduction, kernel,
                                   leaky_slope, combine_mode, pair_mode="concat")
    if kind == "basic":
        return BasicBlock(in_ch, out_ch, rng, kernel)
    if kind == "identity_preact":
        return PreactBlock(in_ch, out_ch, rng, kernel)
    if kind == "resnext":
        return ResNeXtBlock(in_ch, out_ch, rng, cardinality, kernel)
    if kind == "resnext_se":
        return ResNeXtBlock(in_ch, out_ch, rng, cardinality, kernel,
                            use_se=True, se_reduction=se_reduction)
    if kind == "res_a":
        return ResABlock(in_ch, out_ch, rng, kernel, leaky_slope)
    raise ValueError(f"unknown block kind {kind!r}; choose from {BLOCK_KINDS}")
