"""Channel and spatial attention gates for feature-map refinement.

The channel gate squeezes each channel through shared avg/max pooled
descriptors and a bottleneck MLP; the spatial gate convolves the
cross-channel mean/max maps. Both multiply into the feature map in
channel-then-spatial order. The improved spatial variant swaps the wide
dense convolution for a dilated depthwise + pointwise pair, widening the
receptive field (span 13 vs 7) at nearly the same parameter count.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .layers import Conv2d, Conv2dSpec, Linear, Module, global_pool


class ChannelAttention(Module):
    """Per-channel sigmoid gate from pooled descriptors, [N,C,1,1]."""

    def __init__(self, channels, reduction_ratio, rng, dtype=np.float32):
        super().__init__()
        if channels % reduction_ratio:
            raise ValueError(f"reduction ratio {reduction_ratio} must divide channels {channels}")
        self.channels = int(channels)
        self.reduction_ratio = int(reduction_ratio)
        hidden = channels // reduction_ratio
        # MLP shared between the avg and max descriptors, no bias
        self.squeeze = Linear(channels, hidden, rng, bias=False, dtype=dtype)
        self.excite = Linear(hidden, channels, rng, bias=False, dtype=dtype)

    def _mlp(self, desc):
        return self.excite(self.squeeze(desc).relu())

    def forward(self, x):
        n, c, _, _ = x.shape
        if c != self.channels:
            raise ValueError(f"expected {self.channels} channels, got {c}")
        avg = global_pool(x, "avg").reshape((n, c))
        mx = global_pool(x, "max").reshape((n, c))
        gate = (self._mlp(avg) + self._mlp(mx)).sigmoid()
        return gate.reshape((n, c, 1, 1))

    def param_count(self):
        return self.squeeze.param_count() + self.excite.param_count()


class SpatialAttention(Module):
    """Per-location sigmoid gate from cross-channel mean/max maps, [N,1,H,W].

    variant "standard": single k x k conv over the 2-channel descriptor map.
    variant "improved": k x k depthwise conv with dilation, then 1x1
    pointwise to one channel.
    Padding keeps the output spatial size equal to the input.
    """

    def __init__(self, rng, kernel=7, dilation=1, variant="standard", dtype=np.float32):
        super().__init__()
        if kernel % 2 == 0:
            raise ValueError(f"spatial attention kernel must be odd, got {kernel}")
        if variant not in ("standard", "improved"):
            raise ValueError(f"unknown spatial attention variant {variant!r}")
        self.kernel = int(kernel)
        self.dilation = int(dilation)
        self.variant = variant
        pad = self.dilation * (self.kernel - 1) // 2
        if variant == "standard":
            self.conv = Conv2d(
                Conv2dSpec(2, 1, kernel, padding=pad, dilation=self.dilation, bias=False),
                rng, dtype)
        else:
            self.depthwise = Conv2d(
                Conv2dSpec(2, 2, kernel, padding=pad, dilation=self.dilation,
                           groups=2, bias=False), rng, dtype)
            self.pointwise = Conv2d(Conv2dSpec(2, 1, 1, bias=False), rng, dtype)

    def forward(self, x):
        avg = x.mean(axes=(1,), keepdims=True)
        mx = x.max(axes=(1,), keepdims=True)
        desc = T.concat([avg, mx], axis=1)
        if self.variant == "standard":
            pre = self.conv(desc)
        else:
            pre = self.pointwise(self.depthwise(desc))
        return pre.sigmoid()

    def param_count(self):
        if self.variant == "standard":
            return self.conv.param_count()
        return self.depthwise.param_count() + self.pointwise.param_count()


def improved_spatial_attention(rng, kernel=7, dilation=2, dtype=np.float32):
    return SpatialAttention(rng, kernel=kernel, dilation=dilation,
                            variant="improved", dtype=dtype)


class CBAM(Module):
    """Sequential channel-then-spatial multiplicative gating.

    ``bypass`` forces both gates to 1, making the block an exact identity;
    the last computed gates are exposed for visualization.
    """

    def __init__(self, channels, rng, reduction_ratio=16, spatial_kernel=7,
                 improved=False, dtype=np.float32):
        super().__init__()
        self.improved = bool(improved)
        self.channel = ChannelAttention(channels, reduction_ratio, rng, dtype)
        if improved:
            self.spatial = improved_spatial_attention(rng, kernel=spatial_kernel, dtype=dtype)
        else:
            self.spatial = SpatialAttention(rng, kernel=spatial_kernel, dtype=dtype)
        self.bypass = False
        self.last_channel_gate = None
        self.last_spatial_gate = None

    def forward(self, x):
        if self.bypass:
            # gates forced to exactly 1; the feature map is untouched
            n, c, h, w = x.shape
            self.last_channel_gate = np.ones((n, c, 1, 1), dtype=x.dtype)
            self.last_spatial_gate = np.ones((n, 1, h, w), dtype=x.dtype)
            return x
        cg = self.channel(x)
        x = x * cg
        sg = self.spatial(x)
        x = x * sg
        # snapshots for visualization; plain arrays so they are neither
        # parameters nor graph references
        self.last_channel_gate = cg.data
        self.last_spatial_gate = sg.data
        return x

    def param_count(self):
        return self.channel.param_count() + self.spatial.param_count()


def set_attention_bypass(model, on):
    """Force every attention block in a module tree to identity."""
    for _, mod in model.modules():
        if isinstance(mod, CBAM):
            mod.bypass = bool(on)
