"""Trainable spherical layers.

Every layer's ``forward(x, frame)`` returns ``(y, frame)`` so resolution
changes travel with the signal through :class:`SphereSequential`.
"""

from __future__ import annotations

import math

import torch
from torch import nn

from . import ops


def _uniform(shape, fan_in):
    bound = 1.0 / math.sqrt(fan_in)
    return nn.Parameter(torch.empty(shape).uniform_(-bound, bound))


class Conv0(nn.Module):
    def __init__(self, c_in: int, c_out: int):
        super().__init__()
        self.weight = _uniform((c_in, c_out), c_in)
        self.bias = _uniform((c_out,), c_in)

    def forward(self, x, frame):
        return ops.conv_h0(x, self.weight, self.bias), frame


class SphereConv(nn.Module):
    """n-hop convolution (``hops >= 1``) at constant resolution."""

    def __init__(self, c_in: int, c_out: int, hops: int = 1):
        super().__init__()
        if hops < 1:
            raise ValueError("use Conv0 for 0-hop convolutions")
        self.weights = nn.ParameterList(
            [_uniform((9, c_in if h == 0 else c_out, c_out), 9 * (c_in if h == 0 else c_out)) for h in range(hops)]
        )
        self.biases = nn.ParameterList([_uniform((c_out,), 9 * c_in) for _ in range(hops)])

    def forward(self, x, frame):
        return ops.conv_hn(x, frame, list(self.weights), list(self.biases)), frame


class SphereDown(SphereConv):
    def __init__(self, c_in: int, c_out: int, hops: int = 1, mode: str = "stride"):
        super().__init__(c_in, c_out, hops)
        self.mode = mode

    def forward(self, x, frame):
        y = ops.conv_down4(x, frame, list(self.weights), list(self.biases), mode=self.mode)
        return y, frame.coarser()


class SphereUp(nn.Module):
    """Unpooling by 4 followed by ``hops - 1`` fine-grid hops, outputs summed.

    ``unpool`` is ``"tconv"`` (transposed convolution) or ``"shuffle"``
    (pixel shuffle); only the unpooling kernel differs between the two.
    """

    def __init__(self, c_in: int, c_out: int, hops: int = 1, unpool: str = "tconv"):
        super().__init__()
        if unpool not in ("tconv", "shuffle"):
            raise ValueError(f"unknown unpooling mode {unpool!r}")
        self.unpool = unpool
        width = c_out if unpool == "tconv" else 4 * c_out
        self.weight = _uniform((9, c_in, width), 9 * c_in)
        self.bias = _uniform((width,), 9 * c_in)
        self.refine = SphereConv(c_out, c_out, hops - 1) if hops > 1 else None

    def forward(self, x, frame):
        if self.unpool == "tconv":
            z = ops.tconv_up4(x, frame, self.weight, self.bias)
        else:
            z = ops.shuffle_up4(x, frame, self.weight, self.bias)
        fine = frame.finer()
        if self.refine is None:
            return z, fine
        weights, biases = list(self.refine.weights), list(self.refine.biases)
        out = z
        for w, b in zip(weights, biases):
            z = ops.conv_h1(z, fine, w, b)
            out = out + z
        return out, fine


class MaskedConv(nn.Module):
    def __init__(self, c_in: int, c_out: int):
        super().__init__()
        self.weight = _uniform((8, c_in, c_out), 8 * c_in)
        self.bias = _uniform((c_out,), 8 * c_in)

    def forward(self, x, frame):
        return ops.masked_conv_h1(x, frame, self.weight, self.bias), frame


class ReLU(nn.Module):
    def forward(self, x, frame):
        return torch.relu(x), frame


class ResidualBlock(nn.Module):
    """``x + g(x)`` with g = h0 (C -> C/2), ReLU, h1, ReLU, h0 (C/2 -> C)."""

    def __init__(self, channels: int):
        super().__init__()
        if channels % 2:
            raise ValueError(f"residual blocks need an even channel count, got {channels}")
        half = channels // 2
        self.reduce = Conv0(channels, half)
        self.conv = SphereConv(half, half, 1)
        self.expand = Conv0(half, channels)

    def forward(self, x, frame):
        h, _ = self.reduce(x, frame)
        h, _ = self.conv(torch.relu(h), frame)
        h, _ = self.expand(torch.relu(h), frame)
        return x + h, frame


class ResidualStack(nn.Module):
    def __init__(self, channels: int, depth: int = 3):
        super().__init__()
        self.blocks = nn.ModuleList([ResidualBlock(channels) for _ in range(depth)])

    def forward(self, x, frame):
        for block in self.blocks:
            x, frame = block(x, frame)
        return x, frame


class Attention(nn.Module):
    """Simplified attention: ``x + trunk(x) * sigmoid(h0(mask_branch(x)))``."""

    def __init__(self, channels: int):
        super().__init__()
        self.trunk = ResidualStack(channels)
        self.mask_branch = ResidualStack(channels)
        self.gate = Conv0(channels, channels)

    def forward(self, x, frame):
        a, _ = self.trunk(x, frame)
        b, _ = self.mask_branch(x, frame)
        g, _ = self.gate(b, frame)
        return x + a * torch.sigmoid(g), frame


class SphereSequential(nn.Sequential):
    def forward(self, x, frame):
        for layer in self:
            x, frame = layer(x, frame)
        return x, frame
