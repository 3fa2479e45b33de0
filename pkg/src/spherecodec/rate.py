"""Quantization surrogates, the discretized Gaussian rate and the RD loss."""

from __future__ import annotations

from dataclasses import dataclass

import torch

SIGMA_MIN = 0.11
LIKELIHOOD_MIN = 1e-9

# Quality ladder, with the two optional intermediate points appended.
LAMBDAS = (0.0005, 0.0018, 0.0067, 0.0130, 0.025, 0.0483, 0.0932, 0.18)
LAMBDAS_OPTIONAL = (0.0009, 0.0035)


def quantize(y: torch.Tensor, mode: str, means=None, generator=None) -> torch.Tensor:
    """Additive-noise or rounding quantization.

    ``noise`` adds i.i.d. U(-0.5, 0.5); ``round`` returns
    ``round(y - means) + means`` with a straight-through gradient.
    """
    if mode == "noise":
        u = torch.rand(y.shape, dtype=y.dtype, device=y.device, generator=generator) - 0.5
        return y + u
    if mode == "round":
        mu = 0 if means is None else means
        q = torch.round(y - mu) + mu
        # value is exactly q, gradient is the identity
        return q + (y - y.detach())
    raise ValueError(f"unknown quantization mode {mode!r}")


def _ndtr(x: torch.Tensor) -> torch.Tensor:
    return 0.5 * torch.erfc(-x * 0.7071067811865476)


def gaussian_likelihood(y_hat: torch.Tensor, means, scales: torch.Tensor) -> torch.Tensor:
    scales = torch.clamp(scales, min=SIGMA_MIN)
    v = torch.abs(y_hat - means)
    # evaluate on the lower tail for precision
    p = _ndtr((0.5 - v) / scales) - _ndtr((-0.5 - v) / scales)
    return torch.clamp(p, min=LIKELIHOOD_MIN)


def gaussian_rate_bits(y_hat: torch.Tensor, means, scales: torch.Tensor) -> torch.Tensor:
    """Total bits of ``y_hat`` under a unit-bin discretized Gaussian."""
    return -torch.log2(gaussian_likelihood(y_hat, means, scales)).sum()


@dataclass
class RateDistortionLoss:
    rate: torch.Tensor
    distortion: torch.Tensor
    lmbda: float

    @property
    def total(self) -> torch.Tensor:
        return self.rate + self.lmbda * self.distortion


def rd_loss(x, x_hat, total_bits, lmbda: float, n_pixels: int | None = None, scale: float = 1.0):
    """``R + lambda * D`` with R in bits per input pixel and D the MSE.

    ``scale`` multiplies the MSE; use ``255**2`` when signals live in [0, 1]
    but the lambda ladder is meant for 8-bit distortions.
    """
    if not lmbda > 0:
        raise ValueError(f"lambda must be positive, got {lmbda}")
    if x.shape != x_hat.shape:
        raise ValueError("x and x_hat shapes differ")
    if n_pixels is None:
        n_pixels = x[..., 0].numel()
    rate = total_bits / n_pixels
    dist = scale * torch.mean((x - x_hat) ** 2)
    return RateDistortionLoss(rate, dist, float(lmbda))
