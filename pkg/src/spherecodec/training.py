"""Toy-scale training loop.

By default every step sees whole spheres, so the networks learn to use
neighbors across base-face borders.  ``patch_depth`` switches to nested
patches cut at one shared root from several images (one frame per batch),
which is what large resolutions need.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .healpix import build_grid
from .model import SphereCompressionModel
from .ops import PatchFrame
from .rate import rd_loss

log = logging.getLogger(__name__)

# Signals live in [0, 1]; the lambda ladder is calibrated for 8-bit MSE.
DISTORTION_SCALE = 255.0**2


class TrainingDivergedError(RuntimeError):
    def __init__(self, step, state):
        super().__init__(f"non-finite loss at step {step}")
        self.step = step
        self.state = state


@dataclass
class TrainingLog:
    loss: list = field(default_factory=list)
    rate: list = field(default_factory=list)
    distortion: list = field(default_factory=list)

    def smoothed(self, window: int = 10) -> np.ndarray:
        x = np.asarray(self.loss)
        if len(x) < window:
            return x.copy()
        return np.convolve(x, np.ones(window) / window, mode="valid")


def adam_step(params, grads, state: dict, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
    """One Adam update on plain tensors (in place); ``state`` starts as ``{}``."""
    t = state.get("t", 0) + 1
    state["t"] = t
    m = state.setdefault("m", [torch.zeros_like(p) for p in params])
    v = state.setdefault("v", [torch.zeros_like(p) for p in params])
    with torch.no_grad():
        for p, g, m_i, v_i in zip(params, grads, m, v):
            if p.shape != g.shape:
                raise ValueError("gradient shape differs from parameter shape")
            m_i.mul_(betas[0]).add_(g, alpha=1 - betas[0])
            v_i.mul_(betas[1]).addcmul_(g, g, value=1 - betas[1])
            m_hat = m_i / (1 - betas[0] ** t)
            v_hat = v_i / (1 - betas[1] ** t)
            p.sub_(lr * m_hat / (v_hat.sqrt() + eps))
    return params


def train(
    model: SphereCompressionModel,
    images,
    lmbda: float,
    steps: int,
    batch_size: int = 1,
    patch_depth: int | None = None,
    lr: float = 1e-4,
    seed: int = 0,
    callback=None,
) -> TrainingLog:
    """Train ``model`` in place on ``images`` of shape ``(n_images, n_pix, C)``."""
    if not lmbda > 0:
        raise ValueError("lambda must be positive")
    images = torch.as_tensor(np.asarray(images), dtype=next(model.parameters()).dtype)
    n_side = int(round((images.shape[1] / 12) ** 0.5))
    grid = build_grid(n_side)
    if patch_depth is None:
        frames = [grid]
    else:
        frames = [PatchFrame(n_side, r, patch_depth) for r in range(grid.n_pix >> (2 * patch_depth))]
    n_roots = len(frames)
    model.check_frame(frames[0])

    rng = np.random.default_rng(seed)
    gen = torch.Generator().manual_seed(seed)
    params = list(model.parameters())
    opt_state: dict = {}
    history = TrainingLog()
    last_good = {k: v.clone() for k, v in model.state_dict().items()}
    model.train()
    for step in range(steps):
        root = int(rng.integers(n_roots))
        pick = rng.choice(len(images), size=min(batch_size, len(images)), replace=False)
        frame = frames[root]
        x = images[pick][:, frame.start : frame.start + frame.n_pix]
        out = model(x, frame, mode="noise", generator=gen)
        loss = rd_loss(x, out["x_hat"], out["bits"], lmbda, scale=DISTORTION_SCALE)
        total = loss.total
        if not math.isfinite(total.item()):
            model.load_state_dict(last_good)
            raise TrainingDivergedError(step, last_good)
        grads = torch.autograd.grad(total, params)
        adam_step(params, grads, opt_state, lr)
        history.loss.append(total.item())
        history.rate.append(loss.rate.item())
        history.distortion.append(loss.distortion.item())
        if step % 50 == 49:
            last_good = {k: v.clone() for k, v in model.state_dict().items()}
        if callback is not None:
            callback(step, history)
    return history
