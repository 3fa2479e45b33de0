"""Linear operators on HEALPix signals.

Signals are tensors of shape ``(..., n_pix, channels)`` in nested row order.
Every operator also takes a *frame*: either a full :class:`HealpixGrid` or a
:class:`PatchFrame` covering a contiguous nested range.  Neighbors that are
missing (the 24 seven-neighbor pixels) or lie outside a patch contribute
nothing.

Kernel layout: a 1-hop kernel is a tensor of shape ``(9, L_in, L_out)``; slot
0 is the center weight and slots 1..8 follow the neighbor order
``SW, W, NW, N, NE, E, SE, S``.  Masked kernels have no center and are stored
as ``(8, L_in, L_out)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np
import torch

from .healpix import MISSING, InvalidResolutionError, build_grid

__all__ = [
    "PatchFrame",
    "extract_patch",
    "conv_h0",
    "conv_h1",
    "conv_hn",
    "conv_down4",
    "masked_conv_h1",
    "tconv_up4",
    "shuffle_up4",
]


@dataclass(frozen=True)
class PatchFrame:
    """Contiguous nested range ``[root * 4**depth, (root + 1) * 4**depth)``.

    ``root`` is a pixel index at resolution ``n_side / 2**depth``.
    """

    n_side: int
    root: int
    depth: int

    def __post_init__(self):
        grid = build_grid(self.n_side)
        if self.depth < 0 or (1 << self.depth) > self.n_side:
            raise IndexError(f"patch depth {self.depth} does not fit n_side={self.n_side}")
        if not 0 <= self.root < grid.n_pix >> (2 * self.depth):
            raise IndexError(f"patch root {self.root} out of range")

    @property
    def n_pix(self) -> int:
        return 4**self.depth

    @property
    def start(self) -> int:
        return self.root * 4**self.depth

    @property
    def neighbor_table(self) -> np.ndarray:
        return _patch_table(self.n_side, self.start, self.n_pix)

    def coarser(self) -> PatchFrame:
        if self.depth == 0:
            raise InvalidResolutionError("a single-pixel patch cannot be coarsened")
        return PatchFrame(self.n_side // 2, self.root, self.depth - 1)

    def finer(self) -> PatchFrame:
        return PatchFrame(self.n_side * 2, self.root, self.depth + 1)


@lru_cache(maxsize=None)
def _patch_table(n_side: int, start: int, n: int) -> np.ndarray:
    table = build_grid(n_side).neighbor_table[start : start + n] - start
    table = np.where((table >= 0) & (table < n), table, MISSING)
    table.setflags(write=False)
    return table


def extract_patch(x: torch.Tensor, n_side: int, root: int, depth: int):
    """Copy out a nested patch and return it with its :class:`PatchFrame`."""
    frame = PatchFrame(n_side, root, depth)
    if x.shape[-2] != build_grid(n_side).n_pix:
        raise ValueError("signal does not match the grid resolution")
    return x[..., frame.start : frame.start + frame.n_pix, :].clone(), frame


def _frame_key(frame) -> tuple[int, int, int]:
    return (frame.n_side, frame.start, frame.n_pix)


@lru_cache(maxsize=None)
def _gather_index(key) -> torch.Tensor:
    # (n, 9) rows: center then neighbors; missing -> n (a zero pad row)
    n_side, start, n = key
    table = build_grid(n_side).neighbor_table if (start, n) == (0, 12 * n_side**2) else _patch_table(*key)
    idx = np.concatenate([np.arange(n)[:, None], np.where(table == MISSING, n, table)], axis=1)
    return torch.from_numpy(idx.astype(np.int64))


@lru_cache(maxsize=None)
def _causal_index(key) -> torch.Tensor:
    idx = _gather_index(key)[:, 1:]
    n = idx.shape[0]
    rows = torch.arange(n)[:, None]
    return torch.where(idx < rows, idx, torch.full_like(idx, n))


def _check(x: torch.Tensor, frame, weight: torch.Tensor, slots: int):
    if x.shape[-2] != frame.n_pix:
        raise ValueError(f"signal has {x.shape[-2]} rows, frame has {frame.n_pix} pixels")
    if weight.dim() != 3 or weight.shape[0] != slots:
        raise ValueError(f"kernel must have shape ({slots}, L_in, L_out), got {tuple(weight.shape)}")
    if weight.shape[1] != x.shape[-1]:
        raise ValueError(f"kernel expects {weight.shape[1]} input channels, signal has {x.shape[-1]}")


_BLOCK = 8192


def _pad(x: torch.Tensor) -> torch.Tensor:
    return torch.cat([x, x.new_zeros(*x.shape[:-2], 1, x.shape[-1])], dim=-2)


def _apply(x: torch.Tensor, idx: torch.Tensor, weight: torch.Tensor, bias) -> torch.Tensor:
    # row blocks bound the (rows, 9L) gather buffer so it stays cache-sized
    xp = _pad(x)
    w = weight.reshape(-1, weight.shape[-1])
    n = idx.shape[0]
    if n <= _BLOCK:
        out = xp[..., idx, :].flatten(-2) @ w
    else:
        out = torch.cat([xp[..., idx[i : i + _BLOCK], :].flatten(-2) @ w for i in range(0, n, _BLOCK)], dim=-2)
    return out if bias is None else out + bias


def conv_h0(x: torch.Tensor, weight: torch.Tensor, bias=None) -> torch.Tensor:
    """0-hop convolution: a per-pixel matrix product, ``weight`` is ``(L_in, L_out)``."""
    if weight.dim() != 2 or weight.shape[0] != x.shape[-1]:
        raise ValueError(f"kernel shape {tuple(weight.shape)} does not match {x.shape[-1]} input channels")
    out = x @ weight
    return out if bias is None else out + bias


def conv_h1(x: torch.Tensor, frame, weight: torch.Tensor, bias=None) -> torch.Tensor:
    """1-hop spherical convolution over each pixel and its (up to 8) neighbors."""
    _check(x, frame, weight, 9)
    return _apply(x, _gather_index(_frame_key(frame)), weight, bias)


def conv_hn(x: torch.Tensor, frame, weights: Sequence[torch.Tensor], biases=None) -> torch.Tensor:
    """n-hop convolution as a cascade of 1-hop convolutions whose outputs are summed.

    ``weights[0]`` maps ``L_in -> L_out``; the remaining kernels map
    ``L_out -> L_out``.
    """
    if len(weights) < 1:
        raise ValueError("need at least one kernel")
    biases = [None] * len(weights) if biases is None else biases
    z = conv_h1(x, frame, weights[0], biases[0])
    out = z
    for w, b in zip(weights[1:], biases[1:]):
        z = conv_h1(z, frame, w, b)
        out = out + z
    return out


def conv_down4(x: torch.Tensor, frame, weights, biases=None, mode: str = "stride") -> torch.Tensor:
    """n-hop convolution evaluated on the fine grid and reduced by 4.

    ``mode="stride"`` keeps the value at each child-0 pixel ``4i`` (the last
    hop is only computed there); ``mode="pool"`` averages the 4 children of a
    full-resolution convolution.  Output lives on ``frame.coarser()``.
    """
    if isinstance(weights, torch.Tensor):
        weights, biases = [weights], [biases]
    frame.coarser()  # validates resolution
    biases = [None] * len(weights) if biases is None else biases
    if mode == "pool":
        out = conv_hn(x, frame, weights, biases)
        return out.reshape(*out.shape[:-2], -1, 4, out.shape[-1]).mean(dim=-2)
    if mode != "stride":
        raise ValueError(f"unknown downsampling mode {mode!r}")
    idx = _gather_index(_frame_key(frame))
    acc = None
    z = x
    for w, b in zip(weights[:-1], biases[:-1]):
        z = conv_h1(z, frame, w, b)
        acc = z[..., ::4, :] if acc is None else acc + z[..., ::4, :]
    _check(z, frame, weights[-1], 9)
    out = _apply(z, idx[::4], weights[-1], biases[-1])
    return out if acc is None else out + acc


def masked_conv_h1(x: torch.Tensor, frame, weight: torch.Tensor, bias=None) -> torch.Tensor:
    """Causal 1-hop convolution: pixel ``i`` only sees neighbors with index ``< i``.

    The center term is dropped as well, so the output at ``i`` is a function
    of already decoded pixels only.
    """
    _check(x, frame, weight, 8)
    return _apply(x, _causal_index(_frame_key(frame)), weight, bias)


@lru_cache(maxsize=None)
def _scatter_index(key) -> torch.Tensor:
    # coarse pixel i -> fine positions [4i, N_4i(1..8)], pad = n_fine
    n_side, start, n = key
    if (start, n) == (0, 12 * n_side**2):
        fine = build_grid(2 * n_side)
    else:
        depth = (n.bit_length() - 1) // 2
        fine = PatchFrame(2 * n_side, start // n, depth + 1)
    idx = _gather_index(_frame_key(fine))
    return idx[::4]


def tconv_up4(x: torch.Tensor, frame, weight: torch.Tensor, bias=None) -> torch.Tensor:
    """Spherical transposed convolution, upsampling by 4.

    Each coarse pixel ``i`` scatters ``x_i @ weight[0]`` onto fine pixel
    ``4i`` and ``x_i @ weight[k]`` onto the k-th fine neighbor of ``4i``;
    overlapping contributions add up.  Output lives on ``frame.finer()``.
    """
    _check(x, frame, weight, 9)
    n_in, l_out = x.shape[-2], weight.shape[-1]
    tidx = _scatter_index(_frame_key(frame))
    contrib = x @ weight.permute(1, 0, 2).reshape(weight.shape[1], 9 * l_out)
    contrib = contrib.reshape(*x.shape[:-2], n_in * 9, l_out)
    out = x.new_zeros(*x.shape[:-2], 4 * n_in + 1, l_out)
    out = out.index_add(-2, tidx.reshape(-1), contrib)[..., :-1, :]
    return out if bias is None else out + bias


def shuffle_up4(x: torch.Tensor, frame, weight: torch.Tensor, bias=None) -> torch.Tensor:
    """Pixel-shuffle unpooling: coarse 1-hop conv to ``4 L_out`` channels, then
    channel group ``c`` of pixel ``i`` goes to fine pixel ``4i + c``."""
    if weight.shape[-1] % 4:
        raise ValueError("pixel shuffle needs a multiple of 4 output channels")
    out = conv_h1(x, frame, weight, bias)
    return out.reshape(*out.shape[:-2], 4 * out.shape[-2], out.shape[-1] // 4)
