"""Discretized Gaussian models on top of the range coder.

Symbols are residuals ``round(y - mu)``, so the table for an element only
depends on its scale.  Each coded tensor starts with a small header::

    support S   u16   symbols are modeled on [-S, S]
    count       u64   number of symbols

followed by the range-coder bytes.  Bins ``-S`` and ``S`` also hold the
Gaussian tails; a symbol that lands there is followed by its excess
``|s| - S`` as an order-0 Exp-Golomb code in raw bits.
"""

from __future__ import annotations

import struct

import numpy as np
from scipy.special import ndtr

from .rangecoder import TOTAL, CorruptStreamError, RangeDecoder, RangeEncoder
from .rate import SIGMA_MIN

SUPPORT_MAX = 128
_HEADER = struct.Struct("<HQ")


def build_cdf(mu, sigma, support: int) -> np.ndarray:
    """Cumulative 16-bit frequency tables, one row per element.

    Returns an int64 array of shape ``(..., 2 * support + 2)`` whose rows
    start at 0 and end at ``2**16``; every bin has at least one count.
    """
    mu = np.asarray(mu, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(sigma))):
        raise ValueError("means and scales must be finite")
    if support < 1:
        raise ValueError("support must be at least 1")
    mu, sigma = np.broadcast_arrays(mu, np.maximum(sigma, SIGMA_MIN))
    k = np.arange(-support, support, dtype=np.float64)
    edges = ndtr((k + 0.5 - mu[..., None]) / sigma[..., None])
    zeros = np.zeros(edges.shape[:-1] + (1,))
    ones = np.ones(edges.shape[:-1] + (1,))
    pmf = np.diff(np.concatenate([zeros, edges, ones], axis=-1), axis=-1)
    pmf = np.maximum(pmf, 0.0)
    nbins = 2 * support + 1
    freq = np.floor(pmf * (TOTAL - nbins)).astype(np.int64) + 1
    rest = TOTAL - freq.sum(axis=-1)
    top = np.argmax(freq, axis=-1)
    np.put_along_axis(freq, top[..., None], np.take_along_axis(freq, top[..., None], -1) + rest[..., None], -1)
    return np.concatenate([np.zeros(freq.shape[:-1] + (1,), np.int64), np.cumsum(freq, axis=-1)], axis=-1)


def support_for(symbols) -> int:
    symbols = np.asarray(symbols)
    peak = int(np.max(np.abs(symbols))) if symbols.size else 0
    return min(peak + 2, SUPPORT_MAX)


def _put_excess(enc: RangeEncoder, e: int):
    v = e + 1
    nb = v.bit_length()
    for _ in range(nb - 1):
        enc.encode_bits(0, 1)
    enc.encode_bits(1, 1)
    rem = nb - 1
    while rem > 0:
        take = min(rem, 16)
        rem -= take
        enc.encode_bits((v >> rem) & ((1 << take) - 1), take)


def _get_excess(dec: RangeDecoder) -> int:
    zeros = 0
    while dec.decode_bits(1) == 0:
        zeros += 1
        if zeros > 62:
            raise CorruptStreamError("escape code too long")
    v = 1
    rem = zeros
    while rem > 0:
        take = min(rem, 16)
        rem -= take
        v = (v << take) | dec.decode_bits(take)
    return v - 1


def encode_symbol(enc: RangeEncoder, cdf, s: int, support: int):
    b = max(-support, min(support, int(s)))
    i = b + support
    enc.encode(int(cdf[i]), int(cdf[i + 1] - cdf[i]))
    if abs(b) == support:
        _put_excess(enc, abs(int(s)) - support)


def decode_symbol(dec: RangeDecoder, cdf, support: int) -> int:
    s = dec.decode(cdf) - support
    if abs(s) == support:
        e = _get_excess(dec)
        s = s + e if s > 0 else s - e
    return s


def range_encode(symbols, cdfs, support: int) -> bytes:
    """Header plus coded bytes for ``symbols`` with one table row per symbol."""
    symbols = np.asarray(symbols, dtype=np.int64).reshape(-1)
    cdfs = np.asarray(cdfs).reshape(len(symbols), -1) if len(symbols) else cdfs
    enc = RangeEncoder()
    for s, row in zip(symbols.tolist(), cdfs.tolist() if len(symbols) else []):
        encode_symbol(enc, row, s, support)
    return _HEADER.pack(support, len(symbols)) + enc.finish()


def read_header(data: bytes) -> tuple[int, int, bytes]:
    if len(data) < _HEADER.size:
        raise CorruptStreamError(f"stream header truncated at byte {len(data)}")
    support, count = _HEADER.unpack_from(data)
    if not 1 <= support <= SUPPORT_MAX:
        raise CorruptStreamError(f"invalid symbol support {support}")
    return support, count, data[_HEADER.size :]


def range_decode(data: bytes, cdf_provider, count: int | None = None) -> np.ndarray:
    """Decode a stream; ``cdf_provider(i, support)`` gives the table of symbol ``i``."""
    support, n, payload = read_header(data)
    if count is not None and count != n:
        raise CorruptStreamError(f"stream holds {n} symbols, expected {count}")
    dec = RangeDecoder(payload)
    return np.array([decode_symbol(dec, cdf_provider(i, support), support) for i in range(n)], dtype=np.int64)


def information_bits(symbols, cdfs, support: int) -> float:
    """Ideal code length of ``symbols`` under the quantized tables (excess bits excluded)."""
    symbols = np.clip(np.asarray(symbols, dtype=np.int64).reshape(-1), -support, support) + support
    cdfs = np.asarray(cdfs).reshape(len(symbols), -1)
    idx = np.arange(len(symbols))
    freq = cdfs[idx, symbols + 1] - cdfs[idx, symbols]
    return float(-np.log2(freq / TOTAL).sum())


def encode_gaussian(symbols, sigma) -> bytes:
    """Code residual symbols with zero-mean tables of the given scales."""
    symbols = np.asarray(symbols, dtype=np.int64).reshape(-1)
    sigma = np.asarray(sigma, dtype=np.float64).reshape(-1)
    support = support_for(symbols)
    return range_encode(symbols, build_cdf(0.0, sigma, support), support)


def decode_gaussian(data: bytes, sigma) -> np.ndarray:
    sigma = np.asarray(sigma, dtype=np.float64).reshape(-1)
    support, n, _ = read_header(data)
    if n != sigma.size:
        raise CorruptStreamError(f"stream holds {n} symbols, expected {sigma.size}")
    cdfs = build_cdf(0.0, sigma, support)
    return range_decode(data, lambda i, s: cdfs[i].tolist())


def decode_latents_sequential(data: bytes, model, hyper, frame):
    """Decode the main latents pixel by pixel, interleaving the context model.

    Returns ``(y_hat, mu, sigma)`` as produced by ``model.sequential_latents``.
    """
    import torch

    support, n, payload = read_header(data)
    if n != hyper.shape[-2] * model.config.m:
        raise CorruptStreamError(f"stream holds {n} symbols, expected {hyper.shape[-2] * model.config.m}")
    dec = RangeDecoder(payload)

    def step(i, mu_i, sigma_i):
        cdfs = build_cdf(0.0, sigma_i.cpu().numpy(), support).tolist()
        syms = [decode_symbol(dec, row, support) for row in cdfs]
        return torch.tensor(syms, dtype=mu_i.dtype) + mu_i

    return model.sequential_latents(hyper, frame, step)
