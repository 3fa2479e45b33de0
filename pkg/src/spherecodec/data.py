"""Synthetic omnidirectional test images."""

from __future__ import annotations

import numpy as np


def _directions(theta, phi):
    theta, phi = np.broadcast_arrays(theta, phi)
    st = np.sin(theta)
    return np.stack([st * np.cos(phi), st * np.sin(phi), np.cos(theta)], axis=-1)


def synthetic_field(theta, phi, seed: int, channels: int = 3) -> np.ndarray:
    """Smooth waves plus a few sharp-edged caps, values in [0, 1].

    The field is defined on directions, so ERP and HEALPix samplings of the
    same seed describe the same scene.
    """
    rng = np.random.default_rng(seed)
    d = _directions(np.asarray(theta, dtype=np.float64), np.asarray(phi, dtype=np.float64))
    base = np.zeros(d.shape[:-1] + (channels,))
    for _ in range(6):
        k = rng.normal(size=3)
        k *= rng.uniform(1.0, 8.0) / np.linalg.norm(k)
        wave = np.cos(d @ k + rng.uniform(0, 2 * np.pi))
        base += wave[..., None] * rng.uniform(0.05, 0.25, size=channels)
    for _ in range(4):
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        cap = (d @ axis > rng.uniform(0.3, 0.9)).astype(np.float64)
        base += cap[..., None] * rng.uniform(-0.4, 0.4, size=channels)
    return np.clip(0.5 + base, 0.0, 1.0)


def synthetic_erp(height: int, seed: int, channels: int = 3) -> np.ndarray:
    width = 2 * height
    theta = np.pi * (np.arange(height) + 0.5) / height
    phi = 2 * np.pi * (np.arange(width) + 0.5) / width
    return synthetic_field(theta[:, None], phi[None, :], seed, channels)
