"""Equirectangular (ERP) <-> HEALPix resampling and ERP image files.

ERP arrays are ``(H, W, C)`` with ``W = 2H``; pixel ``(u, v)`` has its
center at longitude ``2 pi (u + 1/2) / W`` and colatitude ``pi (v + 1/2) / H``.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .healpix import build_grid, ang2pix

OERP_MAGIC = b"OERP"
_OERP = struct.Struct("<4sHIIIB")


def _as_erp(erp) -> np.ndarray:
    erp = np.asarray(erp, dtype=np.float64)
    if erp.ndim == 2:
        erp = erp[:, :, None]
    if erp.ndim != 3 or erp.shape[0] < 1 or erp.shape[1] != 2 * erp.shape[0]:
        raise ValueError(f"ERP images must be (H, 2H[, C]), got shape {erp.shape}")
    return erp


def erp_to_healpix(erp, n_side: int) -> np.ndarray:
    """Bilinear samples of an ERP image at every HEALPix pixel center."""
    erp = _as_erp(erp)
    h, w, _ = erp.shape
    theta, phi = build_grid(n_side).centers()
    u = phi * w / (2 * np.pi) - 0.5
    v = np.clip(theta * h / np.pi - 0.5, 0.0, h - 1)
    u0 = np.floor(u).astype(np.int64)
    v0 = np.minimum(np.floor(v).astype(np.int64), h - 1)
    du = (u - u0)[:, None]
    dv = (v - v0)[:, None]
    v1 = np.minimum(v0 + 1, h - 1)
    ua, ub = u0 % w, (u0 + 1) % w
    top = erp[v0, ua] * (1 - du) + erp[v0, ub] * du
    bot = erp[v1, ua] * (1 - du) + erp[v1, ub] * du
    return top * (1 - dv) + bot * dv


def healpix_to_erp(x, width: int, height: int, mode: str = "nearest") -> np.ndarray:
    """ERP image whose pixels take the value of the HEALPix cell containing their center.

    ``mode="average"`` averages that cell with its valid neighbors (for
    display only).
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if width != 2 * height or height < 1:
        raise ValueError(f"ERP size must satisfy W = 2H, got {width}x{height}")
    n_side = int(round((x.shape[0] / 12) ** 0.5))
    grid = build_grid(n_side)
    if grid.n_pix != x.shape[0]:
        raise ValueError(f"{x.shape[0]} rows is not a HEALPix pixel count")
    if mode == "average":
        table = grid.neighbor_table
        valid = table >= 0
        summed = x + np.where(valid[..., None], x[np.where(valid, table, 0)], 0.0).sum(axis=1)
        x = summed / (1 + valid.sum(axis=1))[:, None]
    elif mode != "nearest":
        raise ValueError(f"unknown mode {mode!r}")
    theta = np.pi * (np.arange(height) + 0.5) / height
    phi = 2 * np.pi * (np.arange(width) + 0.5) / width
    pix = ang2pix(n_side, theta[:, None], phi[None, :])
    return x[pix]


# ------------------------------------------------------------------ file I/O


def read_pnm(path) -> np.ndarray:
    """Read a binary P5/P6 pixmap (8 or 16 bit) as floats in [0, 1], shape (H, W, C)."""
    data = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError("truncated pixmap header")
        tokens.append(data[start:pos])
    pos += 1
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    channels = {b"P5": 1, b"P6": 3}.get(magic)
    if channels is None:
        raise ValueError(f"unsupported pixmap type {magic!r}")
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    count = w * h * channels
    body = np.frombuffer(data, dtype=dtype, count=count, offset=pos)
    return body.reshape(h, w, channels).astype(np.float64) / maxval


def write_pnm(path, image, bits: int = 8) -> None:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = image[:, :, None]
    h, w, c = image.shape
    if c not in (1, 3):
        raise ValueError("pixmaps hold 1 or 3 channels")
    maxval = (1 << bits) - 1
    q = np.clip(np.round(image * maxval), 0, maxval)
    body = q.astype(">u2" if bits > 8 else "u1").tobytes()
    head = f"{'P5' if c == 1 else 'P6'}\n{w} {h}\n{maxval}\n".encode()
    Path(path).write_bytes(head + body)


def write_oerp(path, image) -> None:
    image = _as_erp(image)
    h, w, c = image.shape
    Path(path).write_bytes(_OERP.pack(OERP_MAGIC, 1, w, h, c, 1) + image.astype("<f8").tobytes())


def read_oerp(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < _OERP.size:
        raise ValueError("truncated ERP header")
    magic, version, w, h, c, tag = _OERP.unpack_from(data)
    if magic != OERP_MAGIC or version != 1 or tag != 1:
        raise ValueError("not a supported raw ERP file")
    body = data[_OERP.size :]
    if len(body) != 8 * w * h * c:
        raise ValueError("ERP payload size does not match the header")
    return np.frombuffer(body, dtype="<f8").reshape(h, w, c).astype(np.float64)


def read_erp(path) -> np.ndarray:
    path = Path(path)
    if path.suffix.lower() in (".pgm", ".ppm", ".pnm"):
        return read_pnm(path)
    return read_oerp(path)


def write_erp(path, image) -> None:
    path = Path(path)
    if path.suffix.lower() in (".pgm", ".ppm", ".pnm"):
        write_pnm(path, image)
    else:
        write_oerp(path, image)
