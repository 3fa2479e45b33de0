"""Image-level encoder and decoder with a versioned ``.osic`` container.

Container layout (little-endian)::

    magic "OSIC" | version u16 | n_side u32 | channels u8 | model digest 16B
    | lambda id u8 | hyper length u64 | hyper bytes | main length u64
    | main bytes | crc32 u32 (over everything before it)
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

import numpy as np
import torch

from .entropy import decode_gaussian, decode_latents_sequential, encode_gaussian
from .healpix import build_grid
from .model import SphereCompressionModel, _nside_of
from .rangecoder import CorruptStreamError
from .rate import LAMBDAS

MAGIC = b"OSIC"
VERSION = 1
NO_LAMBDA_ID = 255


class ContainerError(ValueError):
    pass


class UnsupportedVersionError(ContainerError):
    pass


class WrongModelError(ValueError):
    pass


@dataclass(frozen=True)
class BitstreamContainer:
    n_side: int
    channels: int
    model_digest: bytes
    lambda_id: int
    hyper: bytes
    main: bytes

    def serialize(self) -> bytes:
        out = bytearray(MAGIC)
        out += struct.pack("<HIB", VERSION, self.n_side, self.channels)
        out += self.model_digest
        out += struct.pack("<B", self.lambda_id)
        out += struct.pack("<Q", len(self.hyper)) + self.hyper
        out += struct.pack("<Q", len(self.main)) + self.main
        out += struct.pack("<I", zlib.crc32(out))
        return bytes(out)

    @classmethod
    def parse(cls, data: bytes) -> BitstreamContainer:
        def need(pos, n):
            if pos + n > len(data):
                raise ContainerError(f"container truncated at byte offset {len(data)} (needed {pos + n})")

        need(0, 4)
        if data[:4] != MAGIC:
            raise ContainerError("not an .osic container")
        need(4, 2)
        (version,) = struct.unpack_from("<H", data, 4)
        if version != VERSION:
            raise UnsupportedVersionError(f"unsupported container version {version}")
        need(6, 4 + 1 + 16 + 1)
        n_side, channels = struct.unpack_from("<IB", data, 6)
        digest = bytes(data[11:27])
        (lambda_id,) = struct.unpack_from("<B", data, 27)
        pos = 28
        streams = []
        for _ in range(2):
            need(pos, 8)
            (n,) = struct.unpack_from("<Q", data, pos)
            need(pos + 8, n)
            streams.append(bytes(data[pos + 8 : pos + 8 + n]))
            pos += 8 + n
        need(pos, 4)
        (crc,) = struct.unpack_from("<I", data, pos)
        if zlib.crc32(data[:pos]) != crc:
            raise ContainerError("checksum mismatch: container is corrupt")
        if pos + 4 != len(data):
            raise ContainerError(f"{len(data) - pos - 4} trailing bytes after container")
        return cls(n_side, channels, digest, lambda_id, streams[0], streams[1])

    @property
    def n_bytes(self) -> int:
        return len(self.serialize())

    def bpp(self) -> float:
        return 8.0 * self.n_bytes / (12 * self.n_side**2)


def lambda_id(lmbda: float) -> int:
    for i, v in enumerate(LAMBDAS):
        if abs(v - lmbda) <= 1e-12 * max(1.0, v):
            return i
    return NO_LAMBDA_ID


def _as_input(x, model) -> torch.Tensor:
    x = torch.as_tensor(np.asarray(x, dtype=np.float64))
    if x.dim() != 2 or x.shape[1] != model.config.in_channels:
        raise ValueError(f"expected a (n_pix, {model.config.in_channels}) signal, got {tuple(x.shape)}")
    if not torch.isfinite(x).all():
        raise ValueError("input contains non-finite values")
    return x


def _inference_model(model: SphereCompressionModel) -> SphereCompressionModel:
    if next(model.parameters()).dtype != torch.float64:
        raise TypeError("coding requires a float64 model; call model.double()")
    return model.eval()


@torch.no_grad()
def encode_image(x, model: SphereCompressionModel):
    """Encode a sphere signal of shape ``(n_pix, channels)``.

    Returns ``(container, x_hat)`` where ``x_hat`` is the reconstruction the
    decoder will produce.
    """
    model = _inference_model(model)
    x = _as_input(x, model)
    grid = build_grid(_nside_of(x.shape[0]))
    y, fy, z, fz = model.analysis(x, grid)

    z_sym = torch.round(z - model.hyper_means)
    z_scales = model.hyper_scales().expand_as(z)
    hyper_bytes = encode_gaussian(z_sym.numpy().astype(np.int64), z_scales.numpy())
    hyper, _ = model.h_s(z_sym + model.hyper_means, fz)

    symbols = []

    def step(i, mu_i, sigma_i):
        s = torch.round(y[i] - mu_i)
        symbols.append(s)
        return s + mu_i

    y_hat, _, sigma = model.sequential_latents(hyper, fy, step)
    main_bytes = encode_gaussian(torch.stack(symbols).numpy().astype(np.int64), sigma.numpy())
    x_hat, _ = model.g_s(y_hat, fy)
    container = BitstreamContainer(
        grid.n_side, model.config.in_channels, model.digest(), lambda_id(model.config.lmbda), hyper_bytes, main_bytes
    )
    return container, x_hat.numpy()


@torch.no_grad()
def decode_image(container: BitstreamContainer | bytes, model: SphereCompressionModel) -> np.ndarray:
    model = _inference_model(model)
    if isinstance(container, (bytes, bytearray)):
        container = BitstreamContainer.parse(bytes(container))
    if container.model_digest != model.digest():
        raise WrongModelError("container was produced by a different model checkpoint")
    if container.channels != model.config.in_channels:
        raise ContainerError("channel count does not match the model")
    grid = build_grid(container.n_side)
    model.check_frame(grid)
    fy = grid
    for _ in range(model.latent_levels):
        fy = fy.coarser()
    fz = fy
    for _ in range(model.total_levels - model.latent_levels):
        fz = fz.coarser()
    n_z = fz.n_pix * model.hyper_channels
    scales = model.hyper_scales().expand(fz.n_pix, -1)
    z_sym = decode_gaussian(container.hyper, scales.numpy())
    if z_sym.size != n_z:
        raise CorruptStreamError("hyper stream has the wrong size")
    z_hat = torch.from_numpy(z_sym.reshape(fz.n_pix, -1)).to(torch.float64) + model.hyper_means
    hyper, _ = model.h_s(z_hat, fz)
    y_hat, _, _ = decode_latents_sequential(container.main, model, hyper, fy)
    x_hat, _ = model.g_s(y_hat, fy)
    return x_hat.numpy()
