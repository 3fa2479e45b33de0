"""Hyperprior compression model with a causal spatial context.

Layer stacks are described by short tokens so architecture variants are
configuration data:

``down:<ch>[:<hops>]``  strided n-hop convolution, resolution / 4
``up:<ch>[:<hops>]``    unpooling (tconv or shuffle) + fine hops, resolution * 4
``conv:<ch>[:<hops>]``  n-hop convolution (hops 0 = per-pixel matrix product)
``relu``, ``rb`` (one residual block), ``rbs`` (three), ``attn``

Channel expressions accept integers and ``N``, ``M``, ``C`` multiples such
as ``2M`` or ``10M/3``.  Omitted hop counts default to ``hops`` for the image
autoencoder and ``hyper_hops`` for the hyperprior.
"""

from __future__ import annotations

import hashlib
import re
import struct
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
import torch
from torch import nn

from . import layers as L
from .rate import SIGMA_MIN, gaussian_rate_bits, quantize

ENCODER = "down:N, rbs, down:N, rbs, attn, down:N, rbs, down:M, attn"
DECODER = "attn, up:N, rbs, up:N, attn, rbs, up:N, rbs, up:C"
HYPER_ENCODER = "conv:N, relu, down:N, relu, conv:N"
HYPER_DECODER = "conv:N, relu, up:N, relu, conv:2M"
AGGREGATION = "conv:10M/3:0, relu, conv:8M/3:0, relu, conv:2M:0"

_TUPLE_KEYS = ("encoder", "decoder", "hyper_encoder", "hyper_decoder", "aggregation")


def _tokens(spec: str) -> tuple[str, ...]:
    return tuple(t.strip() for t in spec.split(",") if t.strip())


@dataclass(frozen=True)
class ModelConfig:
    n: int = 32
    m: int = 48
    in_channels: int = 3
    unpool: str = "tconv"
    hops: int = 2
    hyper_hops: int = 1
    down_mode: str = "stride"
    lmbda: float = 0.0067
    encoder: tuple[str, ...] = field(default=_tokens(ENCODER))
    decoder: tuple[str, ...] = field(default=_tokens(DECODER))
    hyper_encoder: tuple[str, ...] = field(default=_tokens(HYPER_ENCODER))
    hyper_decoder: tuple[str, ...] = field(default=_tokens(HYPER_DECODER))
    aggregation: tuple[str, ...] = field(default=_tokens(AGGREGATION))

    def __post_init__(self):
        if self.unpool not in ("tconv", "shuffle"):
            raise ValueError(f"unpool must be 'tconv' or 'shuffle', got {self.unpool!r}")
        if self.down_mode not in ("stride", "pool"):
            raise ValueError(f"down_mode must be 'stride' or 'pool', got {self.down_mode!r}")
        if not self.lmbda > 0:
            raise ValueError("lambda must be positive")
        if self.n < 2 or self.m < 2:
            raise ValueError("channel widths must be at least 2")

    def resolve(self, expr: str) -> int:
        match = re.fullmatch(r"(\d*)([NMC]?)(?:/(\d+))?", expr.strip())
        if not match or not (match.group(1) or match.group(2)):
            raise ValueError(f"bad channel expression {expr!r}")
        mult = int(match.group(1)) if match.group(1) else 1
        base = {"N": self.n, "M": self.m, "C": self.in_channels, "": 1}[match.group(2)]
        div = int(match.group(3)) if match.group(3) else 1
        return mult * base // div

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name} = {', '.join(v) if f.name in _TUPLE_KEYS else v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> ModelConfig:
        kinds = {f.name: f.type for f in fields(cls)}
        values = {}
        for raw in text.splitlines():
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = (s.strip() for s in line.partition("="))
            if not sep or key not in kinds:
                raise ValueError(f"unknown config line {raw!r}")
            if key in _TUPLE_KEYS:
                values[key] = _tokens(value)
            elif key == "lmbda":
                values[key] = float(value)
            elif key in ("unpool", "down_mode"):
                values[key] = value
            else:
                values[key] = int(value)
        return cls(**values)

    def digest(self) -> bytes:
        return hashlib.blake2b(self.to_text().encode(), digest_size=16).digest()


def load_config(path) -> ModelConfig:
    return ModelConfig.from_text(Path(path).read_text())


def _build(tokens, c_in: int, cfg: ModelConfig, default_hops: int):
    mods = []
    for tok in tokens:
        kind, *args = tok.split(":")
        if kind in ("down", "up", "conv"):
            c_out = cfg.resolve(args[0])
            hops = int(args[1]) if len(args) > 1 else default_hops
            if kind == "down":
                mods.append(L.SphereDown(c_in, c_out, hops, cfg.down_mode))
            elif kind == "up":
                mods.append(L.SphereUp(c_in, c_out, hops, cfg.unpool))
            else:
                mods.append(L.Conv0(c_in, c_out) if hops == 0 else L.SphereConv(c_in, c_out, hops))
            c_in = c_out
        elif kind == "relu":
            mods.append(L.ReLU())
        elif kind == "rb":
            mods.append(L.ResidualBlock(c_in))
        elif kind == "rbs":
            mods.append(L.ResidualStack(c_in))
        elif kind == "attn":
            mods.append(L.Attention(c_in))
        else:
            raise ValueError(f"unknown layer token {tok!r}")
    return L.SphereSequential(*mods), c_in


def _count_resamples(tokens, kind):
    return sum(1 for t in tokens if t.split(":")[0] == kind)


class SphereCompressionModel(nn.Module):
    """Image autoencoder, hyperprior, masked context model and parameter aggregation."""

    def __init__(self, config: ModelConfig | None = None):
        super().__init__()
        cfg = config or ModelConfig()
        self.config = cfg
        self.g_a, c_lat = _build(cfg.encoder, cfg.in_channels, cfg, cfg.hops)
        if c_lat != cfg.m:
            raise ValueError(f"encoder ends with {c_lat} channels, expected M={cfg.m}")
        self.g_s, c_rec = _build(cfg.decoder, cfg.m, cfg, cfg.hops)
        if c_rec != cfg.in_channels:
            raise ValueError(f"decoder ends with {c_rec} channels, expected {cfg.in_channels}")
        self.h_a, c_hyp = _build(cfg.hyper_encoder, cfg.m, cfg, cfg.hyper_hops)
        self.h_s, c_stat = _build(cfg.hyper_decoder, c_hyp, cfg, cfg.hyper_hops)
        if c_stat != 2 * cfg.m:
            raise ValueError(f"hyper decoder must output 2M={2 * cfg.m} channels, got {c_stat}")
        self.context = L.MaskedConv(cfg.m, 2 * cfg.m)
        self.aggregation, c_par = _build(cfg.aggregation, 4 * cfg.m, cfg, 0)
        if c_par != 2 * cfg.m:
            raise ValueError("parameter aggregation must output 2M channels")
        if any(not isinstance(m, (L.Conv0, L.ReLU)) for m in self.aggregation):
            raise ValueError("parameter aggregation may only use 0-hop convolutions")
        self.hyper_means = nn.Parameter(torch.zeros(c_hyp))
        self.hyper_log_scales = nn.Parameter(torch.zeros(c_hyp))
        downs = _count_resamples(cfg.encoder, "down") + _count_resamples(cfg.hyper_encoder, "down")
        self.latent_levels = _count_resamples(cfg.encoder, "down")
        self.total_levels = downs
        if _count_resamples(cfg.decoder, "up") != self.latent_levels:
            raise ValueError("decoder must mirror the encoder's resolution schedule")
        if _count_resamples(cfg.hyper_decoder, "up") != _count_resamples(cfg.hyper_encoder, "down"):
            raise ValueError("hyper decoder must mirror the hyper encoder")

    @property
    def hyper_channels(self) -> int:
        return self.hyper_means.shape[0]

    def hyper_scales(self) -> torch.Tensor:
        return torch.clamp(torch.exp(self.hyper_log_scales), min=SIGMA_MIN)

    def check_frame(self, frame) -> None:
        depth = getattr(frame, "depth", None)
        levels = self.total_levels
        if frame.n_side < 2**levels or (depth is not None and depth < levels):
            raise ValueError(
                f"input resolution (n_side={frame.n_side}) cannot be downsampled {levels} times"
            )

    def entropy_parameters(self, y_hat, hyper, frame):
        """Means and scales of every latent from hyper features and the causal context."""
        ctx, _ = self.context(y_hat, frame)
        p, _ = self.aggregation(torch.cat([hyper, ctx], dim=-1), frame)
        mu, s = p.chunk(2, dim=-1)
        return mu, SIGMA_MIN + nn.functional.softplus(s)

    @torch.no_grad()
    def sequential_latents(self, hyper, frame, step):
        """Run the context model pixel by pixel in nested order.

        ``step(i, mu_i, sigma_i)`` returns the reconstructed latent row ``i``.
        Each evaluation uses the full-size tensors so that every row is
        computed with exactly the same arithmetic as the parallel pass.
        """
        shape = (*hyper.shape[:-1], self.config.m)
        y_hat = hyper.new_zeros(shape)
        mu_all = torch.empty_like(y_hat)
        sigma_all = torch.empty_like(y_hat)
        for i in range(shape[-2]):
            mu, sigma = self.entropy_parameters(y_hat, hyper, frame)
            mu_all[..., i, :] = mu[..., i, :]
            sigma_all[..., i, :] = sigma[..., i, :]
            y_hat[..., i, :] = step(i, mu[..., i, :], sigma[..., i, :])
        return y_hat, mu_all, sigma_all

    def analysis(self, x, frame):
        self.check_frame(frame)
        y, fy = self.g_a(x, frame)
        z, fz = self.h_a(y, fy)
        return y, fy, z, fz

    def forward(self, x, frame, mode: str = "noise", generator=None):
        y, fy, z, fz = self.analysis(x, frame)
        if mode == "noise":
            z_hat = quantize(z, "noise", generator=generator)
            y_hat = quantize(y, "noise", generator=generator)
            hyper, _ = self.h_s(z_hat, fz)
            mu, sigma = self.entropy_parameters(y_hat, hyper, fy)
        elif mode == "round":
            z_hat = quantize(z, "round", self.hyper_means)
            hyper, _ = self.h_s(z_hat, fz)
            y_det = y.detach()

            def step(i, mu_i, sigma_i):
                return torch.round(y_det[..., i, :] - mu_i) + mu_i

            y_q, mu, sigma = self.sequential_latents(hyper, fy, step)
            y_hat = y_q + (y - y.detach())
        else:
            raise ValueError(f"unknown mode {mode!r}")
        bits_y = gaussian_rate_bits(y_hat, mu, sigma)
        bits_z = gaussian_rate_bits(z_hat, self.hyper_means, self.hyper_scales())
        x_hat, _ = self.g_s(y_hat, fy)
        return {
            "x_hat": x_hat,
            "bits": bits_y + bits_z,
            "bits_y": bits_y,
            "bits_z": bits_z,
            "y": y,
            "y_hat": y_hat,
            "z_hat": z_hat,
            "mu": mu,
            "sigma": sigma,
            "hyper": hyper,
            "frames": (fy, fz),
        }

    def digest(self) -> bytes:
        """16-byte fingerprint of configuration and float64 weights."""
        h = hashlib.blake2b(self.config.to_text().encode(), digest_size=16)
        for name, t in self.state_dict().items():
            h.update(name.encode())
            h.update(t.detach().to(torch.float64).cpu().numpy().astype("<f8").tobytes())
        return h.digest()


def forward_model(x, config: ModelConfig, params: dict | None = None, mode: str = "noise", frame=None, generator=None):
    """Functional entry point: build a model from ``config`` and ``params`` and run it."""
    model = SphereCompressionModel(config).to(x.dtype)
    if params is not None:
        model.load_state_dict(params)
    if frame is None:
        from .healpix import build_grid

        frame = build_grid(_nside_of(x.shape[-2]))
    out = model(x, frame, mode=mode, generator=generator)
    return out["x_hat"], out["bits"], out


def _nside_of(n_pix: int) -> int:
    n_side = int(round((n_pix / 12) ** 0.5))
    if 12 * n_side * n_side != n_pix:
        raise ValueError(f"{n_pix} rows is not a HEALPix pixel count")
    return n_side


def count_params(config: ModelConfig) -> list[tuple[str, str, int]]:
    """Per-layer trainable parameter counts as ``(name, kind, count)`` rows."""
    model = SphereCompressionModel(config)
    rows = []
    for name, mod in model.named_modules():
        own = sum(p.numel() for p in mod.parameters(recurse=False))
        if not own:
            continue
        if isinstance(mod, L.SphereUp):
            kind = mod.unpool
        elif isinstance(mod, L.SphereDown):
            kind = "down"
        elif isinstance(mod, L.MaskedConv):
            kind = "masked"
        elif isinstance(mod, L.Conv0):
            kind = "h0"
        elif isinstance(mod, L.SphereConv):
            kind = f"h{len(mod.weights)}"
        else:
            kind = "prior"
        rows.append((name or "hyperprior", kind, own))
    return rows


def unpool_param_count(c_in: int, c_out: int, unpool: str) -> int:
    base = (9 * c_in + 1) * c_out
    return base if unpool == "tconv" else 4 * base


# ---------------------------------------------------------------- checkpoints

CHECKPOINT_MAGIC = b"OSCK"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(model: SphereCompressionModel, path) -> None:
    text = model.config.to_text().encode()
    out = bytearray(CHECKPOINT_MAGIC)
    out += struct.pack("<H", CHECKPOINT_VERSION)
    out += model.config.digest()
    out += struct.pack("<I", len(text)) + text
    state = model.state_dict()
    out += struct.pack("<I", len(state))
    for name, t in state.items():
        raw = name.encode()
        arr = t.detach().to(torch.float64).cpu().numpy()
        out += struct.pack("<H", len(raw)) + raw
        out += struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += arr.astype("<f8").tobytes()
    Path(path).write_bytes(bytes(out))


def load_checkpoint(path) -> SphereCompressionModel:
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError("not a checkpoint file")
    pos = 4
    try:
        (version,) = struct.unpack_from("<H", data, pos)
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        digest = data[pos + 2 : pos + 18]
        pos += 18
        (n,) = struct.unpack_from("<I", data, pos)
        config = ModelConfig.from_text(data[pos + 4 : pos + 4 + n].decode())
        pos += 4 + n
        if config.digest() != digest:
            raise CheckpointError("config digest mismatch")
        (count,) = struct.unpack_from("<I", data, pos)
        pos += 4
        state = {}
        for _ in range(count):
            (k,) = struct.unpack_from("<H", data, pos)
            name = data[pos + 2 : pos + 2 + k].decode()
            pos += 2 + k
            (ndim,) = struct.unpack_from("<B", data, pos)
            shape = struct.unpack_from(f"<{ndim}I", data, pos + 1)
            pos += 1 + 4 * ndim
            size = int(np.prod(shape, dtype=np.int64)) * 8
            if pos + size > len(data):
                raise CheckpointError(f"truncated tensor {name!r}")
            arr = np.frombuffer(data, dtype="<f8", count=size // 8, offset=pos).reshape(shape)
            state[name] = torch.from_numpy(arr.copy())
            pos += size
    except struct.error as exc:
        raise CheckpointError(f"truncated checkpoint at byte {pos}") from exc
    model = SphereCompressionModel(config).double()
    model.load_state_dict(state)
    return model
