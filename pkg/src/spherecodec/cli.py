"""Command-line interface.

Machine-readable CSV goes to stdout, human-readable messages to stderr.
Exit codes: 0 success, 1 unexpected failure, 2 bad input or arguments,
3 undecodable stream, 4 training diverged.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
from pathlib import Path

import numpy as np
import torch

from .codec import BitstreamContainer, ContainerError, WrongModelError, decode_image, encode_image
from .healpix import InvalidResolutionError, build_grid
from .metrics import IncomparableCurvesError, RDCurve, bd_rate, format_db, psnr, ws_psnr
from .model import (
    CheckpointError,
    ModelConfig,
    SphereCompressionModel,
    count_params,
    load_checkpoint,
    load_config,
    save_checkpoint,
    unpool_param_count,
)
from .rangecoder import CorruptStreamError
from .resample import erp_to_healpix, healpix_to_erp, read_erp, write_erp
from .signal import SphereSignal
from .training import TrainingDivergedError, train

SPHERE_SUFFIX = ".osph"
ERP_SUFFIXES = (".ppm", ".pgm", ".pnm", ".oerp")


class UsageError(Exception):
    pass


def _say(msg: str) -> None:
    print(msg, file=sys.stderr)


def _load_model(path) -> SphereCompressionModel:
    if path is None or not Path(path).is_file():
        raise UsageError(f"model not found: {path}")
    try:
        return load_checkpoint(path)
    except CheckpointError as exc:
        raise UsageError(f"cannot load model {path}: {exc}") from None


def _load_sphere(path, n_side) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"input not found: {path}")
    if path.suffix == SPHERE_SUFFIX:
        return SphereSignal.load(path).values
    if path.suffix.lower() in ERP_SUFFIXES:
        if n_side is None:
            raise UsageError("--nside is required for ERP input")
        return erp_to_healpix(read_erp(path), n_side)
    raise UsageError(f"unrecognized input format: {path}")


def _as_erp(path, width) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"image not found: {path}")
    if path.suffix == SPHERE_SUFFIX:
        return healpix_to_erp(SphereSignal.load(path).values, width, width // 2)
    return read_erp(path)


def _grid_of(x):
    return build_grid(int(round((x.shape[0] / 12) ** 0.5)))


def cmd_encode(args) -> int:
    model = _load_model(args.model)
    x = _load_sphere(args.input, args.nside)
    try:
        model.check_frame(_grid_of(x))
    except ValueError as exc:
        raise UsageError(f"n_side incompatible with the model: {exc}") from None
    if x.shape[1] != model.config.in_channels:
        raise UsageError(f"input has {x.shape[1]} channels, model expects {model.config.in_channels}")
    container, _ = encode_image(x, model)
    data = container.serialize()
    out = Path(args.out or Path(args.input).with_suffix(".osic"))
    out.write_bytes(data)
    bpp = container.bpp()
    print("file,bpp")
    print(f"{out},{bpp!r}")
    _say(f"{out} written, R={bpp:.6f} bpp")
    return 0


def cmd_decode(args) -> int:
    model = _load_model(args.model)
    path = Path(args.input)
    if not path.is_file():
        raise UsageError(f"input not found: {path}")
    try:
        x_hat = decode_image(BitstreamContainer.parse(path.read_bytes()), model)
    except (ContainerError, CorruptStreamError, WrongModelError) as exc:
        _say(f"cannot decode {path}: {exc}")
        return 3
    out = Path(args.out or path.with_suffix(SPHERE_SUFFIX))
    if out.suffix == SPHERE_SUFFIX:
        SphereSignal(int(round((x_hat.shape[0] / 12) ** 0.5)), x_hat).save(out)
    else:
        width = args.width or 4 * int(round((x_hat.shape[0] / 12) ** 0.5))
        if width % 2:
            raise UsageError("--width must be even")
        write_erp(out, healpix_to_erp(x_hat, width, width // 2))
    _say(f"{out} written")
    return 0


def _eval_pair(ref, test, width, peak):
    a = _as_erp(ref, width)
    b = _as_erp(test, width)
    if a.shape != b.shape:
        raise UsageError(f"image sizes differ: {a.shape} vs {b.shape}")
    return psnr(a, b, peak), ws_psnr(a, b, peak)


def cmd_eval(args) -> int:
    ref, test = Path(args.reference), Path(args.test)
    if ref.is_dir():
        names = sorted(p.name for p in ref.iterdir() if p.is_file())
        if not names:
            raise UsageError(f"no images in {ref}")
        scores = [_eval_pair(ref / n, test / n, args.width, args.peak) for n in names]
        # average in dB over the image set
        p = float(np.mean([s[0] for s in scores]))
        w = float(np.mean([s[1] for s in scores]))
    else:
        p, w = _eval_pair(ref, test, args.width, args.peak)
    print("psnr,wspsnr")
    print(f"{format_db(p)},{format_db(w)}")
    return 0


def _sweep(models_dir: Path, images_dir: Path, width: int, n_side) -> RDCurve:
    models = sorted(models_dir.glob("*.osck"))
    images = sorted(p for p in images_dir.iterdir() if p.suffix in (SPHERE_SUFFIX, *ERP_SUFFIXES))
    if not models or not images:
        raise UsageError("rd-curve needs checkpoints (*.osck) and images")
    points = []
    for mp in models:
        model = load_checkpoint(mp)
        rates, quals = [], []
        for ip in images:
            x = _load_sphere(ip, n_side)
            container, x_hat = encode_image(x, model)
            rates.append(container.bpp())
            quals.append(ws_psnr(healpix_to_erp(x, width, width // 2), healpix_to_erp(x_hat, width, width // 2)))
            _say(f"{mp.name} {ip.name}: R={rates[-1]:.5f} WS-PSNR={quals[-1]:.3f}")
        points.append((float(np.mean(rates)), float(np.mean(quals))))
    return RDCurve(points)


def cmd_rd_curve(args) -> int:
    if args.curve:
        curve = RDCurve.from_csv(args.curve)
    elif args.models and args.images:
        curve = _sweep(Path(args.models), Path(args.images), args.width or 256, args.nside)
    else:
        raise UsageError("give --curve CSV or --models DIR with --images DIR")
    if len(curve) < 2:
        raise UsageError("an RD curve needs at least two points")
    if args.out:
        curve.to_csv(args.out)
    curve.write(sys.stdout)
    if args.reference:
        try:
            value = bd_rate(RDCurve.from_csv(args.reference), curve, method=args.method)
        except (IncomparableCurvesError, ValueError) as exc:
            raise UsageError(str(exc)) from None
        _say(f"BD-rate vs {args.reference}: {value:+.2f}%")
        print(f"# bd_rate_percent,{value!r}")
    return 0


def unpool_table(config: ModelConfig) -> list[tuple]:
    """Rows ``(network, position, L_in, L_out, tconv, shuffle, ratio)`` for every unpooling layer."""
    rows = []
    start = {"decoder": config.m}
    for net in ("decoder", "hyper_decoder"):
        c = start.get(net)
        if c is None:
            # hyper decoder input = hyper encoder output width
            c = config.m
            for tok in config.hyper_encoder:
                kind, *a = tok.split(":")
                if kind in ("conv", "down", "up"):
                    c = config.resolve(a[0])
        for pos, tok in enumerate(getattr(config, net)):
            kind, *a = tok.split(":")
            if kind not in ("conv", "down", "up"):
                continue
            c_out = config.resolve(a[0])
            if kind == "up":
                t = unpool_param_count(c, c_out, "tconv")
                s = unpool_param_count(c, c_out, "shuffle")
                rows.append((net, pos, c, c_out, t, s, s / t))
            c = c_out
    return rows


def cmd_bench_params(args) -> int:
    config = load_config(args.config) if args.config else ModelConfig(n=args.n, m=args.m)
    rows = unpool_table(config)
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["network", "position", "l_in", "l_out", "tconv_params", "shuffle_params", "ratio"])
    for r in rows:
        w.writerow([*r[:6], f"{r[6]:g}"])
    try:
        totals = {
            mode: sum(c for _, _, c in count_params(ModelConfig(**{**config.__dict__, "unpool": mode})))
            for mode in ("shuffle", "tconv")
        }
    except ValueError as exc:
        _say(f"whole-model totals unavailable: {exc}")
    else:
        _say(
            f"total parameters: shuffle={totals['shuffle']:,} tconv={totals['tconv']:,} "
            f"(factor {totals['shuffle'] / totals['tconv']:.2f})"
        )
    return 0


def _load_dataset(path: Path, n_side) -> np.ndarray:
    files = sorted(p for p in path.iterdir() if p.suffix in (SPHERE_SUFFIX, *ERP_SUFFIXES))
    if not files:
        raise UsageError(f"no images in {path}")
    return np.stack([_load_sphere(p, n_side) for p in files])


def cmd_train_toy(args) -> int:
    if not args.lmbda > 0:
        raise UsageError("--lambda must be positive")
    data_dir = Path(args.data)
    if not data_dir.is_dir():
        raise UsageError(f"dataset directory not found: {data_dir}")
    images = _load_dataset(data_dir, args.nside)
    config = load_config(args.config) if args.config else ModelConfig(
        n=args.n, m=args.m, unpool=args.unpool, in_channels=images.shape[2]
    )
    config = ModelConfig(**{**config.__dict__, "lmbda": args.lmbda})
    torch.manual_seed(args.seed)
    model = SphereCompressionModel(config)
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["step", "loss", "rate", "distortion"])

    def log(step, hist):
        w.writerow([step, repr(hist.loss[-1]), repr(hist.rate[-1]), repr(hist.distortion[-1])])

    try:
        train(
            model,
            images.astype(np.float32),
            args.lmbda,
            args.steps,
            batch_size=args.batch_size,
            lr=args.lr,
            seed=args.seed,
            callback=log,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    except TrainingDivergedError as exc:
        save_checkpoint(model.double(), args.out)
        _say(f"{exc}; last good checkpoint written to {args.out}")
        return 4
    save_checkpoint(model.double(), args.out)
    _say(f"checkpoint written to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="spherecodec", description="Learned image compression on HEALPix spheres.")
    sub = p.add_subparsers(dest="command", required=True)

    e = sub.add_parser("encode", help="compress an ERP or sphere image")
    e.add_argument("input")
    e.add_argument("--model", required=True)
    e.add_argument("--out")
    e.add_argument("--nside", type=int)
    e.set_defaults(func=cmd_encode)

    d = sub.add_parser("decode", help="decompress an .osic file")
    d.add_argument("input")
    d.add_argument("--model", required=True)
    d.add_argument("--out")
    d.add_argument("--width", type=int)
    d.set_defaults(func=cmd_decode)

    v = sub.add_parser("eval", help="PSNR and WS-PSNR of a test image (or directory) against a reference")
    v.add_argument("reference")
    v.add_argument("test")
    v.add_argument("--peak", type=float, default=1.0)
    v.add_argument("--width", type=int, default=256)
    v.set_defaults(func=cmd_eval)

    r = sub.add_parser("rd-curve", help="RD points over a lambda ladder and BD-rate against a reference")
    r.add_argument("--models")
    r.add_argument("--images")
    r.add_argument("--curve")
    r.add_argument("--reference")
    r.add_argument("--method", choices=("cubic", "pchip"), default="cubic")
    r.add_argument("--nside", type=int)
    r.add_argument("--width", type=int)
    r.add_argument("--out")
    r.set_defaults(func=cmd_rd_curve)

    b = sub.add_parser("bench-params", help="unpooling parameter counts, shuffle vs transposed conv")
    b.add_argument("--config")
    b.add_argument("--n", type=int, default=128)
    b.add_argument("--m", type=int, default=192)
    b.set_defaults(func=cmd_bench_params)

    t = sub.add_parser("train-toy", help="train a small model on a directory of images")
    t.add_argument("--data", required=True)
    t.add_argument("--config")
    t.add_argument("--lambda", dest="lmbda", type=float, required=True)
    t.add_argument("--steps", type=int, default=2000)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--nside", type=int, default=64)
    t.add_argument("--n", type=int, default=32)
    t.add_argument("--m", type=int, default=48)
    t.add_argument("--unpool", choices=("shuffle", "tconv"), default="tconv")
    t.add_argument("--batch-size", type=int, default=1)
    t.add_argument("--lr", type=float, default=1e-4)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train_toy)
    return p


def main(argv=None) -> int:
    threads = os.environ.get("OSLO_THREADS")
    if threads:
        torch.set_num_threads(max(1, int(threads)))
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        _say(f"error: {exc}")
        return 2
    except (InvalidResolutionError, ValueError) as exc:
        _say(f"error: {exc}")
        return 2


if __name__ == "__main__":
    sys.exit(main())
