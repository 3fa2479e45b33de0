"""Learned image compression for signals sampled on a HEALPix sphere."""

from .codec import BitstreamContainer, decode_image, encode_image
from .estimator import ErpToHealpix, HealpixToErp, SphericalImageCompressor
from .healpix import HealpixGrid, InvalidResolutionError, ang2pix, build_grid, pix2ang
from .metrics import RDCurve, bd_rate, psnr, ws_psnr
from .model import ModelConfig, SphereCompressionModel, load_checkpoint, save_checkpoint
from .ops import conv_down4, conv_h0, conv_h1, conv_hn, masked_conv_h1, shuffle_up4, tconv_up4
from .resample import erp_to_healpix, healpix_to_erp
from .signal import SphereSignal
from .training import TrainingLog, train

__version__ = "0.1.0"

__all__ = [
    "BitstreamContainer",
    "ErpToHealpix",
    "HealpixGrid",
    "HealpixToErp",
    "InvalidResolutionError",
    "ModelConfig",
    "RDCurve",
    "SphereCompressionModel",
    "SphereSignal",
    "SphericalImageCompressor",
    "TrainingLog",
    "ang2pix",
    "bd_rate",
    "build_grid",
    "conv_down4",
    "conv_h0",
    "conv_h1",
    "conv_hn",
    "decode_image",
    "encode_image",
    "erp_to_healpix",
    "healpix_to_erp",
    "load_checkpoint",
    "masked_conv_h1",
    "pix2ang",
    "psnr",
    "save_checkpoint",
    "shuffle_up4",
    "tconv_up4",
    "train",
    "ws_psnr",
]
