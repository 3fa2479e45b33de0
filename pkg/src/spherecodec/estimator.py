"""scikit-learn style wrappers.

``ErpToHealpix`` and ``HealpixToErp`` are stateless transformers;
``SphericalImageCompressor`` trains a codec in ``fit``, turns images into
``.osic`` byte strings in ``transform`` and back in ``inverse_transform``::

    pipe = make_pipeline(ErpToHealpix(n_side=64), SphericalImageCompressor(lmbda=0.0067))
    streams = pipe.fit(erp_images).transform(erp_images)
"""

from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .codec import BitstreamContainer, decode_image, encode_image
from .healpix import build_grid
from .model import ModelConfig, SphereCompressionModel
from .resample import erp_to_healpix, healpix_to_erp
from .training import DISTORTION_SCALE, train


def check_sphere_batch(X, channels: int | None = None):
    """Validate a batch of sphere signals; returns ``(X, n_side)``.

    Accepts ``(n_images, n_pix, C)`` or a single ``(n_pix, C)`` signal.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 2:
        X = X[None]
    if X.ndim != 3:
        raise ValueError(f"expected a 3D array (n_images, n_pix, channels), got shape {X.shape}")
    n_side = int(round((X.shape[1] / 12) ** 0.5))
    if n_side < 1 or 12 * n_side * n_side != X.shape[1]:
        raise ValueError(f"{X.shape[1]} pixels is not a HEALPix pixel count")
    build_grid(n_side)
    if channels is not None and X.shape[2] != channels:
        raise ValueError(f"expected {channels} channels, got {X.shape[2]}")
    if not np.all(np.isfinite(X)):
        raise ValueError("input contains NaN or infinity")
    return X, n_side


def check_erp_batch(X):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 3:
        X = X[..., None]
    if X.ndim != 4 or X.shape[2] != 2 * X.shape[1]:
        raise ValueError(f"expected ERP images (n_images, H, 2H, C), got shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ValueError("input contains NaN or infinity")
    return X


class ErpToHealpix(TransformerMixin, BaseEstimator):
    def __init__(self, n_side: int = 64):
        self.n_side = n_side

    def fit(self, X, y=None):
        check_erp_batch(X)
        build_grid(self.n_side)
        return self

    def transform(self, X):
        X = check_erp_batch(X)
        return np.stack([erp_to_healpix(img, self.n_side) for img in X])


class HealpixToErp(TransformerMixin, BaseEstimator):
    def __init__(self, height: int = 128, mode: str = "nearest"):
        self.height = height
        self.mode = mode

    def fit(self, X, y=None):
        check_sphere_batch(X)
        return self

    def transform(self, X):
        X, _ = check_sphere_batch(X)
        return np.stack([healpix_to_erp(x, 2 * self.height, self.height, self.mode) for x in X])


class SphericalImageCompressor(TransformerMixin, BaseEstimator):
    """Learned on-the-sphere image codec.

    Parameters
    ----------
    n_channels, latent_channels : int
        Backbone width N and latent width M.
    lmbda : float
        Rate-distortion trade-off; distortion is the MSE in 8-bit units.
    unpool : {"tconv", "shuffle"}
        Unpooling operator in the synthesis networks.
    hops : int
        Hop count of the image autoencoder's resampling convolutions.
    n_steps, batch_size, learning_rate : training schedule.
    patch_depth : int or None
        Depth of the nested training patches; ``None`` trains on whole spheres.
    random_state : int
        Seeds initialization, patch sampling and quantization noise.
    """

    def __init__(
        self,
        n_channels: int = 32,
        latent_channels: int = 48,
        lmbda: float = 0.0067,
        unpool: str = "tconv",
        hops: int = 2,
        n_steps: int = 2000,
        batch_size: int = 1,
        patch_depth: int | None = None,
        learning_rate: float = 1e-4,
        random_state: int = 0,
    ):
        self.n_channels = n_channels
        self.latent_channels = latent_channels
        self.lmbda = lmbda
        self.unpool = unpool
        self.hops = hops
        self.n_steps = n_steps
        self.batch_size = batch_size
        self.patch_depth = patch_depth
        self.learning_rate = learning_rate
        self.random_state = random_state

    def _config(self, channels: int) -> ModelConfig:
        return ModelConfig(
            n=self.n_channels,
            m=self.latent_channels,
            in_channels=channels,
            unpool=self.unpool,
            hops=self.hops,
            lmbda=self.lmbda,
        )

    def fit(self, X, y=None):
        X, n_side = check_sphere_batch(X)
        if not self.lmbda > 0:
            raise ValueError("lmbda must be positive")
        torch.manual_seed(self.random_state)
        model = SphereCompressionModel(self._config(X.shape[2]))
        self.training_log_ = train(
            model,
            X.astype(np.float32),
            self.lmbda,
            self.n_steps,
            batch_size=self.batch_size,
            patch_depth=self.patch_depth,
            lr=self.learning_rate,
            seed=self.random_state,
        )
        self.model_ = model.double().eval()
        self.n_side_ = n_side
        self.n_features_in_ = X.shape[2]
        return self

    @classmethod
    def from_model(cls, model: SphereCompressionModel) -> SphericalImageCompressor:
        cfg = model.config
        est = cls(
            n_channels=cfg.n,
            latent_channels=cfg.m,
            lmbda=cfg.lmbda,
            unpool=cfg.unpool,
            hops=cfg.hops,
            n_steps=0,
        )
        est.model_ = model.double().eval()
        est.n_features_in_ = cfg.in_channels
        est.n_side_ = None
        return est

    def transform(self, X):
        """Encode every image into ``.osic`` bytes (object array)."""
        check_is_fitted(self, "model_")
        X, _ = check_sphere_batch(X, self.n_features_in_)
        out = np.empty(len(X), dtype=object)
        for i, x in enumerate(X):
            out[i] = encode_image(x, self.model_)[0].serialize()
        return out

    def inverse_transform(self, streams):
        check_is_fitted(self, "model_")
        return np.stack([decode_image(BitstreamContainer.parse(bytes(s)), self.model_) for s in streams])

    def score(self, X, y=None) -> float:
        """Negative mean rate-distortion cost with actual coded rates."""
        check_is_fitted(self, "model_")
        X, _ = check_sphere_batch(X, self.n_features_in_)
        costs = []
        for x in X:
            container, x_hat = encode_image(x, self.model_)
            mse = float(np.mean((x - x_hat) ** 2))
            costs.append(container.bpp() + self.lmbda * DISTORTION_SCALE * mse)
        return -float(np.mean(costs))
