"""Frozen linear image codec: truncated orthonormal 2-D DCT.

``encode`` keeps the ``latent_dim`` lowest-frequency coefficients in JPEG
zigzag order; ``decode`` zero-fills the rest and inverts. Because the basis
rows are orthonormal, ``encode(decode(z)) == z`` on the latent space.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .autodiff import Tensor, clip_straight_through, matmul

__all__ = [
    "ImageSample",
    "zigzag_indices",
    "dct_matrix",
    "dct_basis",
    "encode",
    "decode",
    "decode_tensor",
    "DCTCodec",
]


@dataclass(frozen=True)
class ImageSample:
    pixels: np.ndarray
    label: int

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim != 2:
            raise ValueError(f"pixels must be a 2-D grid, got shape {px.shape}")
        if px.min() < 0.0 or px.max() > 1.0:
            raise ValueError("pixel values must lie in [0, 1]")
        if int(self.label) < 0:
            raise ValueError(f"negative label {self.label}")
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)
        object.__setattr__(self, "label", int(self.label))


def zigzag_indices(h: int, w: int) -> list:
    """(row, col) frequency pairs in JPEG zigzag order."""
    order = []
    for s in range(h + w - 1):
        diag = [(i, s - i) for i in range(max(0, s - w + 1), min(h, s + 1))]
        # even diagonals run bottom-left to top-right
        order.extend(reversed(diag) if s % 2 == 0 else diag)
    return order


def dct_matrix(n: int) -> np.ndarray:
    """Orthonormal DCT-II matrix ``C`` with ``C @ x`` the transform of ``x``."""
    k = np.arange(n)[:, None]
    i = np.arange(n)[None, :]
    c = np.cos(np.pi * (2 * i + 1) * k / (2 * n)) * np.sqrt(2.0 / n)
    c[0] /= np.sqrt(2.0)
    return c


@lru_cache(maxsize=None)
def dct_basis(h: int = 16, w: int = 16, latent_dim: int = 64) -> np.ndarray:
    """Rows are the kept basis images, flattened: shape ``(latent_dim, h * w)``."""
    if not 1 <= latent_dim <= h * w:
        raise ValueError(f"latent_dim must be in [1, {h * w}], got {latent_dim}")
    ch, cw = dct_matrix(h), dct_matrix(w)
    rows = [np.outer(ch[u], cw[v]).reshape(-1) for u, v in zigzag_indices(h, w)[:latent_dim]]
    basis = np.stack(rows)
    basis.setflags(write=False)
    return basis


def _as_batch(pixels, image_shape) -> tuple[np.ndarray, bool]:
    x = np.asarray(pixels, dtype=np.float64)
    single = x.ndim == 2
    if single:
        x = x[None]
    if x.ndim != 3 or x.shape[1:] != tuple(image_shape):
        raise ValueError(f"expected images of shape {tuple(image_shape)}, got {np.shape(pixels)}")
    return x, single


def encode(pixels, image_shape=(16, 16), latent_dim: int = 64) -> np.ndarray:
    """Latents for one ``(H, W)`` image or a ``(N, H, W)`` batch."""
    x, single = _as_batch(pixels, image_shape)
    z = x.reshape(len(x), -1) @ dct_basis(*image_shape, latent_dim).T
    return z[0] if single else z


def decode(z, image_shape=(16, 16), clamp: bool = True) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 1
    z2 = z[None] if single else z
    if z2.ndim != 2:
        raise ValueError(f"latents must be 1-D or 2-D, got shape {z.shape}")
    basis = dct_basis(*image_shape, z2.shape[1])
    x = (z2 @ basis).reshape((len(z2),) + tuple(image_shape))
    if clamp:
        x = np.clip(x, 0.0, 1.0)
    return x[0] if single else x


def decode_tensor(z: Tensor, image_shape=(16, 16), clamp: bool = True) -> Tensor:
    """Differentiable decode to flattened pixels ``(B, H * W)``.

    The clamp uses a straight-through gradient.
    """
    if z.data.ndim != 2:
        raise ValueError(f"decode_tensor expects (B, d) latents, got {z.shape}")
    x = matmul(z, Tensor(dct_basis(*image_shape, z.shape[1])))
    return clip_straight_through(x, 0.0, 1.0) if clamp else x


class DCTCodec(TransformerMixin, BaseEstimator):
    """scikit-learn wrapper around :func:`encode` / :func:`decode`.

    Accepts images as ``(n, H, W)`` or flattened ``(n, H * W)`` arrays.
    """

    def __init__(self, image_shape=(16, 16), latent_dim=64):
        self.image_shape = image_shape
        self.latent_dim = latent_dim

    def fit(self, X=None, y=None):
        h, w = self.image_shape
        self.components_ = dct_basis(h, w, self.latent_dim)
        self.n_features_in_ = h * w
        return self

    def _images(self, X) -> np.ndarray:
        X = check_array(X, allow_nd=True, ensure_min_features=1)
        return X.reshape((len(X),) + tuple(self.image_shape))

    def transform(self, X):
        check_is_fitted(self, "components_")
        return encode(self._images(X), self.image_shape, self.latent_dim)

    def inverse_transform(self, Z):
        check_is_fitted(self, "components_")
        Z = check_array(Z)
        if Z.shape[1] != self.latent_dim:
            raise ValueError(f"expected {self.latent_dim} latent features, got {Z.shape[1]}")
        return decode(Z, self.image_shape)
