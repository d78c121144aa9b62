"""Centered unitary 2-D Fourier transforms and channel concatenation.

Images are complex ``(H, W)`` arrays; feature tensors are ``(d, H, W)``
arrays (channel first, ``m = H * W`` spatial locations). Any leading batch
axes are carried through unchanged.
"""
from __future__ import annotations

import numpy as np

from .errors import InvalidInputError, ShapeError


def check_finite(x: np.ndarray, name: str = "input") -> np.ndarray:
    x = np.asarray(x)
    if not np.all(np.isfinite(x)):
        raise InvalidInputError(f"{name} contains non-finite values")
    return x


def fft2c(x: np.ndarray) -> np.ndarray:
    """Unitary DFT over the last two axes with DC moved to the array center."""
    x = check_finite(x, "image")
    return np.fft.fftshift(
        np.fft.fft2(np.fft.ifftshift(x, axes=(-2, -1)), norm="ortho"), axes=(-2, -1)
    )


def ifft2c(k: np.ndarray) -> np.ndarray:
    """Inverse (and adjoint) of :func:`fft2c`."""
    k = check_finite(k, "k-space")
    return np.fft.fftshift(
        np.fft.ifft2(np.fft.ifftshift(k, axes=(-2, -1)), norm="ortho"), axes=(-2, -1)
    )


def concat_channels(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape[-2:] != b.shape[-2:] or a.shape[:-3] != b.shape[:-3]:
        raise ShapeError(f"cannot concatenate features {a.shape} and {b.shape}")
    return np.concatenate([a, b], axis=-3)


def inner(a: np.ndarray, b: np.ndarray) -> float:
    """Real inner product <a, b> = Re sum(conj(a) * b) of the (re, im) pairs."""
    return float(np.real(np.vdot(a, b)))
