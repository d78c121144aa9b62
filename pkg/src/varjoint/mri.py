"""Undersampled Cartesian k-space model: radial masks, forward/adjoint and the fidelity term."""
from __future__ import annotations

from pathlib import Path
from typing import NamedTuple

import numpy as np

from .complex_ops import fft2c, ifft2c
from .errors import ShapeError, UnreachableRatioError

RATIO_TOLERANCE = 0.02
MAX_JITTER_TRIES = 64


class KSpaceSample(NamedTuple):
    """Binary mask and full-grid measurements (zero where unsampled)."""

    mask: np.ndarray
    kspace: np.ndarray


def sampling_ratio(mask: np.ndarray) -> float:
    return float(np.count_nonzero(mask)) / mask.size


def _rasterize_spokes(h: int, w: int, angles: np.ndarray) -> np.ndarray:
    cy, cx = h // 2, w // 2
    radius = 0.5 * np.hypot(h, w) + 1.0
    r = np.arange(-radius, radius + 0.25, 0.25)
    ys = np.rint(cy + np.outer(np.sin(angles), r)).astype(np.int64).ravel()
    xs = np.rint(cx + np.outer(np.cos(angles), r)).astype(np.int64).ravel()
    keep = (ys >= 0) & (ys < h) & (xs >= 0) & (xs < w)
    mask = np.zeros((h, w), dtype=bool)
    mask[ys[keep], xs[keep]] = True
    mask[cy, cx] = True
    return mask


def radial_mask(h: int, w: int, target_ratio: float, seed: int) -> np.ndarray:
    """Equiangular radial spokes through the k-space center.

    The spoke count is the one whose rasterized mask comes closest to
    ``target_ratio``; the starting angle is jittered by ``seed``. Raises
    :class:`UnreachableRatioError` when no spoke count lands within
    ``RATIO_TOLERANCE`` of the target.
    """
    if not 0.0 < target_ratio <= 1.0:
        raise ValueError(f"target_ratio must lie in (0, 1], got {target_ratio}")
    if target_ratio == 1.0:
        return np.ones((h, w), dtype=bool)
    rng = np.random.default_rng(seed)
    best, best_err = None, np.inf
    # small grids quantize the ratio coarsely; retry with further seeded jitters
    for _ in range(MAX_JITTER_TRIES):
        jitter = rng.random()
        for n_spokes in range(1, 8 * (h + w) + 1):
            angles = (jitter + np.arange(n_spokes)) * np.pi / n_spokes
            mask = _rasterize_spokes(h, w, angles)
            ratio = sampling_ratio(mask)
            if abs(ratio - target_ratio) < best_err:
                best, best_err = mask, abs(ratio - target_ratio)
            if ratio > target_ratio + RATIO_TOLERANCE:
                break
        if best_err <= RATIO_TOLERANCE:
            break
    if best is None or best_err > RATIO_TOLERANCE:
        raise UnreachableRatioError(
            f"no radial mask on a {h}x{w} grid reaches ratio {target_ratio} +/- {RATIO_TOLERANCE}"
        )
    return best


def _check_mask(x: np.ndarray, mask: np.ndarray) -> None:
    if x.shape[-2:] != mask.shape:
        raise ShapeError(f"image shape {x.shape} does not match mask {mask.shape}")


def forward(x: np.ndarray, mask: np.ndarray) -> np.ndarray:
    _check_mask(x, mask)
    return mask * fft2c(x)


def adjoint(y: np.ndarray, mask: np.ndarray) -> np.ndarray:
    _check_mask(y, mask)
    return ifft2c(mask * y)


def zero_filled(sample: KSpaceSample) -> np.ndarray:
    return adjoint(sample.kspace, sample.mask)


def fidelity_value_grad(x: np.ndarray, sample: KSpaceSample) -> tuple[float, np.ndarray]:
    """Value and gradient of 0.5 * ||mask * F x - f||^2."""
    resid = forward(x, sample.mask) - sample.kspace
    value = 0.5 * float(np.sum(resid.real**2 + resid.imag**2))
    return value, adjoint(resid, sample.mask)


def simulate_kspace(
    x: np.ndarray, mask: np.ndarray, noise_std: float = 0.0, seed: int = 0
) -> KSpaceSample:
    k = fft2c(x)
    if noise_std > 0:
        rng = np.random.default_rng(seed)
        k = k + noise_std * (rng.standard_normal(k.shape) + 1j * rng.standard_normal(k.shape))
    return KSpaceSample(mask, mask * k)


def write_pgm(path: str | Path, mask: np.ndarray) -> None:
    """8-bit binary PGM (P5): 255 = sampled, 0 = unsampled."""
    h, w = mask.shape
    pixels = np.where(mask, 255, 0).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())
