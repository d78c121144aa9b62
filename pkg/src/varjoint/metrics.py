"""PSNR, SSIM (with gradient) and NMSE on magnitude images."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

PSNR_CAP = 200.0
MAG_KAPPA = 1e-8


@dataclass(frozen=True)
class SSIMConfig:
    window: int = 11
    sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03


def _magnitude(x: np.ndarray, kappa: float = MAG_KAPPA) -> np.ndarray:
    if np.iscomplexobj(x):
        return np.sqrt(x.real**2 + x.imag**2 + kappa * kappa)
    return np.sqrt(x * x + kappa * kappa)


def _dynamic_range(ref: np.ndarray) -> float:
    peak = float(np.max(np.abs(ref)))
    return peak if peak > 0 else 1.0


def psnr(x: np.ndarray, ref: np.ndarray) -> float:
    """10 log10(L^2 / MSE) of magnitudes, L = peak reference magnitude; capped at 200 dB."""
    mse = float(np.mean((np.abs(x) - np.abs(ref)) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(_dynamic_range(ref) ** 2 / mse))


def nmse(x: np.ndarray, ref: np.ndarray) -> float:
    diff = np.abs(x) - np.abs(ref)
    return float(np.sum(diff**2) / np.sum(np.abs(ref) ** 2))


def _gaussian(cfg: SSIMConfig, shape: tuple[int, int]) -> np.ndarray:
    # shrink the window on images smaller than it, keeping it odd
    k = min(cfg.window, *shape)
    k -= 1 - k % 2
    r = np.arange(k) - (k - 1) / 2
    g = np.exp(-(r**2) / (2 * cfg.sigma**2))
    return g / g.sum()


def _filt(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Separable 'valid' weighted window mean."""
    y = sliding_window_view(x, g.size, axis=-2) @ g
    return sliding_window_view(y, g.size, axis=-1) @ g


def _filt_adjoint(y: np.ndarray, g: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    k = g.size
    h, w = shape
    tmp = np.zeros((y.shape[0], w))
    for j in range(k):
        tmp[:, j:j + y.shape[1]] += g[j] * y
    out = np.zeros((h, w))
    for i in range(k):
        out[i:i + tmp.shape[0], :] += g[i] * tmp
    return out


def _ssim_parts(a: np.ndarray, b: np.ndarray, L: float, cfg: SSIMConfig):
    g = _gaussian(cfg, a.shape)
    c1, c2 = (cfg.k1 * L) ** 2, (cfg.k2 * L) ** 2
    mu_a, mu_b = _filt(a, g), _filt(b, g)
    e_aa, e_bb, e_ab = _filt(a * a, g), _filt(b * b, g), _filt(a * b, g)
    A1 = 2 * mu_a * mu_b + c1
    A2 = 2 * (e_ab - mu_a * mu_b) + c2
    B1 = mu_a * mu_a + mu_b * mu_b + c1
    B2 = (e_aa - mu_a * mu_a) + (e_bb - mu_b * mu_b) + c2
    smap = (A1 * A2) / (B1 * B2)
    return smap, (g, mu_a, mu_b, A1, A2, B1, B2)


def ssim(x: np.ndarray, ref: np.ndarray, cfg: SSIMConfig = SSIMConfig(),
         data_range: float | None = None) -> float:
    """Mean Gaussian-windowed SSIM over fully contained windows of the magnitudes."""
    L = _dynamic_range(ref) if data_range is None else data_range
    smap, _ = _ssim_parts(_magnitude(x), _magnitude(ref), L, cfg)
    return float(np.mean(smap))


def ssim_vjp(x: np.ndarray, ref: np.ndarray, cotangent: float = 1.0,
             cfg: SSIMConfig = SSIMConfig(), data_range: float | None = None) -> np.ndarray:
    """Gradient of ``cotangent * ssim(x, ref)`` with respect to (Re x, Im x)."""
    if cotangent == 0:
        return np.zeros_like(x)
    L = _dynamic_range(ref) if data_range is None else data_range
    a, b = _magnitude(x), _magnitude(ref)
    smap, (g, mu_a, mu_b, A1, A2, B1, B2) = _ssim_parts(a, b, L, cfg)
    scale = cotangent / smap.size
    d_mu = smap * (2 * mu_b / A1 - 2 * mu_b / A2 - 2 * mu_a / B1 + 2 * mu_a / B2) * scale
    d_eaa = -smap / B2 * scale
    d_eab = 2 * smap / A2 * scale
    grad_a = (_filt_adjoint(d_mu, g, a.shape) + 2 * a * _filt_adjoint(d_eaa, g, a.shape)
              + b * _filt_adjoint(d_eab, g, a.shape))
    return grad_a * x / a
