"""The joint reconstruction/synthesis energy and its smoothed surrogate.

    psi(X) = sum_i 0.5 ||P_i F x_i - f_i||^2                      (i = 1, 2)
           + 1/3 sum_i ||h_i(x_i)||_{2,1}                         (i = 1, 2, 3)
           + gamma/2 ||g([h_1(x_1), h_2(x_2)]) - x_3||^2

The surrogate replaces each group norm by sqrt(||.||^2 + eps^2) - eps.
``X`` is a triple of ``(H, W)`` complex images and ``theta`` a parameter
dict with layer stacks ``h1``, ``h2``, ``h3`` and ``g``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .complex_ops import concat_channels
from .errors import ShapeError
from .mri import KSpaceSample, fidelity_value_grad
from .nn import Params, chain_forward, chain_vjp, layers_of

REG_WEIGHT = 1.0 / 3.0

ImageTriple = tuple[np.ndarray, np.ndarray, np.ndarray]


def _group_sq(feat: np.ndarray) -> np.ndarray:
    return np.sum(feat.real**2 + feat.imag**2, axis=-3)


def smoothed_l21(feat: np.ndarray, eps: float) -> float:
    """sum_j (sqrt(||feat_j||^2 + eps^2) - eps) over spatial locations j."""
    if eps < 0:
        raise ValueError("eps must be nonnegative")
    sq = _group_sq(feat)
    root = np.sqrt(sq + eps * eps)
    # sq / (root + eps) equals root - eps without cancellation
    denom = root + eps
    return float(np.sum(np.divide(sq, denom, out=np.zeros_like(sq), where=denom > 0)))


def smoothed_l21_grad(feat: np.ndarray, eps: float) -> np.ndarray:
    if eps < 0:
        raise ValueError("eps must be nonnegative")
    root = np.sqrt(_group_sq(feat) + eps * eps)[..., None, :, :]
    return np.divide(feat, root, out=np.zeros_like(feat), where=root > 0)


@dataclass
class PsiEval:
    value: float
    grad_x: ImageTriple | None = None
    grad_theta: Params | None = None
    grad_gamma: float | None = None


def _check_triple(X: Sequence[np.ndarray], samples: Sequence[KSpaceSample]) -> None:
    if len(X) != 3 or len(samples) != 2:
        raise ShapeError("expected three images and two k-space samples")
    shape = X[0].shape
    if any(x.shape != shape for x in X) or any(s.kspace.shape != shape for s in samples):
        raise ShapeError("images and measurements must share one shape")


def psi_eval(X: Sequence[np.ndarray], theta: Params, gamma: float,
             samples: Sequence[KSpaceSample], eps: float,
             grad_x: bool = False, grad_params: bool = False) -> PsiEval:
    """Surrogate value, optionally with gradients in X and in (theta, gamma)."""
    _check_triple(X, samples)
    value = 0.0
    gx = [np.zeros_like(x, dtype=complex) for x in X]
    for i in range(2):
        v, g = fidelity_value_grad(X[i], samples[i])
        value += v
        gx[i] = g

    feats, caches, h_layers = [], [], []
    for i in range(3):
        layers = layers_of(theta, f"h{i + 1}")
        f, cache = chain_forward(X[i][None], layers)
        value += REG_WEIGHT * smoothed_l21(f, eps)
        feats.append(f)
        caches.append(cache)
        h_layers.append(layers)

    g_layers = layers_of(theta, "g")
    feat12 = concat_channels(feats[0], feats[1])
    synth, g_cache = chain_forward(feat12, g_layers)
    resid = synth[0] - X[2]
    half_sq = 0.5 * float(np.sum(resid.real**2 + resid.imag**2))
    value += gamma * half_sq

    out = PsiEval(value)
    if not (grad_x or grad_params):
        return out

    need = grad_params
    d = feats[0].shape[0]
    g_feat, g_g = chain_vjp(g_layers, g_cache, gamma * resid[None], need_params=need)
    grad_theta: Params = {}
    for i in range(3):
        cot = REG_WEIGHT * smoothed_l21_grad(feats[i], eps)
        if i == 0:
            cot = cot + g_feat[:d]
        elif i == 1:
            cot = cot + g_feat[d:]
        g_in, g_h = chain_vjp(h_layers[i], caches[i], cot, need_params=need)
        gx[i] = gx[i] + g_in[0]
        if need:
            grad_theta.update({f"h{i + 1}.{j}": g for j, g in enumerate(g_h)})
    gx[2] = gx[2] - gamma * resid
    if need:
        grad_theta.update({f"g.{j}": g for j, g in enumerate(g_g)})
        out.grad_theta = grad_theta
        out.grad_gamma = half_sq
    out.grad_x = (gx[0], gx[1], gx[2])
    return out


def psi_value(X, theta, gamma, samples) -> float:
    return psi_eval(X, theta, gamma, samples, 0.0).value


def psi_eps_value(X, theta, gamma, samples, eps: float) -> float:
    return psi_eval(X, theta, gamma, samples, eps).value


def psi_eps_grad(X, theta, gamma, samples, eps: float) -> ImageTriple:
    if eps <= 0:
        raise ValueError("the surrogate gradient needs eps > 0")
    return psi_eval(X, theta, gamma, samples, eps, grad_x=True).grad_x


def synthesize(X: Sequence[np.ndarray], theta: Params) -> np.ndarray:
    """g([h1(x1), h2(x2)]) for images with optional leading batch axes."""
    f1 = chain_forward(X[0][..., None, :, :], layers_of(theta, "h1"))[0]
    f2 = chain_forward(X[1][..., None, :, :], layers_of(theta, "h2"))[0]
    return chain_forward(concat_channels(f1, f2), layers_of(theta, "g"))[0][..., 0, :, :]


def triple_norm(X: Sequence[np.ndarray]) -> float:
    return float(np.sqrt(sum(np.sum(x.real**2 + x.imag**2) for x in X)))
