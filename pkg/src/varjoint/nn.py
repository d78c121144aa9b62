"""Complex convolutional building blocks with hand-written vector-Jacobian products.

Gradients follow the real-pair convention: for a real loss L of a complex
array z the gradient is dL/d(Re z) + 1j * dL/d(Im z). Under this convention
the VJP of a complex-linear map A is A^H.

Activations are ``(..., C, H, W)`` complex arrays; kernels are
``(C_out, C_in, k, k)`` complex arrays applied as same-padded
cross-correlations without bias.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .complex_ops import concat_channels, fft2c, ifft2c
from .errors import ShapeError
from .mri import KSpaceSample

DELTA_ACT = 0.01
INIT_WIDTH = 16
INIT_DEPTH = 3

Params = dict[str, np.ndarray]


# -- activation ---------------------------------------------------------------

def _srelu_real(t: np.ndarray, delta: float) -> np.ndarray:
    quad = t * t / (4 * delta) + t / 2 + delta / 4
    return np.where(t >= delta, t, np.where(t <= -delta, 0.0, quad))


def _srelu_deriv(t: np.ndarray, delta: float) -> np.ndarray:
    return np.where(t >= delta, 1.0, np.where(t <= -delta, 0.0, t / (2 * delta) + 0.5))


def srelu(x: np.ndarray, delta: float = DELTA_ACT) -> np.ndarray:
    """Smoothed ReLU applied separately to the real and imaginary parts."""
    if delta <= 0:
        raise ValueError("delta must be positive")
    if np.iscomplexobj(x):
        return _srelu_real(x.real, delta) + 1j * _srelu_real(x.imag, delta)
    return _srelu_real(x, delta)


def srelu_vjp(x: np.ndarray, cotangent: np.ndarray, delta: float = DELTA_ACT) -> np.ndarray:
    if np.iscomplexobj(x) or np.iscomplexobj(cotangent):
        x = np.asarray(x, dtype=complex)
        cotangent = np.asarray(cotangent, dtype=complex)
        return (_srelu_deriv(x.real, delta) * cotangent.real
                + 1j * _srelu_deriv(x.imag, delta) * cotangent.imag)
    return _srelu_deriv(x, delta) * cotangent


# -- convolution --------------------------------------------------------------

def _as_batch(x: np.ndarray) -> tuple[np.ndarray, tuple[int, ...]]:
    lead = x.shape[:-3]
    return x.reshape((-1,) + x.shape[-3:]), lead


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    b, c, h, w = x.shape
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    win = sliding_window_view(xp, (k, k), axis=(2, 3))  # (b, c, h, w, k, k)
    return win.transpose(1, 4, 5, 0, 2, 3).reshape(c * k * k, b * h * w)


def _col2im(cols: np.ndarray, shape: tuple[int, int, int, int], k: int) -> np.ndarray:
    b, c, h, w = shape
    p = k // 2
    cols = cols.reshape(c, k, k, b, h, w)
    out = np.zeros((b, c, h + 2 * p, w + 2 * p), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            out[:, :, i:i + h, j:j + w] += cols[:, i, j].transpose(1, 0, 2, 3)
    return out[:, :, p:p + h, p:p + w]


def _check_layer(x: np.ndarray, kernel: np.ndarray) -> None:
    if kernel.ndim != 4 or kernel.shape[2] != kernel.shape[3] or kernel.shape[2] % 2 == 0:
        raise ShapeError(f"kernel must be (out, in, k, k) with odd k, got {kernel.shape}")
    if x.shape[-3] != kernel.shape[1]:
        raise ShapeError(f"input has {x.shape[-3]} channels, kernel expects {kernel.shape[1]}")


def cconv_forward(x: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    _check_layer(x, kernel)
    xb, lead = _as_batch(x)
    b, _, h, w = xb.shape
    c_out, _, k, _ = kernel.shape
    out = kernel.reshape(c_out, -1) @ _im2col(xb, k)
    return out.reshape(c_out, b, h, w).transpose(1, 0, 2, 3).reshape(lead + (c_out, h, w))


def cconv_vjp(x: np.ndarray, kernel: np.ndarray, cotangent: np.ndarray,
              need_kernel: bool = True) -> tuple[np.ndarray, np.ndarray | None]:
    """Gradients with respect to the input and the kernel (summed over batch axes)."""
    _check_layer(x, kernel)
    xb, lead = _as_batch(x)
    b, c_in, h, w = xb.shape
    c_out, _, k, _ = kernel.shape
    cot = cotangent.reshape(b, c_out, h * w).transpose(1, 0, 2).reshape(c_out, b * h * w)
    cols = _im2col(xb, k) if need_kernel else None
    grad_kernel = (cot @ cols.conj().T).reshape(kernel.shape) if need_kernel else None
    grad_x = _col2im(kernel.reshape(c_out, -1).conj().T @ cot, xb.shape, k)
    return grad_x.reshape(x.shape), grad_kernel


# -- stacked networks ---------------------------------------------------------

def chain_forward(x: np.ndarray, layers: Sequence[np.ndarray], delta: float = DELTA_ACT):
    """conv -> srelu -> ... -> conv (no activation after the last layer).

    Returns the output and a cache for :func:`chain_vjp`.
    """
    inputs, pre = [], []
    z = x
    for i, kernel in enumerate(layers):
        inputs.append(z)
        u = cconv_forward(z, kernel)
        if i < len(layers) - 1:
            pre.append(u)
            z = srelu(u, delta)
        else:
            z = u
    return z, (inputs, pre)


def chain_vjp(layers: Sequence[np.ndarray], cache, cotangent: np.ndarray,
              delta: float = DELTA_ACT, need_params: bool = True
              ) -> tuple[np.ndarray, list[np.ndarray]]:
    inputs, pre = cache
    grads: list[np.ndarray] = [None] * len(layers)  # type: ignore[list-item]
    g = cotangent
    for i in reversed(range(len(layers))):
        if i < len(layers) - 1:
            g = srelu_vjp(pre[i], g, delta)
        g, grads[i] = cconv_vjp(inputs[i], layers[i], g, need_kernel=need_params)
    return g, grads


def extractor_forward(x: np.ndarray, layers: Sequence[np.ndarray]) -> np.ndarray:
    """Feature extractor: image ``(..., H, W)`` -> features ``(..., d, H, W)``."""
    return chain_forward(x[..., None, :, :], layers)[0]


def extractor_vjp(x: np.ndarray, layers: Sequence[np.ndarray], cotangent: np.ndarray
                  ) -> tuple[np.ndarray, list[np.ndarray]]:
    _, cache = chain_forward(x[..., None, :, :], layers)
    gx, grads = chain_vjp(layers, cache, cotangent)
    return gx[..., 0, :, :], grads


def synth_forward(feat: np.ndarray, layers: Sequence[np.ndarray]) -> np.ndarray:
    """Synthesis network: features ``(..., 2d, H, W)`` -> image ``(..., H, W)``."""
    return chain_forward(feat, layers)[0][..., 0, :, :]


def synth_vjp(feat: np.ndarray, layers: Sequence[np.ndarray], cotangent: np.ndarray
              ) -> tuple[np.ndarray, list[np.ndarray]]:
    _, cache = chain_forward(feat, layers)
    return chain_vjp(layers, cache, cotangent[..., None, :, :])


# -- parameters ---------------------------------------------------------------

def xavier_init(shape: Sequence[int], rng: np.random.Generator | int) -> np.ndarray:
    """Complex kernel with real and imaginary parts uniform on [-b, b]."""
    rng = np.random.default_rng(rng)
    c_out, c_in, k, _ = shape
    bound = np.sqrt(6.0 / ((c_in + c_out) * k * k))
    re = rng.uniform(-bound, bound, size=shape)
    im = rng.uniform(-bound, bound, size=shape)
    return re + 1j * im


def layers_of(params: Params, prefix: str) -> list[np.ndarray]:
    out = []
    while f"{prefix}.{len(out)}" in params:
        out.append(params[f"{prefix}.{len(out)}"])
    if not out:
        raise KeyError(f"no layers named {prefix}.*")
    return out


def _stack(prefix: str, channels: Sequence[int], k: int, rng: np.random.Generator) -> Params:
    return {
        f"{prefix}.{i}": xavier_init((channels[i + 1], channels[i], k, k), rng)
        for i in range(len(channels) - 1)
    }


def init_joint_params(d: int = 64, depth: int = 4, synth_depth: int = 6, kernel_size: int = 3,
                      seed: int = 0) -> Params:
    """Extractors h1..h3 (1 -> d -> ... -> d) and synthesis g (2d -> ... -> 2d -> 1)."""
    rng = np.random.default_rng(seed)
    params: Params = {}
    for name in ("h1", "h2", "h3"):
        params.update(_stack(name, [1] + [d] * depth, kernel_size, rng))
    params.update(_stack("g", [2 * d] * synth_depth + [1], kernel_size, rng))
    return params


def init_initnet_params(width: int = INIT_WIDTH, depth: int = INIT_DEPTH, kernel_size: int = 3,
                        seed: int = 0) -> Params:
    rng = np.random.default_rng(seed)
    params: Params = {}
    hidden = [width] * (depth - 1)
    for name in ("k1", "i1", "k2", "i2"):
        params.update(_stack(name, [1] + hidden + [1], kernel_size, rng))
    params.update(_stack("fuse", [2] + hidden + [1], kernel_size, rng))
    return params


# -- initialization networks --------------------------------------------------

def initnet_forward(samples: Sequence[KSpaceSample], params: Params, return_cache: bool = False):
    """Initial images (x1, x2, x3) from undersampled k-space of the two sources.

    Each source goes through a k-space interpolation block, restricted to the
    unsampled entries, then a residual image-domain block. The target initial
    is the source mean plus a residual fusion correction. Arrays may carry a
    leading batch axis.
    """
    caches = []
    xs = []
    for i, s in enumerate(samples, start=1):
        f = s.kspace
        kout, kcache = chain_forward(f[..., None, :, :], layers_of(params, f"k{i}"))
        khat = f + (1 - s.mask) * kout[..., 0, :, :]
        z = ifft2c(khat)
        iout, icache = chain_forward(z[..., None, :, :], layers_of(params, f"i{i}"))
        xs.append(z + iout[..., 0, :, :])
        caches.append((s.mask, kcache, icache))
    pair = concat_channels(xs[0][..., None, :, :], xs[1][..., None, :, :])
    fout, fcache = chain_forward(pair, layers_of(params, "fuse"))
    x3 = 0.5 * (xs[0] + xs[1]) + fout[..., 0, :, :]
    out = (xs[0], xs[1], x3)
    if return_cache:
        return out, (caches, fcache)
    return out


def initnet_vjp(params: Params, cache, cotangents: Sequence[np.ndarray]) -> Params:
    caches, fcache = cache
    grads: Params = {}
    g_pair, g_fuse = chain_vjp(layers_of(params, "fuse"), fcache, cotangents[2][..., None, :, :])
    grads.update({f"fuse.{j}": g for j, g in enumerate(g_fuse)})
    for i, (mask, kcache, icache) in enumerate(caches, start=1):
        g_x = cotangents[i - 1] + 0.5 * cotangents[2] + g_pair[..., i - 1, :, :]
        g_z, g_img = chain_vjp(layers_of(params, f"i{i}"), icache, g_x[..., None, :, :])
        g_khat = fft2c(g_x + g_z[..., 0, :, :])
        _, g_k = chain_vjp(layers_of(params, f"k{i}"), kcache,
                           ((1 - mask) * g_khat)[..., None, :, :])
        grads.update({f"i{i}.{j}": g for j, g in enumerate(g_img)})
        grads.update({f"k{i}.{j}": g for j, g in enumerate(g_k)})
    return grads


# -- parameter-dict arithmetic ------------------------------------------------

def tree_dot(a: Params, b: Params) -> float:
    return float(sum(np.real(np.vdot(a[k], b[k])) for k in a))


def tree_norm(a: Params) -> float:
    return float(np.sqrt(tree_dot(a, a)))


def tree_max_abs(a: Params) -> float:
    """Largest absolute real or imaginary component."""
    return max((float(max(np.max(np.abs(v.real), initial=0.0), np.max(np.abs(v.imag), initial=0.0)))
                for v in a.values()), default=0.0)


def tree_axpy(alpha: float, x: Params, y: Params) -> Params:
    """alpha * x + y, key-wise."""
    return {k: alpha * x[k] + y[k] for k in y}


def tree_zeros_like(a: Params) -> Params:
    return {k: np.zeros_like(v) for k, v in a.items()}
