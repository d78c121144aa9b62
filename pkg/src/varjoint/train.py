"""Training: the unrolled-network loss, the penalized bilevel objective and its optimizer.

The lower level fits the network weights ``theta`` on training batches, the
upper level tunes the synthesis weight ``gamma`` on validation batches. The
lower-level optimality condition is relaxed to a quadratic penalty

    L_pen(theta, gamma) = L(theta, gamma; B_val) + lam/2 ||grad_theta L(theta, gamma; B_tr)||^2

which is minimized by alternating Adam steps on theta and gradient steps on
gamma while the tolerance ``delta`` shrinks and ``lam`` grows geometrically.
"""
from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .complex_ops import concat_channels
from .data import TrainSample
from .errors import NumericalError
from .lda import LDAConfig, unrolled_forward, unrolled_vjp
from .metrics import ssim, ssim_vjp
from .mri import zero_filled
from .nn import (Params, chain_forward, chain_vjp, initnet_forward, initnet_vjp, layers_of,
                 tree_axpy, tree_dot, tree_max_abs, tree_norm, tree_zeros_like)

log = logging.getLogger(__name__)

L1_KAPPA = 1e-6


@dataclass(frozen=True)
class TrainConfig:
    mu: float = 0.1
    lam: float = 1e-4
    nu_delta: float = 0.95
    nu_lambda: float = 1.001
    delta: float = 1e-3
    delta_tol: float = 4.35e-6
    rho_theta: float = 1e-3
    lr_decay: float = 0.9
    lr_decay_every: int = 100
    rho_gamma: float = 0.9
    K: int = 5
    batch_size: int = 2
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    fd_step_hvp: float = 1e-6
    fd_step_gamma: float = 1e-5
    max_inner: int = 200
    n_phases: int = 11
    checkpoint_every: int = 10

    def __post_init__(self):
        if not 0 < self.nu_delta < 1:
            raise ValueError("nu_delta must lie in (0, 1)")
        if not self.nu_lambda > 1:
            raise ValueError("nu_lambda must exceed 1")
        for name in ("rho_theta", "rho_gamma", "delta", "delta_tol", "fd_step_hvp",
                     "fd_step_gamma"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.K < 1 or self.batch_size < 1 or self.max_inner < 1:
            raise ValueError("K, batch_size and max_inner must be at least 1")

    def learning_rate(self, step: int) -> float:
        return self.rho_theta * self.lr_decay ** (step // self.lr_decay_every)


class Adam:
    """Adam on complex parameters, with moments kept per real component."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m: Params = {}
        self.v: Params = {}
        self.t = 0

    def step(self, params: Params, grads: Params, lr: float) -> Params:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        out = {}
        for k, p in params.items():
            g = grads[k]
            m = self.m.get(k, np.zeros_like(p))
            v = self.v.get(k, np.zeros_like(p))
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * (g.real**2 + 1j * g.imag**2)
            self.m[k], self.v[k] = m, v
            mh = m / (1 - b1**self.t)
            vh = v / (1 - b2**self.t)
            upd = mh.real / (np.sqrt(vh.real) + self.eps)
            if np.iscomplexobj(p):
                upd = upd + 1j * mh.imag / (np.sqrt(vh.imag) + self.eps)
            out[k] = p - lr * upd
        return out

    def state(self) -> dict[str, np.ndarray]:
        s = {f"adam.m/{k}": v for k, v in self.m.items()}
        s.update({f"adam.v/{k}": v for k, v in self.v.items()})
        s["adam.t"] = np.array([self.t], dtype=np.float64)
        return s

    def load_state(self, tensors: dict[str, np.ndarray]) -> None:
        self.m = {k[len("adam.m/"):]: v for k, v in tensors.items() if k.startswith("adam.m/")}
        self.v = {k[len("adam.v/"):]: v for k, v in tensors.items() if k.startswith("adam.v/")}
        self.t = int(tensors["adam.t"][0]) if "adam.t" in tensors else 0


def _workers() -> int:
    try:
        return max(1, int(os.environ.get("VARJOINT_THREADS", "1")))
    except ValueError:
        return 1


def parallel_map(fn: Callable, items: Sequence) -> list:
    """Order-preserving map, threaded up to VARJOINT_THREADS workers."""
    n = min(_workers(), len(items))
    if n <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


# -- initial images -----------------------------------------------------------

def default_initial(sample: TrainSample):
    """Zero-filled sources and their mean: the INIT-Net output with all blocks zero."""
    z1, z2 = zero_filled(sample.kspace[0]), zero_filled(sample.kspace[1])
    return z1, z2, 0.5 * (z1 + z2)


def initial_of(sample: TrainSample):
    return sample.initial if sample.initial is not None else default_initial(sample)


def attach_initials(samples: Sequence[TrainSample], init_params: Params | None) -> None:
    for s in samples:
        if init_params is None:
            s.initial = default_initial(s)
        else:
            s.initial = tuple(np.asarray(x) for x in initnet_forward(s.kspace, init_params))


# -- per-sample loss ----------------------------------------------------------

def synthesis_term(theta: Params, refs, mu: float, want_grad: bool = True):
    """(mu/2) ||g([h1(x1*), h2(x2*)]) - x3*||^2 and its parameter gradient."""
    h1, h2, g = layers_of(theta, "h1"), layers_of(theta, "h2"), layers_of(theta, "g")
    f1, c1 = chain_forward(refs[0][None], h1)
    f2, c2 = chain_forward(refs[1][None], h2)
    out, cg = chain_forward(concat_channels(f1, f2), g)
    r = out[0] - refs[2]
    value = 0.5 * mu * float(np.sum(r.real**2 + r.imag**2))
    if not want_grad:
        return value, None
    grads: Params = {}
    g_feat, g_g = chain_vjp(g, cg, mu * r[None])
    d = f1.shape[0]
    _, g_h1 = chain_vjp(h1, c1, g_feat[:d])
    _, g_h2 = chain_vjp(h2, c2, g_feat[d:])
    grads.update({f"g.{j}": v for j, v in enumerate(g_g)})
    grads.update({f"h1.{j}": v for j, v in enumerate(g_h1)})
    grads.update({f"h2.{j}": v for j, v in enumerate(g_h2)})
    return value, grads


@dataclass
class LossEval:
    value: float
    grad_theta: Params | None = None
    grad_gamma: float | None = None
    outputs: tuple | None = None


def sample_loss(theta: Params, gamma: float, sample: TrainSample, cfg: TrainConfig,
                lda_cfg: LDAConfig, want_grad: bool = True) -> LossEval:
    refs = sample.reference
    XT, tape = unrolled_forward(initial_of(sample), theta, gamma, sample.kspace,
                                cfg.n_phases, lda_cfg)
    value, grad_theta = synthesis_term(theta, refs, cfg.mu, want_grad)
    cot = []
    for x, ref in zip(XT, refs):
        diff = x - ref
        value += 0.5 * float(np.sum(diff.real**2 + diff.imag**2)) + 1.0 - ssim(x, ref)
        if want_grad:
            cot.append(diff - ssim_vjp(x, ref))
    if not want_grad:
        return LossEval(value, outputs=XT)
    _, g_unrolled, g_gamma = unrolled_vjp(tape, cot)
    grads = {k: g_unrolled[k] + grad_theta.get(k, 0.0) for k in g_unrolled}
    return LossEval(value, grads, g_gamma, XT)


def batch_loss_grad(theta: Params, gamma: float, batch: Sequence[TrainSample],
                    cfg: TrainConfig, lda_cfg: LDAConfig, want_grad: bool = True) -> LossEval:
    parts = parallel_map(lambda s: sample_loss(theta, gamma, s, cfg, lda_cfg, want_grad), batch)
    total = LossEval(sum(p.value for p in parts))
    if want_grad:
        grads = tree_zeros_like(theta)
        for p in parts:
            grads = tree_axpy(1.0, p.grad_theta, grads)
        total.grad_theta = grads
        total.grad_gamma = float(sum(p.grad_gamma for p in parts))
    return total


# -- penalty objective --------------------------------------------------------

@dataclass
class PenaltyEval:
    value: float
    loss_val: float
    penalty: float
    grad_theta: Params
    grad_gamma: float

    @property
    def grad_norm_sq(self) -> float:
        return tree_dot(self.grad_theta, self.grad_theta) + self.grad_gamma**2


def penalty_value(theta, gamma, batch_tr, batch_val, lam, cfg, lda_cfg) -> float:
    val = batch_loss_grad(theta, gamma, batch_val, cfg, lda_cfg, want_grad=False).value
    g_tr = batch_loss_grad(theta, gamma, batch_tr, cfg, lda_cfg).grad_theta
    return val + 0.5 * lam * tree_dot(g_tr, g_tr)


def fd_hvp(grad_fn: Callable[[Params], Params], theta: Params, v: Params,
           fd_step: float) -> Params:
    """Hessian-vector product by central differences of ``grad_fn`` along ``v``.

    The step is ``fd_step * (1 + max|theta|) / ||v||``.
    """
    vnorm = tree_norm(v)
    if vnorm == 0:
        return tree_zeros_like(theta)
    h = fd_step * (1.0 + tree_max_abs(theta)) / vnorm
    g_plus, g_minus = grad_fn(tree_axpy(h, v, theta)), grad_fn(tree_axpy(-h, v, theta))
    return {k: (g_plus[k] - g_minus[k]) / (2 * h) for k in theta}


def penalty_value_grad(theta: Params, gamma: float, batch_tr, batch_val, lam: float,
                       cfg: TrainConfig, lda_cfg: LDAConfig) -> PenaltyEval:
    """Penalized objective with its theta-gradient (Hessian-vector product by central
    differences of the training gradient) and gamma-derivative (central difference)."""
    val = batch_loss_grad(theta, gamma, batch_val, cfg, lda_cfg)
    v = batch_loss_grad(theta, gamma, batch_tr, cfg, lda_cfg).grad_theta
    penalty = 0.5 * lam * tree_dot(v, v)
    grad_theta = dict(val.grad_theta)
    if lam != 0:
        hv = fd_hvp(lambda th: batch_loss_grad(th, gamma, batch_tr, cfg, lda_cfg).grad_theta,
                    theta, v, cfg.fd_step_hvp)
        grad_theta = tree_axpy(lam, hv, grad_theta)
    hg = cfg.fd_step_gamma
    up = penalty_value(theta, gamma + hg, batch_tr, batch_val, lam, cfg, lda_cfg)
    down = penalty_value(theta, gamma - hg, batch_tr, batch_val, lam, cfg, lda_cfg)
    return PenaltyEval(val.value + penalty, val.value, penalty, grad_theta, (up - down) / (2 * hg))


# -- alternating penalty algorithm --------------------------------------------

@dataclass
class HistoryRow:
    outer_iter: int
    delta: float
    lam: float
    gamma: float
    loss_val: float
    penalty: float
    grad_norm_sq: float
    inner_iters: int
    epoch: float


HISTORY_COLUMNS = ["outer_iter", "delta", "lambda", "gamma", "L_val", "penalty",
                   "grad_norm_sq", "inner_iters", "epoch"]


@dataclass
class TrainState:
    theta: Params
    gamma: float
    history: list[HistoryRow] = field(default_factory=list)


PenaltyFn = Callable[[Params, float, list, list, float], PenaltyEval]


def algorithm2_train(data_tr: Sequence, data_val: Sequence, theta0: Params, gamma0: float,
                     cfg: TrainConfig, lda_cfg: LDAConfig | None = None, seed: int = 0,
                     penalty_fn: PenaltyFn | None = None,
                     callback: Callable[[TrainState], None] | None = None) -> TrainState:
    """Mini-batch alternating-direction penalty training.

    ``penalty_fn(theta, gamma, batch_tr, batch_val, lam)`` defaults to
    :func:`penalty_value_grad`. ``callback`` runs after every outer iteration.
    """
    if not data_tr or not data_val:
        raise ValueError("training and validation sets must be nonempty")
    if penalty_fn is None:
        if lda_cfg is None:
            raise ValueError("lda_cfg is required for the default penalty")

        def penalty_fn(th, g, btr, bval, lam):
            return penalty_value_grad(th, g, btr, bval, lam, cfg, lda_cfg)

    rng = np.random.default_rng(seed)
    adam = Adam(cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    state = TrainState(dict(theta0), float(gamma0))
    delta, lam = cfg.delta, cfg.lam
    n_updates = 0
    samples_seen = 0
    outer = 0
    bs_tr, bs_val = min(cfg.batch_size, len(data_tr)), min(cfg.batch_size, len(data_val))
    while delta > cfg.delta_tol:
        b_tr = [data_tr[i] for i in np.sort(rng.choice(len(data_tr), bs_tr, replace=False))]
        b_val = [data_val[i] for i in np.sort(rng.choice(len(data_val), bs_val, replace=False))]
        samples_seen += bs_tr
        inner = 0
        while True:
            ev = penalty_fn(state.theta, state.gamma, b_tr, b_val, lam)
            _check_finite(ev, state)
            if ev.grad_norm_sq <= delta or inner >= cfg.max_inner:
                break
            for k in range(cfg.K):
                if k > 0:
                    ev = penalty_fn(state.theta, state.gamma, b_tr, b_val, lam)
                    _check_finite(ev, state)
                state.theta = adam.step(state.theta, ev.grad_theta, cfg.learning_rate(n_updates))
                n_updates += 1
            ev = penalty_fn(state.theta, state.gamma, b_tr, b_val, lam)
            _check_finite(ev, state)
            state.gamma = max(0.0, state.gamma - cfg.rho_gamma * ev.grad_gamma)
            inner += 1
        state.history.append(HistoryRow(outer, delta, lam, state.gamma, ev.loss_val, ev.penalty,
                                        ev.grad_norm_sq, inner, samples_seen / len(data_tr)))
        log.info("outer %d: delta=%.3e lambda=%.6e gamma=%.5f L_val=%.5f inner=%d",
                 outer, delta, lam, state.gamma, ev.loss_val, inner)
        if callback is not None:
            callback(state)
        delta *= cfg.nu_delta
        lam *= cfg.nu_lambda
        outer += 1
    return state


def expected_outer_iterations(delta0: float, delta_tol: float, nu_delta: float) -> int:
    return max(0, math.ceil(math.log(delta_tol / delta0) / math.log(nu_delta)))


def _check_finite(ev: PenaltyEval, state: TrainState) -> None:
    finite = math.isfinite(ev.value) and math.isfinite(ev.grad_gamma) and all(
        np.all(np.isfinite(v)) for v in ev.grad_theta.values())
    if not finite:
        err = NumericalError("non-finite penalized loss or gradient")
        err.state = state  # type: ignore[attr-defined]
        raise err


# -- INIT-Net pretraining -----------------------------------------------------

def _stack_samples(batch: Sequence[TrainSample]):
    from .mri import KSpaceSample
    ks = tuple(KSpaceSample(np.stack([s.kspace[i].mask for s in batch]),
                            np.stack([s.kspace[i].kspace for s in batch])) for i in range(2))
    refs = tuple(np.stack([s.reference[j] for s in batch]) for j in range(3))
    return ks, refs


def init_loss_grad(params: Params, batch: Sequence[TrainSample], want_grad: bool = True):
    """Smoothed L1 distance sum_j sum_px (sqrt(|x_j^0 - x_j*|^2 + kappa^2) - kappa)."""
    ks, refs = _stack_samples(batch)
    outs, cache = initnet_forward(ks, params, return_cache=True)
    value = 0.0
    cots = []
    for x, ref in zip(outs, refs):
        diff = x - ref
        root = np.sqrt(diff.real**2 + diff.imag**2 + L1_KAPPA**2)
        value += float(np.sum(root - L1_KAPPA))
        cots.append(diff / root)
    if not want_grad:
        return value, None
    return value, initnet_vjp(params, cache, cots)


def train_init_nets(data_tr: Sequence[TrainSample], p0: Params, epochs: int, lr: float,
                    batch_size: int = 8, seed: int = 0, adam: Adam | None = None,
                    start_epoch: int = 0, callback: Callable | None = None
                    ) -> tuple[Params, list[float]]:
    """Adam on the smoothed L1 loss; returns parameters and the mean loss per epoch.

    Passing ``adam`` and ``start_epoch`` resumes an interrupted run exactly.
    """
    adam = adam or Adam()
    params = dict(p0)
    losses = []
    for epoch in range(start_epoch, epochs):
        order = np.random.default_rng([seed, epoch]).permutation(len(data_tr))
        total = 0.0
        for start in range(0, len(order), batch_size):
            batch = [data_tr[i] for i in order[start:start + batch_size]]
            value, grads = init_loss_grad(params, batch)
            if not math.isfinite(value):
                raise NumericalError("non-finite INIT-Net loss")
            total += value
            params = adam.step(params, grads, lr)
        losses.append(total / len(data_tr))
        log.info("init epoch %d: loss %.5f", epoch, losses[-1])
        if callback is not None:
            callback(epoch, params, adam, losses)
    return params, losses
