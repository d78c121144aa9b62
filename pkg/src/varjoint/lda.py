"""Smoothing gradient descent with backtracking and eps reduction, and its unrolled form.

Each iteration takes a gradient step on the surrogate with the largest
trial step ``alpha0 * rho**k`` satisfying

    psi_eps(X_new) - psi_eps(X) <= -(1/a) ||X_new - X||^2,

then shrinks ``eps`` by ``eta`` whenever ``||grad psi_eps(X_new)|| < sigma * eta * eps``.
"""
from __future__ import annotations

import csv
import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import InvariantViolation, StaleTapeError
from .mri import KSpaceSample
from .nn import Params, tree_zeros_like
from .objective import ImageTriple, PsiEval, psi_eval, triple_norm

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LDAConfig:
    alpha0: float = 0.01
    backtrack_rho: float = 0.9
    a: float = 1e5
    sigma_ls: float = 1e3
    eta: float = 0.5
    eps0: float = 1e-3
    eps_tol: float = 1e-3
    T_max: int = 11
    max_backtracks: int = 50

    def __post_init__(self):
        for name in ("alpha0", "a", "sigma_ls", "eps0", "eps_tol"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        for name in ("eta", "backtrack_rho"):
            if not 0 < getattr(self, name) < 1:
                raise ValueError(f"{name} must lie in (0, 1)")
        if self.T_max < 0 or self.max_backtracks < 0:
            raise ValueError("iteration counts must be nonnegative")


@dataclass
class LDAStep:
    t: int
    eps: float
    alpha: float
    psi_eps: float        # psi^{eps_t}(X_t)
    psi_eps_new: float    # psi^{eps_t}(X_{t+1})
    psi_next: float       # psi^{eps_{t+1}}(X_{t+1})
    grad_norm: float      # ||grad psi^{eps_t}(X_{t+1})||, the reduction test
    step_sq: float        # ||X_{t+1} - X_t||^2
    reduced: bool
    backtracks: int
    line_search_failed: bool = False


@dataclass
class LDATrace:
    m: int
    cfg: LDAConfig
    steps: list[LDAStep] = field(default_factory=list)
    iterates: list[ImageTriple] = field(default_factory=list)

    @property
    def eps_sequence(self) -> list[float]:
        return [s.eps for s in self.steps]

    @property
    def reduction_events(self) -> list[LDAStep]:
        return [s for s in self.steps if s.reduced]

    @property
    def any_failure(self) -> bool:
        return any(s.line_search_failed for s in self.steps)

    def check(self, slack: float = 1e-10) -> None:
        """Assert sufficient decrease, the eps schedule, the Lyapunov bound and the
        stationarity envelope; raises :class:`InvariantViolation`."""
        cfg = self.cfg
        eps = cfg.eps0
        n_reduced = 0
        for s in self.steps:
            if s.eps != eps:
                raise InvariantViolation(f"t={s.t}: eps {s.eps} != expected {eps}")
            scale = slack * max(1.0, abs(s.psi_eps))
            if s.psi_eps_new - s.psi_eps > -s.step_sq / cfg.a + scale:
                raise InvariantViolation(f"t={s.t}: sufficient decrease violated")
            eps_next = cfg.eta * eps if s.reduced else eps
            if s.psi_next + self.m * eps_next > s.psi_eps + self.m * eps + scale:
                raise InvariantViolation(f"t={s.t}: Lyapunov decrease violated")
            if s.reduced:
                bound = cfg.sigma_ls * cfg.eps0 * cfg.eta ** (n_reduced + 1)
                if not s.grad_norm < bound:
                    raise InvariantViolation(f"t={s.t}: reduction outside envelope {bound}")
                n_reduced += 1
            eps = eps_next

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "eps", "alpha", "psi_eps", "grad_norm", "reduced"])
            for s in self.steps:
                w.writerow([s.t, repr(s.eps), repr(s.alpha), repr(s.psi_eps),
                            repr(s.grad_norm), int(s.reduced)])


def _axpy(alpha: float, g: Sequence[np.ndarray], X: Sequence[np.ndarray]) -> ImageTriple:
    return tuple(x + alpha * gi for x, gi in zip(X, g))  # type: ignore[return-value]


def _dist_sq(X: Sequence[np.ndarray], Y: Sequence[np.ndarray]) -> float:
    return sum(float(np.sum(np.abs(a - b) ** 2)) for a, b in zip(X, Y))


def line_search_step(X: ImageTriple, current: PsiEval, eps: float, cfg: LDAConfig, objective
                     ) -> tuple[ImageTriple, float, PsiEval, int, bool]:
    """One backtracking step from ``X`` given its evaluation ``current``.

    ``objective(X, eps)`` must return a :class:`PsiEval` with ``grad_x``.
    Returns ``(X_new, alpha, eval_at_X_new, backtracks, failed)``. When no
    trial step is admissible the zero step is taken and ``failed`` is set.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    g = current.grad_x
    alpha = cfg.alpha0
    for k in range(cfg.max_backtracks + 1):
        X_new = _axpy(-alpha, g, X)
        trial = objective(X_new, eps)
        if trial.value - current.value <= -_dist_sq(X_new, X) / cfg.a:
            return X_new, alpha, trial, k, False
        alpha *= cfg.backtrack_rho
    log.warning("line search failed after %d backtracks; taking the zero step", cfg.max_backtracks)
    return X, 0.0, current, cfg.max_backtracks, True


def run_lda(X0: Sequence[np.ndarray], theta: Params, gamma: float,
            samples: Sequence[KSpaceSample], cfg: LDAConfig,
            terminate: bool = True, max_iter: int | None = None
            ) -> tuple[ImageTriple, LDATrace]:
    """Iterate until ``sigma * eps_t < eps_tol`` (if ``terminate``) or the iteration cap."""
    X: ImageTriple = tuple(np.asarray(x, dtype=complex) for x in X0)  # type: ignore[assignment]
    T = cfg.T_max if max_iter is None else max_iter
    trace = LDATrace(m=X[0].size, cfg=cfg)

    def objective(Y, eps):
        return psi_eval(Y, theta, gamma, samples, eps, grad_x=True)

    eps = cfg.eps0
    current = objective(X, eps)
    for t in range(T):
        trace.iterates.append(X)
        X_new, alpha, new, backtracks, failed = line_search_step(X, current, eps, cfg, objective)
        grad_norm = triple_norm(new.grad_x)
        reduced = grad_norm < cfg.sigma_ls * cfg.eta * eps
        eps_next = cfg.eta * eps if reduced else eps
        following = objective(X_new, eps_next) if reduced else new
        step_sq = _dist_sq(X_new, X)
        trace.steps.append(LDAStep(t, eps, alpha, current.value, new.value, following.value,
                                   grad_norm, step_sq, reduced, backtracks, failed))
        X, current = X_new, following
        if terminate and cfg.sigma_ls * eps < cfg.eps_tol:
            break
        eps = eps_next
    return X, trace


# -- unrolled network ---------------------------------------------------------

def params_fingerprint(theta: Params, gamma: float) -> str:
    h = hashlib.blake2b(digest_size=16)
    for k in sorted(theta):
        h.update(k.encode())
        h.update(np.ascontiguousarray(theta[k]).tobytes())
    h.update(np.float64(gamma).tobytes())
    return h.hexdigest()


@dataclass
class Tape:
    """Everything the reverse sweep needs: iterates, realized steps and eps values."""

    theta: Params
    gamma: float
    samples: Sequence[KSpaceSample]
    iterates: list[ImageTriple]
    alphas: list[float]
    epsilons: list[float]
    fingerprint: str
    trace: LDATrace


def unrolled_forward(X0: Sequence[np.ndarray], theta: Params, gamma: float,
                     samples: Sequence[KSpaceSample], n_phases: int, cfg: LDAConfig
                     ) -> tuple[ImageTriple, Tape]:
    """Exactly ``n_phases`` iterations of :func:`run_lda` with termination disabled."""
    X, trace = run_lda(X0, theta, gamma, samples, cfg, terminate=False, max_iter=n_phases)
    tape = Tape(theta, gamma, samples, list(trace.iterates), [s.alpha for s in trace.steps],
                [s.eps for s in trace.steps], params_fingerprint(theta, gamma), trace)
    return X, tape


def unrolled_vjp(tape: Tape, cotangent: Sequence[np.ndarray], fd_step: float = 1e-6
                 ) -> tuple[ImageTriple, Params, float]:
    """Reverse sweep through the recorded steps X_{t+1} = X_t - alpha_t grad psi^{eps_t}(X_t).

    Step sizes and eps values are constants. Mixed second derivatives are
    central differences of the analytic gradients along the incoming
    cotangent direction.
    """
    if params_fingerprint(tape.theta, tape.gamma) != tape.fingerprint:
        raise StaleTapeError("parameters changed since the tape was recorded")
    c: ImageTriple = tuple(np.asarray(x, dtype=complex).copy() for x in cotangent)  # type: ignore
    grad_theta = tree_zeros_like(tape.theta)
    grad_gamma = 0.0
    for X, alpha, eps in zip(reversed(tape.iterates), reversed(tape.alphas),
                             reversed(tape.epsilons)):
        cnorm = triple_norm(c)
        if alpha == 0.0 or cnorm == 0.0:
            continue
        xmax = max(float(max(np.max(np.abs(x.real)), np.max(np.abs(x.imag)))) for x in X)
        h = fd_step * (1.0 + xmax) / cnorm
        plus = psi_eval(_axpy(h, c, X), tape.theta, tape.gamma, tape.samples, eps,
                        grad_x=True, grad_params=True)
        minus = psi_eval(_axpy(-h, c, X), tape.theta, tape.gamma, tape.samples, eps,
                         grad_x=True, grad_params=True)
        scale = -alpha / (2 * h)
        grad_theta = {k: grad_theta[k] + scale * (plus.grad_theta[k] - minus.grad_theta[k])
                      for k in grad_theta}
        grad_gamma += scale * (plus.grad_gamma - minus.grad_gamma)
        c = tuple(ci + scale * (p - m) for ci, p, m in zip(c, plus.grad_x, minus.grad_x))
    return c, grad_theta, grad_gamma
