import csv

import numpy as np
import pytest

from varjoint.errors import InvariantViolation, StaleTapeError
from varjoint.lda import LDAConfig, line_search_step, run_lda, unrolled_forward, unrolled_vjp
from varjoint.mri import KSpaceSample, adjoint, forward, simulate_kspace
from varjoint.nn import tree_zeros_like
from varjoint.objective import PsiEval, psi_eps_value

from conftest import crandn, lda_instance, make_instance
from oracles import least_squares_solution

CFG = LDAConfig(alpha0=0.5, T_max=50)


def quad_objective(Y, eps):
    return PsiEval(0.5 * sum(float(np.sum(np.abs(y) ** 2)) for y in Y), grad_x=tuple(Y))


def test_config_validation():
    with pytest.raises(ValueError):
        LDAConfig(eta=1.0)
    with pytest.raises(ValueError):
        LDAConfig(a=0)


def test_quadratic_accepts_first_trial():
    X = tuple(np.full((1, 1), 2.0 + 0j) for _ in range(3))
    X_new, alpha, ev, k, failed = line_search_step(X, quad_objective(X, 1.0), 1e-3, LDAConfig(),
                                                   quad_objective)
    assert alpha == 0.01 and k == 0 and not failed
    np.testing.assert_allclose(X_new[0], 0.99 * X[0])


def test_zero_gradient_keeps_iterate():
    X = tuple(np.zeros((2, 2), complex) for _ in range(3))
    X_new, alpha, _, k, failed = line_search_step(X, quad_objective(X, 1.0), 1e-3, LDAConfig(),
                                                  quad_objective)
    assert alpha == 0.01 and not failed
    assert all(np.array_equal(a, b) for a, b in zip(X, X_new))


def test_failure_takes_zero_step():
    def bad(Y, eps):  # gradient points uphill, so no trial decreases the value
        v = 0.5 * sum(float(np.sum(np.abs(y) ** 2)) for y in Y)
        return PsiEval(v, grad_x=tuple(-y for y in Y))

    X = tuple(np.ones((2, 2), complex) for _ in range(3))
    X_new, alpha, _, k, failed = line_search_step(X, bad(X, 1.0), 1e-3,
                                                  LDAConfig(max_backtracks=5), bad)
    assert failed and alpha == 0.0 and k == 5 and X_new is X
    with pytest.raises(ValueError):
        line_search_step(X, bad(X, 1.0), 0.0, LDAConfig(), bad)


@pytest.mark.parametrize("seed", [0, 1])
def test_trace_invariants(seed):
    X0, theta, samples = lda_instance(seed)
    _, trace = run_lda(X0, theta, 1.0, samples, CFG)
    trace.check()
    eps = trace.eps_sequence
    assert all(a >= b for a, b in zip(eps, eps[1:]))
    for e in eps:
        k = round(np.log(e / CFG.eps0) / np.log(CFG.eta))
        assert e == CFG.eps0 * CFG.eta**k
    # every eps level is left after finitely many (here: a bounded number of) iterations
    runs, last = [], 0
    for s in trace.reduction_events:
        runs.append(s.t - last)
        last = s.t
    assert max(runs) <= 10 * CFG.T_max
    for s in trace.steps:
        assert s.psi_eps_new - s.psi_eps <= -s.step_sq / CFG.a


def test_check_detects_tampering():
    X0, theta, samples = lda_instance(0)
    _, trace = run_lda(X0, theta, 1.0, samples, LDAConfig(alpha0=0.5, T_max=5))
    trace.steps[2].psi_eps_new = trace.steps[2].psi_eps + 1.0
    with pytest.raises(InvariantViolation):
        trace.check()


def test_termination_rule():
    X0, theta, samples = lda_instance(0, size=8)
    cfg = LDAConfig(alpha0=0.5, T_max=500, eps_tol=0.2)
    _, trace = run_lda(X0, theta, 1.0, samples, cfg)
    last = trace.steps[-1]
    assert cfg.sigma_ls * last.eps < cfg.eps_tol
    assert all(cfg.sigma_ls * s.eps >= cfg.eps_tol for s in trace.steps[:-1])


def test_degenerate_solver_reaches_least_squares():
    X, theta, _ = make_instance(0)
    rng = np.random.default_rng(0)
    mask = rng.random((8, 8)) < 0.5
    mask[4, 4] = True
    samples = [simulate_kspace(crandn(rng, 8, 8), mask) for _ in range(2)]
    zero = tree_zeros_like(theta)
    Xf, trace = run_lda(X, zero, 0.0, samples, LDAConfig(alpha0=0.1, T_max=400), terminate=False)
    trace.check()
    target = least_squares_solution(samples, X[:2])
    for i in range(2):
        assert np.max(np.abs(Xf[i] - target[i])) <= 1e-6
        assert np.linalg.norm(forward(Xf[i], mask) - samples[i].kspace) <= 1e-6
    np.testing.assert_array_equal(Xf[2], X[2])


def test_unrolled_zero_phases_and_agreement():
    X0, theta, samples = lda_instance(2, size=8)
    X, tape = unrolled_forward(X0, theta, 1.0, samples, 0, CFG)
    assert all(np.array_equal(a, b) for a, b in zip(X, X0)) and not tape.iterates
    X3, tape3 = unrolled_forward(X0, theta, 1.0, samples, 3, CFG)
    Xr, _ = run_lda(X0, theta, 1.0, samples, CFG, terminate=False, max_iter=3)
    assert all(np.array_equal(a, b) for a, b in zip(X3, Xr))
    X3b, _ = unrolled_forward(X0, theta, 1.0, samples, 3, CFG)
    assert all(np.array_equal(a, b) for a, b in zip(X3, X3b))
    assert len(tape3.alphas) == len(tape3.epsilons) == 3


def test_one_step_jacobian_is_analytic(rng):
    X0, theta, samples = make_instance(1)
    zero = tree_zeros_like(theta)
    cfg = LDAConfig(alpha0=0.3)
    _, tape = unrolled_forward(X0, zero, 0.0, samples, 1, cfg)
    alpha = tape.alphas[0]
    c = tuple(crandn(rng, 8, 8) for _ in range(3))
    gX0, _, _ = unrolled_vjp(tape, c)
    for i in range(2):
        m = samples[i].mask
        expect = c[i] - alpha * adjoint(forward(c[i], m), m)
        np.testing.assert_allclose(gX0[i], expect, atol=1e-8)
    np.testing.assert_allclose(gX0[2], c[2], atol=1e-8)


def test_zero_cotangent_and_stale_tape():
    X0, theta, samples = lda_instance(3, size=8)
    _, tape = unrolled_forward(X0, theta, 1.0, samples, 2, CFG)
    g0, gt, gg = unrolled_vjp(tape, tuple(np.zeros_like(x) for x in X0))
    assert not any(np.any(g) for g in g0) and not any(np.any(v) for v in gt.values()) and gg == 0
    theta["g.0"] += 1e-3
    with pytest.raises(StaleTapeError):
        unrolled_vjp(tape, X0)


def test_gamma_gradient_matches_fd(rng):
    X0, theta, samples = lda_instance(4, size=8)
    cfg = LDAConfig(alpha0=0.2)
    c = tuple(crandn(rng, 8, 8) for _ in range(3))

    def out(gamma):
        X, _ = unrolled_forward(X0, theta, gamma, samples, 2, cfg)
        return sum(float(np.real(np.vdot(ci, x))) for ci, x in zip(c, X))

    _, tape = unrolled_forward(X0, theta, 1.0, samples, 2, cfg)
    _, _, gg = unrolled_vjp(tape, c)
    h = 1e-5
    fd = (out(1.0 + h) - out(1.0 - h)) / (2 * h)
    assert abs(fd - gg) <= 1e-4 * abs(fd)


def test_trace_csv(tmp_path):
    X0, theta, samples = lda_instance(0, size=8)
    _, trace = run_lda(X0, theta, 1.0, samples, LDAConfig(alpha0=0.5, T_max=4))
    trace.to_csv(tmp_path / "t.csv")
    rows = list(csv.reader(open(tmp_path / "t.csv")))
    assert rows[0] == ["t", "eps", "alpha", "psi_eps", "grad_norm", "reduced"]
    assert len(rows) == 1 + len(trace.steps)
    assert float(rows[1][3]) == trace.steps[0].psi_eps
