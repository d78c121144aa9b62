import numpy as np
import pytest

from varjoint.metrics import PSNR_CAP, SSIMConfig, nmse, psnr, ssim, ssim_vjp

from metric_cases import analytic_cases, ssim_vjp_fd_error


@pytest.mark.parametrize("name,passed", list(analytic_cases()))
def test_analytic_case(name, passed):
    assert passed, name


def test_ssim_vjp_matches_fd():
    assert ssim_vjp_fd_error(0) <= 1e-5
    assert ssim_vjp_fd_error(1) <= 1e-5


def test_ssim_gradient_vanishes_at_reference(rng):
    ref = rng.random((16, 16)) + 0.1
    assert np.max(np.abs(ssim_vjp(ref.astype(complex), ref))) < 1e-6


def test_ssim_self_and_symmetry(rng):
    for _ in range(10):
        x = rng.standard_normal((12, 12)) + 1j * rng.standard_normal((12, 12))
        y = rng.standard_normal((12, 12)) + 1j * rng.standard_normal((12, 12))
        assert ssim(x, x) == 1.0
        assert abs(ssim(x, y, data_range=2.0) - ssim(y, x, data_range=2.0)) <= 1e-12
        assert -1.0 <= ssim(x, y) <= 1.0


def test_small_images_use_a_shrunken_window(rng):
    x, y = rng.random((8, 8)), rng.random((8, 8))
    assert np.isfinite(ssim(x, y))
    assert ssim(x, y) == ssim(x, y, SSIMConfig(window=7))


def test_psnr_monotone_and_nmse_quadratic(rng):
    ref = rng.random((16, 16)) + 0.5
    direction = rng.standard_normal((16, 16)) * 0.01
    ps = [psnr(ref + a * direction, ref) for a in (0.5, 1.0, 2.0, 4.0)]
    assert all(p1 > p2 for p1, p2 in zip(ps, ps[1:]))
    n1, n2 = nmse(ref + direction, ref), nmse(ref + 3 * direction, ref)
    assert n2 == pytest.approx(9 * n1, rel=1e-12)


def test_cap_applies_to_tiny_errors():
    ref = np.ones((4, 4))
    assert psnr(ref + 1e-15, ref) == PSNR_CAP
