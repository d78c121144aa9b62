import numpy as np
import pytest

from varjoint.mri import KSpaceSample, radial_mask, simulate_kspace
from varjoint.nn import init_joint_params


def crandn(rng, *shape):
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)


def make_instance(seed, size=8, d=4, depth=2, synth_depth=2, ratio=0.5, scale=1.0):
    """Random images, measurements and a small joint model."""
    rng = np.random.default_rng(seed)
    theta = {k: scale * v for k, v in
             init_joint_params(d=d, depth=depth, synth_depth=synth_depth, seed=seed).items()}
    truth = [crandn(rng, size, size) for _ in range(2)]
    samples = []
    for i, x in enumerate(truth):
        mask = rng.random((size, size)) < ratio
        mask[size // 2, size // 2] = True
        samples.append(simulate_kspace(x, mask, 0.0, seed + i))
    X = tuple(crandn(rng, size, size) for _ in range(3))
    return X, theta, samples


def perturb_coords(rng, shape, n):
    """n random (flat index, is_imag) coordinates of a complex array."""
    size = int(np.prod(shape))
    idx = rng.choice(size, size=min(n, size), replace=False)
    return [(int(i), bool(rng.integers(2))) for i in idx]


def fd_coord(fn, arr, flat, imag, h):
    """Central difference of the scalar fn() wrt one real component of arr (in place)."""
    view = arr.reshape(-1)
    step = 1j * h if imag else h
    orig = view[flat]
    view[flat] = orig + step
    fp = fn()
    view[flat] = orig - step
    fm = fn()
    view[flat] = orig
    return (fp - fm) / (2 * h)


def grad_component(g, flat, imag):
    v = g.reshape(-1)[flat]
    return v.imag if imag else v.real


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def lda_instance(seed, size=16, scale=0.1):
    """Phantom-like LDA problem: weak random model, zero-filled start."""
    from varjoint.data import PhantomSpec, phantom_generate
    from varjoint.mri import zero_filled

    theta = {k: scale * v for k, v in
             init_joint_params(d=4, depth=2, synth_depth=2, seed=seed).items()}
    images = phantom_generate(PhantomSpec((size, size), 4, seed)).images
    samples = [simulate_kspace(images[i], radial_mask(size, size, 0.4, seed + i), 0.0, seed)
               for i in range(2)]
    z1, z2 = zero_filled(samples[0]), zero_filled(samples[1])
    return (z1, z2, 0.5 * (z1 + z2)), theta, samples


def tiny_training_setup(n=6, size=8, seed=0, scale=0.3):
    """Small dataset, weak joint model and the matching configs for trainer tests."""
    from varjoint.data import DataConfig, build_dataset
    from varjoint.lda import LDAConfig
    from varjoint.train import TrainConfig

    ds = build_dataset(DataConfig(n, (size, size), 3, 0.4, 0.0, (0.5, 0.34, 0.16)), seed)
    theta = {k: scale * v for k, v in
             init_joint_params(d=4, depth=2, synth_depth=2, seed=seed).items()}
    cfg = TrainConfig(n_phases=2, K=2, max_inner=2, delta_tol=1e-3 * 0.95**2 * 1.0001)
    return ds, theta, cfg, LDAConfig(alpha0=0.3)
