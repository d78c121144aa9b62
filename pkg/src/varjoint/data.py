"""Synthetic multi-contrast ellipse phantoms and train/val/test datasets.

Three modalities share one tissue map ``t`` in [0, 1] with fixed contrasts
m1(t) = t, m2(t) = 1 - t^2 and m3(t) = 0.5 + 0.5 sin(pi t), so the target
contrast is an exact pointwise function of the sources. A smooth phase
field common to all three is applied on top.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .io import load_array, load_complex, save_array
from .mri import KSpaceSample, radial_mask, simulate_kspace
from .objective import ImageTriple

PHASE_SCALE = 0.5
SPLITS = ("train", "val", "test")


def contrast_maps(t: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    return t, 1.0 - t * t, 0.5 + 0.5 * np.sin(np.pi * t)


@dataclass(frozen=True)
class PhantomSpec:
    size: tuple[int, int] = (32, 32)
    num_ellipses: int = 6
    seed: int = 0


@dataclass
class Phantom:
    tissue: np.ndarray
    magnitudes: tuple[np.ndarray, np.ndarray, np.ndarray]
    phase: np.ndarray

    @property
    def images(self) -> ImageTriple:
        rot = np.exp(1j * self.phase)
        return tuple(m * rot for m in self.magnitudes)  # type: ignore[return-value]


def phantom_generate(spec: PhantomSpec) -> Phantom:
    h, w = spec.size
    rng = np.random.default_rng(spec.seed)
    yy, xx = np.meshgrid(np.linspace(-1, 1, h), np.linspace(-1, 1, w), indexing="ij")
    t = np.zeros((h, w))
    for k in range(spec.num_ellipses):
        if k == 0:  # head outline
            cy, cx = rng.uniform(-0.05, 0.05, size=2)
            ay, ax = rng.uniform(0.75, 0.9, size=2)
            label = rng.uniform(0.1, 0.3)
        else:
            cy, cx = rng.uniform(-0.45, 0.45, size=2)
            ay, ax = rng.uniform(0.08, 0.35, size=2)
            label = rng.uniform(0.0, 1.0)
        angle = rng.uniform(0, np.pi)
        c, s = np.cos(angle), np.sin(angle)
        u = (xx - cx) * c + (yy - cy) * s
        v = -(xx - cx) * s + (yy - cy) * c
        t[(u / ax) ** 2 + (v / ay) ** 2 <= 1.0] = label
    coef = rng.uniform(-1, 1, size=4)
    phase = coef[0] + coef[1] * yy + coef[2] * xx + coef[3] * xx * yy
    phase *= PHASE_SCALE / max(np.max(np.abs(phase)), 1e-12)
    return Phantom(t, contrast_maps(t), phase)


@dataclass
class TrainSample:
    kspace: tuple[KSpaceSample, KSpaceSample]
    reference: ImageTriple
    sample_id: str = ""
    initial: ImageTriple | None = None


@dataclass
class Dataset:
    samples: list[TrainSample]
    splits: dict[str, list[int]]
    meta: dict = field(default_factory=dict)

    def split(self, name: str) -> list[TrainSample]:
        return [self.samples[i] for i in self.splits[name]]

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for name in SPLITS:
            h.update(name.encode())
            for i in self.splits.get(name, []):
                s = self.samples[i]
                h.update(s.sample_id.encode())
                for arr in (*s.reference, s.kspace[0].mask, s.kspace[0].kspace,
                            s.kspace[1].mask, s.kspace[1].kspace):
                    h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()


@dataclass(frozen=True)
class DataConfig:
    n_samples: int
    size: tuple[int, int]
    num_ellipses: int
    mask_ratio: float
    noise_std: float
    split: tuple[float, float, float]


def split_sizes(n: int, fractions: Sequence[float]) -> tuple[int, int, int]:
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    return n_train, n_val, n - n_train - n_val


def build_dataset(cfg: DataConfig, seed: int) -> Dataset:
    """Phantoms, per-sample radial masks and simulated k-space; a pure function of ``seed``."""
    h, w = cfg.size
    samples = []
    for k in range(cfg.n_samples):
        s_phantom, s_m1, s_m2, s_noise = np.random.SeedSequence([seed, k]).generate_state(4)
        ph = phantom_generate(PhantomSpec((h, w), cfg.num_ellipses, int(s_phantom)))
        X = ph.images
        ks = tuple(
            simulate_kspace(X[i], radial_mask(h, w, cfg.mask_ratio, int(ms)),
                            cfg.noise_std, int(s_noise) + i)
            for i, ms in enumerate((s_m1, s_m2))
        )
        samples.append(TrainSample(ks, X, f"sample_{k:04d}"))  # type: ignore[arg-type]
    order = np.random.default_rng(seed).permutation(cfg.n_samples)
    n_train, n_val, _ = split_sizes(cfg.n_samples, cfg.split)
    splits = {
        "train": sorted(order[:n_train].tolist()),
        "val": sorted(order[n_train:n_train + n_val].tolist()),
        "test": sorted(order[n_train + n_val:].tolist()),
    }
    return Dataset(samples, splits, {"config": asdict(cfg), "seed": seed})


def save_sample(directory: Path, s: TrainSample) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    for i, x in enumerate(s.reference, start=1):
        save_array(directory / f"x{i}.npy", x)
    for i, k in enumerate(s.kspace, start=1):
        save_array(directory / f"f{i}.npy", k.kspace)
        save_array(directory / f"mask{i}.npy", k.mask.astype(np.float64))


def load_sample(directory: str | Path) -> TrainSample:
    directory = Path(directory)
    ref = tuple(load_complex(directory / f"x{i}.npy") for i in (1, 2, 3))
    ks = tuple(
        KSpaceSample(load_array(directory / f"mask{i}.npy") > 0.5,
                     load_complex(directory / f"f{i}.npy"))
        for i in (1, 2)
    )
    return TrainSample(ks, ref, directory.name)  # type: ignore[arg-type]


def save_dataset(ds: Dataset, root: str | Path) -> str:
    root = Path(root)
    for name in SPLITS:
        for i in ds.splits[name]:
            save_sample(root / name / ds.samples[i].sample_id, ds.samples[i])
    digest = ds.content_hash()
    meta = dict(ds.meta, hash=digest, splits={k: [ds.samples[i].sample_id for i in v]
                                              for k, v in ds.splits.items()})
    (root / "dataset.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return digest


def load_split(root: str | Path, split: str) -> list[TrainSample]:
    root = Path(root)
    meta = json.loads((root / "dataset.json").read_text())
    return [load_sample(root / split / sid) for sid in meta["splits"][split]]


def load_dataset(root: str | Path) -> Dataset:
    root = Path(root)
    meta = json.loads((root / "dataset.json").read_text())
    samples, splits = [], {}
    for name in SPLITS:
        ids = meta["splits"][name]
        splits[name] = list(range(len(samples), len(samples) + len(ids)))
        samples.extend(load_sample(root / name / sid) for sid in ids)
    return Dataset(samples, splits, meta)
