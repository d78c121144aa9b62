"""NPY v1.0 array files and parameter checkpoints.

Everything on disk is little-endian float64; complex arrays gain a trailing
axis of length 2 holding (re, im).
"""
from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Any

import numpy as np
from numpy.lib import format as npformat

from .errors import FormatError

MANIFEST = "manifest.json"


def to_real_pairs(array: np.ndarray) -> np.ndarray:
    array = np.asarray(array)
    if np.iscomplexobj(array):
        return np.stack([array.real, array.imag], axis=-1).astype("<f8")
    return array.astype("<f8")


def from_real_pairs(array: np.ndarray) -> np.ndarray:
    if array.ndim == 0 or array.shape[-1] != 2:
        raise FormatError(f"expected trailing (re, im) axis, got shape {array.shape}")
    out = np.empty(array.shape[:-1], dtype=complex)
    out.real, out.imag = array[..., 0], array[..., 1]  # keeps signed zeros bit-exact
    return out


def save_array(path: str | Path, array: np.ndarray) -> None:
    data = np.ascontiguousarray(to_real_pairs(array))
    with open(path, "wb") as fh:
        npformat.write_array(fh, data, version=(1, 0), allow_pickle=False)


def load_array(path: str | Path) -> np.ndarray:
    """Read a float64 NPY v1.0 file, validating magic, version, header and payload size."""
    with open(path, "rb") as fh:
        try:
            version = npformat.read_magic(fh)
        except ValueError as exc:
            raise FormatError(f"{path}: bad magic string") from exc
        if version != (1, 0):
            raise FormatError(f"{path}: unsupported NPY version {version}")
        try:
            shape, fortran, dtype = npformat.read_array_header_1_0(fh)
        except ValueError as exc:
            raise FormatError(f"{path}: malformed header: {exc}") from exc
        if dtype != np.dtype("<f8") or fortran:
            raise FormatError(f"{path}: expected C-ordered little-endian float64, got {dtype}")
        payload = fh.read()
    expected = int(np.prod(shape, dtype=np.int64)) * 8
    if len(payload) != expected:
        raise FormatError(f"{path}: header shape {shape} needs {expected} bytes, found {len(payload)}")
    return np.frombuffer(payload, dtype="<f8").reshape(shape).copy()


def load_complex(path: str | Path) -> np.ndarray:
    return from_real_pairs(load_array(path))


def save_checkpoint(directory: str | Path, tensors: dict[str, np.ndarray],
                    meta: dict[str, Any] | None = None) -> None:
    """One NPY file per tensor plus a JSON manifest mapping names to files."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = {}
    for name in sorted(tensors):
        fname = name.replace("/", "_") + ".npy"
        save_array(directory / fname, tensors[name])
        entries[name] = {"file": fname, "complex": bool(np.iscomplexobj(tensors[name]))}
    manifest = {"tensors": entries, "meta": meta or {}}
    tmp = directory / (MANIFEST + ".tmp")
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    os.replace(tmp, directory / MANIFEST)


def load_checkpoint(directory: str | Path) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    directory = Path(directory)
    try:
        manifest = json.loads((directory / MANIFEST).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"{directory}: unreadable checkpoint manifest") from exc
    tensors = {}
    for name, entry in manifest["tensors"].items():
        arr = load_array(directory / entry["file"])
        tensors[name] = from_real_pairs(arr) if entry["complex"] else arr
    return tensors, manifest.get("meta", {})
