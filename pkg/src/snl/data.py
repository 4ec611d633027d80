"""Toy datasets and the binary dataset container.

Container layout (little-endian)::

    magic        8 bytes  b"SNLDATA\\x00"
    count        u32      number of samples
    n_dims       u32
    dims         n_dims x u32   per-sample feature shape
    n_classes    u32
    features     count * prod(dims) f64
    labels       count u32
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

DATA_MAGIC = b"SNLDATA\x00"
SYNTHETIC_KINDS = ("two-gaussians", "concentric-rings", "xor-grid", "bars")


class DatasetError(ValueError):
    pass


class DatasetFormatError(DatasetError):
    """Malformed or truncated container file."""


class ClassCountError(DatasetError):
    """Labels or declared class count disagree."""


@dataclass
class Dataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    n_classes: int

    @property
    def input_shape(self) -> tuple[int, ...]:
        return tuple(self.x_train.shape[1:])


@dataclass
class DatasetSpec:
    kind: str = "two-gaussians"
    n: int = 1000
    noise: float = 0.3
    seed: int = 0
    test_fraction: float = 0.25
    path: str | None = None
    n_classes: int | None = None
    image_size: int = 8
    grid: int = 2

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSpec":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


def _balanced_labels(n: int, k: int) -> np.ndarray:
    return np.arange(n) % k


def _two_gaussians(n, noise, rng):
    y = _balanced_labels(n, 2)
    centers = np.array([[-1.0, -1.0], [1.0, 1.0]])
    return centers[y] + noise * rng.standard_normal((n, 2)), y


def _rings(n, noise, rng):
    y = _balanced_labels(n, 2)
    theta = rng.uniform(0, 2 * np.pi, n)
    r = np.where(y == 0, 1.0, 2.0) + noise * rng.standard_normal(n)
    return np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1), y


def _xor_grid(n, noise, rng, grid):
    """Gaussian clusters on a ``grid`` x ``grid`` lattice spanning [-1, 1]^2,
    labelled by the parity of the cell (grid=2 is the XOR problem)."""
    if grid < 2:
        raise DatasetError("xor-grid needs grid >= 2")
    cell = _balanced_labels(n, grid * grid)
    i, j = cell // grid, cell % grid
    centers = np.stack([2.0 * j - (grid - 1), 2.0 * i - (grid - 1)], axis=1) / (grid - 1)
    x = centers + noise * rng.standard_normal((n, 2))
    return x, ((i + j) % 2).astype(np.int64)


def _bars(n, noise, rng, size, n_classes):
    """Single-channel images holding one bar of random sign and offset.

    Class 0/1 are horizontal/vertical; with ``n_classes`` 4 the two
    diagonals are added. The random sign makes every class symmetric under
    negation, so no affine classifier beats chance.
    """
    k = n_classes or 2
    if k not in (2, 4):
        raise DatasetError("bars supports 2 or 4 classes")
    y = _balanced_labels(n, k)
    x = noise * rng.standard_normal((n, 1, size, size))
    offsets = rng.integers(0, size, n)
    signs = rng.choice([-1.0, 1.0], n)
    idx = np.arange(size)
    for i in range(n):
        img = np.zeros((size, size))
        o = offsets[i]
        if y[i] == 0:
            img[o, :] = 1.0
        elif y[i] == 1:
            img[:, o] = 1.0
        elif y[i] == 2:
            img[idx, (idx + o) % size] = 1.0
        else:
            img[idx, (o - idx) % size] = 1.0
        x[i, 0] += signs[i] * img
    return x, y


def _split(x, y, test_fraction, rng, n_classes) -> Dataset:
    if not 0 < test_fraction < 1:
        raise DatasetError(f"test_fraction must be in (0, 1), got {test_fraction}")
    perm = rng.permutation(len(y))
    n_test = int(round(len(y) * test_fraction))
    te, tr = perm[:n_test], perm[n_test:]
    return Dataset(x[tr], y[tr].astype(np.int64), x[te], y[te].astype(np.int64), n_classes)


def load_dataset(spec: DatasetSpec | dict) -> Dataset:
    """Build (or read) a dataset deterministically from its spec."""
    if isinstance(spec, dict):
        spec = DatasetSpec.from_dict(spec)
    rng = np.random.default_rng(spec.seed)
    if spec.kind == "file":
        if not spec.path:
            raise DatasetError("file dataset needs a path")
        x, y, k = read_container(spec.path)
        if spec.n_classes is not None and spec.n_classes != k:
            raise ClassCountError(f"file declares {k} classes, spec expects {spec.n_classes}")
        return _split(x, y, spec.test_fraction, rng, k)
    if spec.n < 4:
        raise DatasetError("need at least 4 samples")
    if spec.kind == "two-gaussians":
        x, y = _two_gaussians(spec.n, spec.noise, rng)
    elif spec.kind == "concentric-rings":
        x, y = _rings(spec.n, spec.noise, rng)
    elif spec.kind == "xor-grid":
        x, y = _xor_grid(spec.n, spec.noise, rng, spec.grid)
    elif spec.kind == "bars":
        x, y = _bars(spec.n, spec.noise, rng, spec.image_size, spec.n_classes)
    else:
        raise DatasetError(f"unknown dataset kind {spec.kind!r}")
    k = int(y.max()) + 1
    if spec.n_classes is not None and spec.kind != "bars" and spec.n_classes != k:
        raise ClassCountError(f"{spec.kind} has {k} classes, spec expects {spec.n_classes}")
    return _split(x.astype(np.float64), y, spec.test_fraction, rng, k)


def write_container(path, x: np.ndarray, y: np.ndarray, n_classes: int) -> None:
    x = np.ascontiguousarray(x, dtype="<f8")
    y = np.asarray(y)
    if len(x) != len(y):
        raise DatasetError("features and labels differ in length")
    if y.size and (y.min() < 0 or y.max() >= n_classes):
        raise ClassCountError(f"labels outside [0, {n_classes})")
    dims = x.shape[1:]
    head = DATA_MAGIC + struct.pack(f"<II{len(dims)}I", len(x), len(dims), *dims)
    head += struct.pack("<I", n_classes)
    Path(path).write_bytes(head + x.tobytes() + y.astype("<u4").tobytes())


def read_container(path) -> tuple[np.ndarray, np.ndarray, int]:
    raw = Path(path).read_bytes()
    if raw[:8] != DATA_MAGIC:
        raise DatasetFormatError(f"{path}: bad magic")
    try:
        count, nd = struct.unpack_from("<II", raw, 8)
        dims = struct.unpack_from(f"<{nd}I", raw, 16)
        (k,) = struct.unpack_from("<I", raw, 16 + 4 * nd)
    except struct.error as exc:
        raise DatasetFormatError(f"{path}: truncated header") from exc
    off = 20 + 4 * nd
    per = int(np.prod(dims, dtype=np.int64))
    need = off + 8 * count * per + 4 * count
    if len(raw) != need:
        raise DatasetFormatError(f"{path}: {len(raw)} bytes, expected {need}")
    x = np.frombuffer(raw, "<f8", count * per, off).astype(np.float64).reshape((count, *dims))
    y = np.frombuffer(raw, "<u4", count, off + 8 * count * per).astype(np.int64)
    if count and y.max() >= k:
        raise ClassCountError(f"{path}: label {y.max()} but only {k} classes declared")
    return x, y, k
