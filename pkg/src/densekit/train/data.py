"""Desk-scale datasets: synthetic generators, a small binary format, augmentation."""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterator, Optional, Tuple

import numpy as np

from densekit.errors import DataError

MAGIC = b"DKDS"
_HEADER = struct.Struct("<4sIIIII")
_DTYPES = {1: np.dtype("<u1"), 2: np.dtype("<f4"), 3: np.dtype("<f8")}
_CODES = {v.str: k for k, v in _DTYPES.items()}


@dataclass
class Dataset:
    images: np.ndarray          # (N, C, H, W)
    labels: np.ndarray          # (N,) int64
    classes: int
    mean: Optional[np.ndarray] = None
    std: Optional[np.ndarray] = None
    normalized: bool = False

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise DataError(f"images must be (N, C, H, W), got shape {self.images.shape}")
        if self.labels.shape != (self.images.shape[0],):
            raise DataError(f"{self.images.shape[0]} images but labels have shape {self.labels.shape}")
        bad = np.flatnonzero((self.labels < 0) | (self.labels >= self.classes))
        if bad.size:
            raise DataError(f"label {self.labels[bad[0]]} at sample {bad[0]} outside [0, {self.classes})")

    def __len__(self):
        return len(self.labels)

    @property
    def shape(self) -> tuple:
        return tuple(self.images.shape[1:])

    def subset(self, idx) -> "Dataset":
        return replace(self, images=self.images[idx], labels=self.labels[idx])


def normalize(ds: Dataset, mean=None, std=None) -> Dataset:
    """Per-channel standardization; statistics from ``ds`` unless given (e.g. from a training set)."""
    if ds.normalized:
        raise DataError("dataset is already normalized")
    x = ds.images.astype(np.float64)
    if mean is None:
        mean = x.mean(axis=(0, 2, 3))
        std = x.std(axis=(0, 2, 3))
    mean, std = np.asarray(mean, dtype=np.float64), np.asarray(std, dtype=np.float64)
    std = np.where(std > 0, std, 1.0)
    x = (x - mean[None, :, None, None]) / std[None, :, None, None]
    return replace(ds, images=x, mean=mean, std=std, normalized=True)


# ------------------------------------------------------------------ augmentation


def pad_crop_mirror(images: np.ndarray, rng: np.random.Generator, pad: int = 4) -> np.ndarray:
    """Zero-pad by ``pad`` on each side, take a random crop of the original size, flip half."""
    n, c, h, w = images.shape
    if pad:
        padded = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=images.dtype)
        padded[:, :, pad:pad + h, pad:pad + w] = images
    else:
        padded = images
    dy = rng.integers(0, 2 * pad + 1, size=n)
    dx = rng.integers(0, 2 * pad + 1, size=n)
    flip = rng.random(n) < 0.5
    out = np.empty_like(images)
    for i in range(n):
        crop = padded[i, :, dy[i]:dy[i] + h, dx[i]:dx[i] + w]
        out[i] = crop[:, :, ::-1] if flip[i] else crop
    return out


def batches(n: int, batch: int, rng: Optional[np.random.Generator] = None) -> Iterator[np.ndarray]:
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for i in range(0, n, batch):
        yield order[i:i + batch]


# ------------------------------------------------------------------ synthetic sets


def blobs(n: int, size: int = 16, classes: int = 2, channels: int = 3, seed: int = 0,
          noise: float = 0.1) -> Dataset:
    """Each class is a Gaussian bump at its own position; linearly separable by construction."""
    if classes < 2:
        raise DataError(f"blobs needs >= 2 classes, got {classes}")
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    angles = 2 * np.pi * np.arange(classes) / classes
    r = size / 4
    centers = [(size / 2 + r * np.sin(a), size / 2 + r * np.cos(a)) for a in angles]
    sigma = size / 8
    templates = np.stack([np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma ** 2)) for cy, cx in centers])
    labels = np.arange(n) % classes
    rng.shuffle(labels)
    # per-sample colour so that position is the only class signal
    tint = rng.uniform(0.5, 1.0, size=(n, channels))
    images = templates[labels][:, None] * tint[:, :, None, None]
    images = images + noise * rng.normal(size=(n, channels, size, size))
    return Dataset(images, labels, classes)


def shapes(n: int, size: int = 16, channels: int = 3, seed: int = 0, noise: float = 0.15) -> Dataset:
    """Two classes, filled squares versus filled discs, at random positions over a random texture."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    labels = np.arange(n) % 2
    rng.shuffle(labels)
    images = np.empty((n, channels, size, size))
    for i in range(n):
        rad = rng.uniform(size / 6, size / 4)
        cy, cx = rng.uniform(rad, size - rad, size=2)
        if labels[i] == 0:
            mask = (np.abs(yy - cy) <= rad * 0.85) & (np.abs(xx - cx) <= rad * 0.85)
        else:
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= rad ** 2
        freq = rng.uniform(0.5, 1.5)
        texture = 0.2 * np.sin(freq * (xx + yy) + rng.uniform(0, 2 * np.pi))
        colour = rng.uniform(0.6, 1.0, size=channels)
        images[i] = texture + mask * colour[:, None, None]
    images += noise * rng.normal(size=images.shape)
    return Dataset(images, labels, 2)


GENERATORS = {"blobs": blobs, "shapes": shapes}


def synthetic(name: str, n: int, size: int = 16, seed: int = 0, **kw) -> Dataset:
    try:
        gen = GENERATORS[name]
    except KeyError:
        raise DataError(f"unknown synthetic dataset {name!r}; known {sorted(GENERATORS)}")
    return gen(n, size=size, seed=seed, **kw)


# ------------------------------------------------------------------ binary format


def save_dataset(ds: Dataset, path) -> None:
    """Header (magic, count, C, H, W, dtype code), images, then int32 labels; little-endian."""
    images = np.asarray(ds.images)
    dt = images.dtype.newbyteorder("<")
    code = _CODES.get(dt.str)
    if code is None:
        images, code = images.astype("<f4"), 2
    n, c, h, w = images.shape
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, n, c, h, w, code))
        f.write(np.ascontiguousarray(images, dtype=_DTYPES[code]).tobytes())
        f.write(np.asarray(ds.labels, dtype="<i4").tobytes())


def load_dataset(path, classes: Optional[int] = None) -> Dataset:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise DataError(f"cannot read dataset {path}: {e.strerror}")
    if len(raw) < _HEADER.size:
        raise DataError(f"{path}: file too short for a dataset header")
    magic, n, c, h, w, code = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise DataError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    if code not in _DTYPES:
        raise DataError(f"{path}: unknown dtype code {code}")
    dt = _DTYPES[code]
    n_img = n * c * h * w
    expect = _HEADER.size + n_img * dt.itemsize + 4 * n
    if len(raw) != expect:
        raise DataError(f"{path}: header promises {expect} bytes, file has {len(raw)}")
    images = np.frombuffer(raw, dtype=dt, count=n_img, offset=_HEADER.size).reshape(n, c, h, w)
    labels = np.frombuffer(raw, dtype="<i4", count=n, offset=_HEADER.size + n_img * dt.itemsize)
    if classes is None:
        classes = int(labels.max()) + 1 if n else 1
    return Dataset(images.astype(np.float64), labels.astype(np.int64), classes)


def split(ds: Dataset, eval_fraction: float, seed: int = 0) -> Tuple[Dataset, Dataset]:
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(ds))
    cut = len(ds) - int(round(eval_fraction * len(ds)))
    return ds.subset(np.sort(order[:cut])), ds.subset(np.sort(order[cut:]))
