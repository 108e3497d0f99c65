"""Desk-scale image datasets: synthetic generator, raw binary format, batching.

On-disk layout of a dataset directory::

    meta        text, one "key value" per line: count, channels, height, width, classes
    images.bin  count*channels*height*width unsigned bytes, N x C x H x W row-major
    labels.bin  count unsigned bytes

Every stored value is one unsigned byte, so the little-endian convention is trivially met.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

META_KEYS = ("count", "channels", "height", "width", "classes")


class DataError(Exception):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # uint8, N x C x H x W
    labels: np.ndarray  # uint8, N
    num_classes: int

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.uint8)
        self.labels = np.asarray(self.labels, dtype=np.uint8)
        if self.images.ndim != 4 or len(self.images) != len(self.labels):
            raise DataError(f"images {self.images.shape} and labels {self.labels.shape} disagree")
        if len(self.labels) and int(self.labels.max()) >= self.num_classes:
            raise DataError(f"label {int(self.labels.max())} outside {self.num_classes} classes")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_shape(self) -> tuple:
        return self.images.shape[1:]

    def subset(self, index) -> "Dataset":
        return Dataset(self.images[index], self.labels[index], self.num_classes)

    def split(self, *fractions: float) -> list["Dataset"]:
        """Contiguous splits; the last split takes the remainder."""
        n = len(self)
        bounds = [0]
        for f in fractions:
            bounds.append(bounds[-1] + int(round(f * n)))
        bounds.append(n)
        return [self.subset(slice(a, b)) for a, b in zip(bounds[:-1], bounds[1:])]


def make_synthetic(num_classes: int, n: int, hw: int, seed: int, channels: int = 3,
                   noise: float = 0.45) -> Dataset:
    """Class-conditional smooth patterns with random shifts, contrast and pixel noise."""
    if num_classes < 2 or n < 1 or hw < 2:
        raise DataError("synthetic data needs >= 2 classes, >= 1 image and side >= 2")
    rng = np.random.default_rng(seed)
    yy, xx = np.meshgrid(np.arange(hw), np.arange(hw), indexing="ij")
    protos = np.zeros((num_classes, channels, hw, hw))
    for c in range(num_classes):
        for ch in range(channels):
            for _ in range(3):
                fy, fx = rng.uniform(-0.9, 0.9, size=2)
                phase = rng.uniform(0, 2 * np.pi)
                protos[c, ch] += np.cos(fy * yy + fx * xx + phase)
    protos /= np.abs(protos).max(axis=(2, 3), keepdims=True)
    labels = rng.integers(0, num_classes, size=n)
    shifts = rng.integers(-1, 2, size=(n, 2))
    contrast = rng.uniform(0.6, 1.2, size=(n, 1, 1, 1))
    images = np.empty((n, channels, hw, hw))
    for k in range(n):
        images[k] = np.roll(protos[labels[k]], tuple(shifts[k]), axis=(1, 2))
    images = images * contrast + noise * rng.standard_normal(images.shape)
    pixels = np.clip(np.round(127.5 + 80.0 * images), 0, 255)
    return Dataset(pixels.astype(np.uint8), labels.astype(np.uint8), num_classes)


def parse_synth_spec(spec: str) -> tuple[int, int, int, int]:
    """Parse ``classes,n,hw,seed`` as given to ``--synth``."""
    try:
        classes, n, hw, seed = (int(v) for v in spec.split(","))
    except ValueError:
        raise DataError(f"--synth expects classes,n,hw,seed; got {spec!r}") from None
    return classes, n, hw, seed


def save_dataset(ds: Dataset, directory) -> None:
    path = Path(directory)
    path.mkdir(parents=True, exist_ok=True)
    n, c, h, w = ds.images.shape
    meta = dict(zip(META_KEYS, (n, c, h, w, ds.num_classes)))
    (path / "meta").write_text("".join(f"{k} {v}\n" for k, v in meta.items()))
    (path / "images.bin").write_bytes(np.ascontiguousarray(ds.images).tobytes())
    (path / "labels.bin").write_bytes(ds.labels.tobytes())


def load_dataset(directory) -> Dataset:
    path = Path(directory)
    if not (path / "meta").is_file():
        raise DataError(f"dataset directory {os.fspath(path)!r} has no meta file")
    meta = {}
    for lineno, line in enumerate((path / "meta").read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, _, value = line.partition(" ")
        try:
            meta[key.strip()] = int(value)
        except ValueError:
            raise DataError(f"meta line {lineno}: bad value {value!r}") from None
    missing = [k for k in META_KEYS if k not in meta]
    if missing:
        raise DataError(f"meta file lacks {missing}")
    n, c, h, w = (meta[k] for k in META_KEYS[:4])
    for name in ("images.bin", "labels.bin"):
        if not (path / name).is_file():
            raise DataError(f"dataset directory lacks {name}")
    images = np.fromfile(path / "images.bin", dtype=np.uint8)
    labels = np.fromfile(path / "labels.bin", dtype=np.uint8)
    if images.size != n * c * h * w or labels.size != n:
        raise DataError(f"binary sizes ({images.size}, {labels.size}) do not match meta {meta}")
    return Dataset(images.reshape(n, c, h, w), labels, meta["classes"])


def to_float(images: np.ndarray, dtype=np.float32) -> np.ndarray:
    return ((images.astype(np.float64) - 127.5) / 64.0).astype(dtype)


def augment(images: np.ndarray, rng: np.random.Generator, crop: bool = True, flip: bool = True) -> np.ndarray:
    """Random 1-pixel-padded crop and horizontal flip, per image."""
    out = images
    n, _, h, w = images.shape
    if crop:
        padded = np.pad(images, ((0, 0), (0, 0), (1, 1), (1, 1)), mode="edge")
        offsets = rng.integers(0, 3, size=(n, 2))
        out = np.stack([padded[k, :, dy:dy + h, dx:dx + w] for k, (dy, dx) in enumerate(offsets)])
    if flip:
        mask = rng.random(n) < 0.5
        out = out.copy() if out is images else out
        out[mask] = out[mask][..., ::-1]
    return out


def iterate_batches(ds: Dataset, batch_size: int, rng: np.random.Generator | None = None,
                    drop_last: bool = False):
    """Yield (uint8 images, labels) batches, shuffled when ``rng`` is given."""
    order = np.arange(len(ds)) if rng is None else rng.permutation(len(ds))
    stop = len(order) - (len(order) % batch_size if drop_last else 0)
    for start in range(0, stop, batch_size):
        idx = order[start:start + batch_size]
        if len(idx) == 0:
            break
        yield ds.images[idx], ds.labels[idx].astype(np.int64)
