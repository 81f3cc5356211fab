"""Data sources: a synthetic two-domain generator, IDX digit files, preprocessing."""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (ConfigError, IdxCountMismatchError, IdxMagicError,
                     IdxTruncatedError, ShapeError)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class LabeledSet:
    x: np.ndarray
    y: np.ndarray
    domain: str = "source"

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.intp)
        if len(self.x) == 0:
            raise ConfigError("a labeled set needs at least one example")
        if len(self.x) != len(self.y):
            raise ShapeError(f"{len(self.x)} examples but {len(self.y)} labels")

    def __len__(self) -> int:
        return len(self.x)

    @property
    def num_classes(self) -> int:
        return int(self.y.max()) + 1

    def take(self, idx) -> "LabeledSet":
        return LabeledSet(self.x[idx], self.y[idx], self.domain)


@dataclass
class SyntheticSpec:
    """Two domains of Gaussian class clusters placed on circles.

    Class ``c`` sits at angle ``2*pi*c/K`` on a circle of radius ``source_radius``
    in the first two dimensions (remaining dims zero) for the source domain; the
    target uses ``target_radius`` and adds ``rotation_deg``. With
    ``target_radius > source_radius`` the target logits start out further from
    the origin than the source ones (a contraction scenario); the reverse gives
    an expansion scenario.
    """

    K: int = 3
    dim: int = 2
    source_radius: float = 3.0
    target_radius: float = 6.0
    rotation_deg: float = 0.0
    per_class: int = 300
    noise: float = 0.4
    seed: int = 0

    def __post_init__(self):
        if self.K < 2:
            raise ConfigError("need K >= 2 classes")
        if self.dim < 2:
            raise ConfigError("need dim >= 2")
        if self.source_radius <= 0 or self.target_radius <= 0:
            raise ConfigError("radii must be positive")
        if self.per_class < 1 or self.noise < 0:
            raise ConfigError("per_class must be >= 1 and noise >= 0")


def class_means(K: int, radius: float, dim: int = 2, rotation_deg: float = 0.0) -> np.ndarray:
    angles = 2 * np.pi * np.arange(K) / K + np.deg2rad(rotation_deg)
    means = np.zeros((K, dim))
    means[:, 0] = radius * np.cos(angles)
    means[:, 1] = radius * np.sin(angles)
    return means


def _sample_domain(spec, radius, rotation, rng, domain):
    means = class_means(spec.K, radius, spec.dim, rotation)
    y = np.repeat(np.arange(spec.K), spec.per_class)
    x = means[y] + spec.noise * rng.standard_normal((len(y), spec.dim))
    order = rng.permutation(len(y))
    return LabeledSet(x[order], y[order], domain)


def gen_two_domain(spec: SyntheticSpec) -> tuple[LabeledSet, LabeledSet]:
    """Draw a labeled source set and a target set (labels kept for evaluation only)."""
    src_rng, tgt_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(spec.seed).spawn(2))
    source = _sample_domain(spec, spec.source_radius, 0.0, src_rng, "source")
    target = _sample_domain(spec, spec.target_radius, spec.rotation_deg, tgt_rng, "target")
    return source, target


def export_csv(dataset: LabeledSet, path) -> None:
    """One row per example: label, then the flattened features."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        for label, row in zip(dataset.y, dataset.x.reshape(len(dataset), -1)):
            writer.writerow([int(label), *(repr(float(v)) for v in row)])


def import_csv(path, domain: str = "source") -> LabeledSet:
    data = np.loadtxt(path, delimiter=",", ndmin=2)
    return LabeledSet(data[:, 1:], data[:, 0].astype(np.intp), domain)


def _read_idx(path, expected_magic: int):
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise IdxTruncatedError(f"{path}: file too short for an IDX header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise IdxMagicError(f"{path}: magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxTruncatedError(f"{path}: truncated header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims))
    payload = raw[header:]
    if len(payload) < count:
        raise IdxTruncatedError(f"{path}: payload has {len(payload)} bytes, header promises {count}")
    return np.frombuffer(payload[:count], dtype=np.uint8).reshape(dims)


def load_idx(images_path, labels_path, domain: str = "source") -> LabeledSet:
    """Read an IDX image/label pair; pixels are scaled to [0, 1]."""
    images = _read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC)
    if len(images) != len(labels):
        raise IdxCountMismatchError(f"{len(images)} images but {len(labels)} labels")
    return LabeledSet(images.astype(np.float64) / 255.0, labels.astype(np.intp), domain)


def write_idx(images_path, labels_path, images: np.ndarray, labels: np.ndarray) -> None:
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">I", IDX_IMAGES_MAGIC))
        fh.write(struct.pack(f">{images.ndim}I", *images.shape))
        fh.write(images.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)))
        fh.write(labels.tobytes())


def resize_bilinear(images, out_h: int, out_w: int) -> np.ndarray:
    """Corner-aligned bilinear resize of an ``(n, h, w)`` stack."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 3:
        raise ShapeError(f"expected (n, h, w) images, got shape {images.shape}")
    _, h, w = images.shape
    if min(h, w) < 2 or min(out_h, out_w) < 2:
        raise ShapeError("bilinear resize needs at least 2 pixels per side")
    if (h, w) == (out_h, out_w):
        return images.copy()
    ys = np.linspace(0, h - 1, out_h)
    xs = np.linspace(0, w - 1, out_w)
    y0 = np.minimum(np.floor(ys).astype(int), h - 2)
    x0 = np.minimum(np.floor(xs).astype(int), w - 2)
    wy = (ys - y0)[None, :, None]
    wx = (xs - x0)[None, None, :]
    top = images[:, y0][:, :, x0] * (1 - wx) + images[:, y0][:, :, x0 + 1] * wx
    bot = images[:, y0 + 1][:, :, x0] * (1 - wx) + images[:, y0 + 1][:, :, x0 + 1] * wx
    return top * (1 - wy) + bot * wy


def subsample(dataset: LabeledSet, n: int, seed: int) -> LabeledSet:
    if not 0 < n <= len(dataset):
        raise ConfigError(f"cannot draw {n} items from a set of {len(dataset)}")
    idx = np.random.default_rng(seed).choice(len(dataset), size=n, replace=False)
    return dataset.take(idx)


def validation_split(dataset: LabeledSet, fraction: float, seed: int) -> tuple[LabeledSet, LabeledSet]:
    """Split off ``round(fraction * n)`` items for validation."""
    if not 0.0 < fraction < 1.0:
        raise ConfigError(f"validation fraction must lie in (0, 1), got {fraction}")
    n = len(dataset)
    n_val = int(round(fraction * n))
    if n_val == 0 or n_val == n:
        raise ConfigError(f"fraction {fraction} of {n} items leaves an empty split")
    perm = np.random.default_rng(seed).permutation(n)
    return dataset.take(np.sort(perm[n_val:])), dataset.take(np.sort(perm[:n_val]))


def as_images(dataset: LabeledSet) -> LabeledSet:
    """Add a channel axis to ``(n, h, w)`` pixel data."""
    if dataset.x.ndim == 3:
        return LabeledSet(dataset.x[:, None], dataset.y, dataset.domain)
    return dataset
