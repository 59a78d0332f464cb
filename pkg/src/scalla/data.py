"""Dataset ingestion, synthetic generators, and normalization.

IDX is the MNIST-family binary format: a big-endian 32-bit magic
(0x00000803 for image tensors, 0x00000801 for label vectors), one 32-bit
size per dimension, then raw unsigned bytes. Pixels are scaled to [0, 1]
on load.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801

ROLES = ("train", "test", "context", "ood")


class IdxBadMagicError(ValueError):
    pass


class IdxTruncatedError(ValueError):
    pass


class IdxCountMismatchError(ValueError):
    pass


@dataclass
class Dataset:
    """Aligned inputs and labels plus the role this split plays."""

    inputs: np.ndarray
    labels: np.ndarray
    role: str = "train"
    norm_stats: tuple[np.ndarray, np.ndarray] | None = None

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"unknown role {self.role!r}")
        if len(self.inputs) != len(self.labels):
            raise ValueError("inputs and labels must align")

    def __len__(self) -> int:
        return len(self.inputs)


def _read_exact(fh, n: int, path) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise IdxTruncatedError(f"truncated IDX file {path}: wanted {n} bytes, got {len(data)}")
    return data


def _read_idx_array(path, magic: int) -> np.ndarray:
    path = Path(path)
    with open(path, "rb") as fh:
        (got_magic,) = struct.unpack(">I", _read_exact(fh, 4, path))
        if got_magic != magic:
            raise IdxBadMagicError(
                f"bad magic in {path}: got 0x{got_magic:08x}, expected 0x{magic:08x}"
            )
        ndim = magic & 0xFF
        dims = struct.unpack(f">{ndim}I", _read_exact(fh, 4 * ndim, path))
        payload = _read_exact(fh, int(np.prod(dims)), path)
        if fh.read(1):
            raise IdxTruncatedError(f"trailing bytes in IDX file {path}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(dims)


def load_idx(images_path, labels_path, role: str = "train") -> Dataset:
    """Parse an IDX image/label pair; pixels land in [0, 1] as (N, 1, H, W)."""
    images = _read_idx_array(images_path, IMAGES_MAGIC)
    labels = _read_idx_array(labels_path, LABELS_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise IdxCountMismatchError(
            f"{images.shape[0]} images but {labels.shape[0]} labels "
            f"({images_path} / {labels_path})"
        )
    inputs = images.astype(np.float64)[:, None, :, :] / 255.0
    return Dataset(inputs, labels.astype(np.int64), role)


def write_idx(images_u8: np.ndarray, labels_u8: np.ndarray, images_path, labels_path) -> None:
    """Inverse of load_idx for fixtures; expects uint8 (N, H, W) images."""
    images_u8 = np.asarray(images_u8, dtype=np.uint8)
    labels_u8 = np.asarray(labels_u8, dtype=np.uint8)
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IMAGES_MAGIC, *images_u8.shape))
        fh.write(images_u8.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", LABELS_MAGIC, labels_u8.shape[0]))
        fh.write(labels_u8.tobytes())


def make_two_moons(n: int, noise: float, seed) -> Dataset:
    """Interleaved half-circles with Gaussian jitter; exact circles at noise 0."""
    if n < 1:
        raise ValueError("n must be >= 1")
    n_out = n // 2
    n_in = n - n_out
    t_out = np.linspace(0.0, np.pi, n_out)
    t_in = np.linspace(0.0, np.pi, n_in)
    outer = np.stack([np.cos(t_out), np.sin(t_out)], axis=1)
    inner = np.stack([1.0 - np.cos(t_in), 0.5 - np.sin(t_in)], axis=1)
    inputs = np.concatenate([outer, inner], axis=0)
    labels = np.concatenate([np.zeros(n_out, dtype=np.int64), np.ones(n_in, dtype=np.int64)])
    if noise > 0.0:
        rng = np.random.default_rng(seed)
        inputs = inputs + rng.normal(0.0, noise, size=inputs.shape)
    return Dataset(inputs, labels)


def make_ring_ood(
    n: int,
    radius: float,
    seed,
    center=(0.0, 0.0),
    jitter: float = 0.0,
    role: str = "ood",
) -> Dataset:
    """Points at the given radius around a center (typically the train centroid)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    angles = rng.uniform(0.0, 2.0 * np.pi, size=n)
    r = radius + (rng.normal(0.0, jitter, size=n) if jitter > 0.0 else 0.0)
    inputs = np.stack([r * np.cos(angles), r * np.sin(angles)], axis=1)
    inputs = inputs + np.asarray(center, dtype=np.float64)
    return Dataset(inputs, np.zeros(n, dtype=np.int64), role)


def make_blobs(n: int, centers, seed, cluster_std: float = 1.0) -> Dataset:
    """Gaussian clusters, one class per center, round-robin assignment."""
    if n < 1:
        raise ValueError("n must be >= 1")
    centers = np.asarray(centers, dtype=np.float64)
    rng = np.random.default_rng(seed)
    labels = np.arange(n, dtype=np.int64) % len(centers)
    inputs = centers[labels] + rng.normal(0.0, cluster_std, size=(n, centers.shape[1]))
    return Dataset(inputs, labels)


def normalize(dataset: Dataset, stats_from: Dataset) -> Dataset:
    """Standardize per feature with statistics from the train split only."""
    if stats_from.role != "train":
        raise ValueError("normalization statistics must come from the train split")
    if stats_from.norm_stats is not None:
        mean, std = stats_from.norm_stats
    else:
        mean = stats_from.inputs.mean(axis=0)
        std = stats_from.inputs.std(axis=0)
    scaled = (dataset.inputs - mean) / np.maximum(std, 1e-8)
    return Dataset(scaled, dataset.labels, dataset.role, norm_stats=(mean, std))
