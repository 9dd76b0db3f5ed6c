"""Dataset container, SSL splits, batch sampling, and synthetic data.

Datasets live in the SDF binary format for deterministic bit-exact tests:
little-endian magic "SDF1", u32 counts (N, channels, height, width,
classes), N*C*H*W float32 pixels in [0, 1], then N uint8 labels. Splits
take an equal number of labeled examples per class; the remainder becomes
the unlabeled pool (labels hidden). Two synthetic families (Gaussian blobs
and striped patterns) stand in for photographic data at desk scale.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .rng import BATCH_LABELED, BATCH_UNLABELED, SPLIT, SYNTH, substream

SDF_MAGIC = b"SDF1"


class SdfError(Exception):
    """Base class for dataset file problems."""


class SdfMagicError(SdfError):
    """File does not start with the SDF magic bytes."""


class SdfTruncatedError(SdfError):
    """Payload shorter or longer than the header promises."""


class SdfLabelError(SdfError):
    """A label falls outside [0, classes)."""


@dataclass
class Dataset:
    """Images (N, C, H, W) in [0, 1] with integer labels in [0, classes)."""

    images: np.ndarray
    labels: np.ndarray
    classes: int

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ValueError(f"images must be (N, C, H, W), got {self.images.shape}")
        if len(self.labels) != len(self.images) or len(self.images) < 1:
            raise ValueError("need one label per image and at least one image")
        if self.classes < 1 or self.classes > 256:
            raise ValueError("classes must lie in [1, 256] (uint8 labels)")
        if self.labels.min() < 0 or self.labels.max() >= self.classes:
            raise SdfLabelError("label outside [0, classes)")

    def __len__(self) -> int:
        return len(self.images)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return self.images.shape[1:]

    def onehot(self, indices) -> np.ndarray:
        eye = np.eye(self.classes)
        return eye[self.labels[indices]]


# ---------------------------------------------------------------------------
# SDF file format
# ---------------------------------------------------------------------------


def save_sdf(path, ds: Dataset) -> None:
    n, c, h, w = ds.images.shape
    with open(path, "wb") as fh:
        fh.write(SDF_MAGIC)
        fh.write(struct.pack("<5I", n, c, h, w, ds.classes))
        fh.write(np.ascontiguousarray(ds.images, dtype="<f4").tobytes())
        fh.write(ds.labels.astype(np.uint8).tobytes())


def load_sdf(path) -> Dataset:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != SDF_MAGIC:
        raise SdfMagicError(f"{path}: bad magic bytes")
    if len(raw) < 24:
        raise SdfTruncatedError(f"{path}: truncated header")
    n, c, h, w, classes = struct.unpack("<5I", raw[4:24])
    pixel_bytes = n * c * h * w * 4
    expected = 24 + pixel_bytes + n
    if len(raw) != expected:
        raise SdfTruncatedError(
            f"{path}: expected {expected} bytes for N={n}, got {len(raw)}"
        )
    images = (
        np.frombuffer(raw[24 : 24 + pixel_bytes], dtype="<f4")
        .reshape(n, c, h, w)
        .astype(np.float64)
    )
    labels = np.frombuffer(raw[24 + pixel_bytes :], dtype=np.uint8).astype(np.int64)
    if n and labels.max() >= classes:
        raise SdfLabelError(f"{path}: label {labels.max()} >= classes {classes}")
    return Dataset(images, labels, classes)


def convert_idx(images_path, labels_path) -> Dataset:
    """Read the classic big-endian IDX digit pair into a Dataset."""
    with open(images_path, "rb") as fh:
        raw = fh.read()
    magic, n, h, w = struct.unpack(">4I", raw[:16])
    if magic != 0x00000803:
        raise SdfMagicError(f"{images_path}: not an IDX image file")
    if len(raw) != 16 + n * h * w:
        raise SdfTruncatedError(f"{images_path}: truncated IDX payload")
    images = np.frombuffer(raw[16:], dtype=np.uint8).reshape(n, 1, h, w) / 255.0

    with open(labels_path, "rb") as fh:
        raw = fh.read()
    magic, n_lab = struct.unpack(">2I", raw[:8])
    if magic != 0x00000801:
        raise SdfMagicError(f"{labels_path}: not an IDX label file")
    if len(raw) != 8 + n_lab or n_lab != n:
        raise SdfTruncatedError(f"{labels_path}: label count mismatch")
    labels = np.frombuffer(raw[8:], dtype=np.uint8).astype(np.int64)
    return Dataset(images, labels, int(labels.max()) + 1)


# ---------------------------------------------------------------------------
# Semi-supervised splits and batch streams
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SslSplit:
    """Disjoint labeled/unlabeled index sets; labeled is class-balanced."""

    labeled: np.ndarray
    unlabeled: np.ndarray
    seed: int
    n_per_class: int


def make_split(
    ds: Dataset, n_per_class: int, seed: int, include_labeled_in_unlabeled: bool = False
) -> SslSplit:
    """Sample ``n_per_class`` labeled examples per class, rest unlabeled."""
    labeled = []
    for c in range(ds.classes):
        pool = np.flatnonzero(ds.labels == c)
        if len(pool) < n_per_class:
            raise ValueError(
                f"class {c} has {len(pool)} examples, need {n_per_class}"
            )
        perm = substream(seed, SPLIT, c).permutation(pool)
        labeled.append(perm[:n_per_class])
    labeled_idx = np.sort(np.concatenate(labeled))
    if include_labeled_in_unlabeled:
        unlabeled_idx = np.arange(len(ds))
    else:
        unlabeled_idx = np.setdiff1d(np.arange(len(ds)), labeled_idx)
    return SslSplit(labeled_idx, unlabeled_idx, seed, n_per_class)


def save_split_manifest(path, split: SslSplit) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(
            {
                "seed": split.seed,
                "n_per_class": split.n_per_class,
                "labeled_indices": split.labeled.tolist(),
            },
            fh,
            indent=2,
        )


def _index_stream(pool: np.ndarray, seed: int, purpose: int):
    epoch = 0
    while True:
        perm = substream(seed, purpose, epoch).permutation(pool)
        yield from perm
        epoch += 1


def sample_batches(split: SslSplit, batch_size: int, mu: int, seed: int):
    """Endless stream of (labeled indices B, unlabeled indices mu*B).

    Each pool is walked in a fresh shuffled order per epoch; pools smaller
    than a batch simply reshuffle mid-batch.
    """
    if batch_size < 1 or mu < 1:
        raise ValueError("batch_size and mu must be >= 1")
    if len(split.labeled) == 0 or len(split.unlabeled) == 0:
        raise ValueError("labeled and unlabeled pools must be non-empty")
    lab = _index_stream(split.labeled, seed, BATCH_LABELED)
    unl = _index_stream(split.unlabeled, seed, BATCH_UNLABELED)
    while True:
        yield (
            np.array([next(lab) for _ in range(batch_size)]),
            np.array([next(unl) for _ in range(mu * batch_size)]),
        )


def sample_labeled_batches(split: SslSplit, batch_size: int, seed: int):
    """Labeled-only stream; draws match ``sample_batches`` exactly."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if len(split.labeled) == 0:
        raise ValueError("labeled pool must be non-empty")
    lab = _index_stream(split.labeled, seed, BATCH_LABELED)
    while True:
        yield np.array([next(lab) for _ in range(batch_size)])


# ---------------------------------------------------------------------------
# Synthetic datasets
# ---------------------------------------------------------------------------

SYNTH_KINDS = ("gaussian_blobs", "striped_patterns")


def make_synthetic(
    kind: str,
    classes: int,
    per_class: int,
    height: int = 28,
    width: int = 28,
    noise: float = 0.1,
    seed: int = 0,
    jitter: int | None = None,
) -> Dataset:
    """Class-separable raster images with additive Gaussian pixel noise.

    Both families are invariant to horizontal mirroring, so the weak
    augmentation's flip is label-preserving. ``gaussian_blobs``: one bright
    bump per image whose base height is class-specific (centers stacked on
    the vertical mid-line), jittered a few pixels per sample.
    ``striped_patterns``: horizontal sinusoidal gratings with
    class-specific spatial frequency and random phase.
    """
    if kind not in SYNTH_KINDS:
        raise ValueError(f"kind must be one of {SYNTH_KINDS}")
    if classes < 1 or per_class < 1:
        raise ValueError("classes and per_class must be >= 1")
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    sigma = 0.08 * min(height, width)
    if jitter is None:
        jitter = max(1, round(0.08 * min(height, width)))

    images = np.empty((classes * per_class, 1, height, width))
    labels = np.empty(classes * per_class, dtype=np.int64)
    i = 0
    for c in range(classes):
        for j in range(per_class):
            gen = substream(seed, SYNTH, c, j)
            if kind == "gaussian_blobs":
                # Class is coded by the bump's row band; the x position is
                # free nuisance variation (wide jitter, no class overlap).
                y_jitter = max(1, round(0.12 * height / classes))
                cy = (c + 0.5) * height / classes + gen.integers(
                    -y_jitter, y_jitter + 1
                )
                cx = (width - 1) / 2.0 + gen.integers(-jitter, jitter + 1)
                amp = gen.uniform(0.7, 1.0)
                img = amp * np.exp(
                    -((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * sigma**2)
                )
            else:
                freq = 1.5 * (c + 1)
                phase = gen.uniform(0.0, 2.0 * np.pi)
                img = 0.5 + 0.45 * np.sin(
                    2.0 * np.pi * freq * yy / height + phase
                )
            if noise > 0:
                img = img + noise * gen.standard_normal(img.shape)
            images[i, 0] = np.clip(img, 0.0, 1.0)
            labels[i] = c
            i += 1
    return Dataset(images, labels, classes)
