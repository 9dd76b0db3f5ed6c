"""Weak and strong augmentations for small raster images.

Images are (C, H, W) float arrays in [0, 1] and stay clamped to that range
after every transform. The weak policy is pad-4 random crop plus a coin-flip
horizontal mirror; the strong policy samples transforms from a RandAugment
pool followed by cutout. Geometric transforms use nearest-neighbor
resampling with zero fill, which keeps tiny images crisp and results
bit-reproducible. All randomness comes from the generator handed in, so a
fixed substream gives identical output across runs and thread schedules.
"""

from __future__ import annotations

import numpy as np
from scipy import ndimage


def _clamp(img: np.ndarray) -> np.ndarray:
    return np.clip(img, 0.0, 1.0)


def _check_image(img) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3:
        raise ValueError(f"image must be (C, H, W), got shape {img.shape}")
    if img.shape[1] < 2 or img.shape[2] < 2:
        raise ValueError("image smaller than 2x2")
    return img


# ---------------------------------------------------------------------------
# Weak policy
# ---------------------------------------------------------------------------


def hflip(img: np.ndarray) -> np.ndarray:
    return img[:, :, ::-1].copy()


def pad_crop(img: np.ndarray, offset_y: int, offset_x: int, padding: int = 4) -> np.ndarray:
    """Zero-pad by ``padding`` then crop back to the original size at the
    given offset; offset ``(padding, padding)`` is the identity."""
    c, h, w = img.shape
    padded = np.pad(img, ((0, 0), (padding, padding), (padding, padding)))
    return padded[:, offset_y : offset_y + h, offset_x : offset_x + w].copy()


def weak_augment(img, rng: np.random.Generator, padding: int = 4) -> np.ndarray:
    """Random pad-and-crop plus horizontal flip with probability 0.5."""
    img = _check_image(img)
    oy = int(rng.integers(0, 2 * padding + 1))
    ox = int(rng.integers(0, 2 * padding + 1))
    out = pad_crop(img, oy, ox, padding)
    if rng.random() < 0.5:
        out = hflip(out)
    return _clamp(out)


# ---------------------------------------------------------------------------
# Strong policy: RandAugment pool
# ---------------------------------------------------------------------------


def _affine(img: np.ndarray, matrix: np.ndarray, offset: np.ndarray) -> np.ndarray:
    out = np.empty_like(img)
    for ch in range(img.shape[0]):
        out[ch] = ndimage.affine_transform(
            img[ch], matrix, offset=offset, order=0, cval=0.0, prefilter=False
        )
    return out


def _signed(rng: np.random.Generator, value: float) -> float:
    return value if rng.random() < 0.5 else -value


def _rotate(img, m, rng):
    angle = np.deg2rad(_signed(rng, 30.0 * m))
    c = (np.array(img.shape[1:]) - 1) / 2.0
    rot = np.array([[np.cos(angle), -np.sin(angle)], [np.sin(angle), np.cos(angle)]])
    return _affine(img, rot, c - rot @ c)


def _translate_x(img, m, rng):
    d = _signed(rng, m * 0.3 * img.shape[2])
    return _affine(img, np.eye(2), np.array([0.0, -d]))


def _translate_y(img, m, rng):
    d = _signed(rng, m * 0.3 * img.shape[1])
    return _affine(img, np.eye(2), np.array([-d, 0.0]))


def _shear_x(img, m, rng):
    s = _signed(rng, 0.3 * m)
    cy = (img.shape[1] - 1) / 2.0
    return _affine(img, np.array([[1.0, 0.0], [-s, 1.0]]), np.array([0.0, s * cy]))


def _shear_y(img, m, rng):
    s = _signed(rng, 0.3 * m)
    cx = (img.shape[2] - 1) / 2.0
    return _affine(img, np.array([[1.0, -s], [0.0, 1.0]]), np.array([s * cx, 0.0]))


def _contrast(img, m, rng):
    f = 1.0 + _signed(rng, 0.9 * m)
    mean = img.mean()
    return mean + f * (img - mean)


def _brightness(img, m, rng):
    return (1.0 + _signed(rng, 0.9 * m)) * img


def _sharpness(img, m, rng):
    f = 1.0 + _signed(rng, 0.9 * m)
    blur = np.stack(
        [ndimage.uniform_filter(ch, size=3, mode="nearest") for ch in img]
    )
    return blur + f * (img - blur)


def _posterize(img, m, rng):
    bits = 8 - int(round(4 * m))
    levels = np.floor(img * 255.0).astype(np.int64)
    mask = ~((1 << (8 - bits)) - 1)
    return (levels & mask) / 255.0


def _solarize(img, m, rng):
    threshold = 1.0 - m
    return np.where(img >= threshold, 1.0 - img, img)


def _invert(img, m, rng):
    return 1.0 - img


def _autocontrast(img, m, rng):
    out = img.copy()
    for ch in range(img.shape[0]):
        lo, hi = out[ch].min(), out[ch].max()
        if hi > lo:
            out[ch] = (out[ch] - lo) / (hi - lo)
    return out


def _equalize(img, m, rng):
    out = img.copy()
    for ch in range(img.shape[0]):
        bytes_ = np.floor(out[ch] * 255.0).astype(np.int64)
        hist = np.bincount(bytes_.ravel(), minlength=256)
        cdf = np.cumsum(hist)
        nonzero = cdf[cdf > 0]
        if nonzero.size == 0 or nonzero[0] == cdf[-1]:
            continue
        lut = np.round((cdf - nonzero[0]) / (cdf[-1] - nonzero[0]) * 255.0)
        out[ch] = lut[bytes_] / 255.0
    return out


TRANSFORM_POOL = (
    ("rotate", _rotate),
    ("translate_x", _translate_x),
    ("translate_y", _translate_y),
    ("shear_x", _shear_x),
    ("shear_y", _shear_y),
    ("contrast", _contrast),
    ("brightness", _brightness),
    ("sharpness", _sharpness),
    ("posterize", _posterize),
    ("solarize", _solarize),
    ("invert", _invert),
    ("autocontrast", _autocontrast),
    ("equalize", _equalize),
)


def cutout(img: np.ndarray, size: int, rng: np.random.Generator) -> np.ndarray:
    """Zero a ``size`` x ``size`` square at a random center (border-clipped)."""
    if size < 1:
        return img
    c, h, w = img.shape
    cy = int(rng.integers(0, h))
    cx = int(rng.integers(0, w))
    y0, y1 = max(0, cy - size // 2), min(h, cy - size // 2 + size)
    x0, x1 = max(0, cx - size // 2), min(w, cx - size // 2 + size)
    out = img.copy()
    out[:, y0:y1, x0:x1] = 0.0
    return out


def strong_augment(
    img, n: int, magnitude: float, rng: np.random.Generator
) -> np.ndarray:
    """Apply ``n`` pool transforms (uniform with replacement) then cutout."""
    img = _check_image(img)
    if n < 1:
        raise ValueError("n must be >= 1")
    if not 0.0 <= magnitude <= 1.0:
        raise ValueError("magnitude must lie in [0, 1]")
    out = img
    for _ in range(n):
        idx = int(rng.integers(0, len(TRANSFORM_POOL)))
        out = _clamp(TRANSFORM_POOL[idx][1](out, magnitude, rng))
    side = max(1, int(round(0.5 * magnitude * min(img.shape[1], img.shape[2]))))
    return _clamp(cutout(out, side, rng))
