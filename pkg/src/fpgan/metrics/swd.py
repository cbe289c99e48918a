"""Sliced Wasserstein distance over Laplacian-pyramid patch descriptors.

7x7 patches are drawn at shared random locations from each pyramid level,
standardized per channel within each set, projected onto random unit
directions, and matched by sorting; the per-level distances are averaged.
Patch coordinates are re-seeded identically for both sets so identical
image sets give exactly zero.
"""

from __future__ import annotations

import numpy as np
import scipy.ndimage

from .frechet import MetricError

_GAUSS_5x5 = (
    np.float64(
        [
            [1, 4, 6, 4, 1],
            [4, 16, 24, 16, 4],
            [6, 24, 36, 24, 6],
            [4, 16, 24, 16, 4],
            [1, 4, 6, 4, 1],
        ]
    )
    / 256.0
)


def _pyr_down(batch):
    smoothed = scipy.ndimage.convolve(
        batch, _GAUSS_5x5[np.newaxis, np.newaxis, :, :], mode="mirror"
    )
    return smoothed[:, :, ::2, ::2]


def _pyr_up(batch):
    n, c, h, w = batch.shape
    res = np.zeros((n, c, h * 2, w * 2), batch.dtype)
    res[:, :, ::2, ::2] = batch
    return scipy.ndimage.convolve(
        res, _GAUSS_5x5[np.newaxis, np.newaxis, :, :] * 4.0, mode="mirror"
    )


def laplacian_pyramid(batch: np.ndarray, n_levels: int) -> list[np.ndarray]:
    """Detail levels from fine to coarse; the last entry is the low-pass."""
    pyramid = [np.asarray(batch, dtype=np.float64)]
    for _ in range(1, n_levels):
        pyramid.append(_pyr_down(pyramid[-1]))
        pyramid[-2] = pyramid[-2] - _pyr_up(pyramid[-1])
    return pyramid


def _patch_descriptors(level, coords, patch_size):
    n, c, h, w = level.shape
    half = patch_size // 2
    out = np.empty((coords.shape[0], c, patch_size, patch_size), np.float64)
    for i, (img, y, x) in enumerate(coords):
        out[i] = level[img, :, y - half : y + half + 1, x - half : x + half + 1]
    return out


def _sample_coords(n_images, height, width, per_image, patch_size, rng):
    half = patch_size // 2
    total = n_images * per_image
    img = np.repeat(np.arange(n_images), per_image)
    y = rng.integers(half, height - half, size=total)
    x = rng.integers(half, width - half, size=total)
    return np.stack([img, y, x], axis=1)


def _normalize(desc):
    desc = desc - desc.mean(axis=(0, 2, 3), keepdims=True)
    desc = desc / (desc.std(axis=(0, 2, 3), keepdims=True) + 1e-12)
    return desc.reshape(desc.shape[0], -1)


def _sliced_wasserstein(a, b, n_projections, rng, dirs_per_repeat=128):
    repeats = max(n_projections // dirs_per_repeat, 1)
    results = []
    for _ in range(repeats):
        dirs = rng.standard_normal((a.shape[1], dirs_per_repeat))
        dirs /= np.sqrt((dirs**2).sum(axis=0, keepdims=True))
        proj_a = np.sort(a @ dirs, axis=0)
        proj_b = np.sort(b @ dirs, axis=0)
        results.append(np.abs(proj_a - proj_b).mean())
    return float(np.mean(results))


def swd_levels(
    real_images: np.ndarray,
    fake_images: np.ndarray,
    patches_per_image: int = 128,
    patch_size: int = 7,
    n_projections: int = 512,
    min_resolution: int = 16,
    seed: int = 0,
) -> dict[int, float]:
    """Per-level sliced Wasserstein distances keyed by level resolution."""
    real = np.asarray(real_images, dtype=np.float64)
    fake = np.asarray(fake_images, dtype=np.float64)
    if real.shape != fake.shape:
        raise MetricError(f"image sets differ in shape: {real.shape} vs {fake.shape}")
    if real.ndim != 4:
        raise MetricError(f"expected (N, C, H, W) images, got shape {real.shape}")
    resolution = real.shape[-1]
    if resolution < min_resolution:
        raise MetricError(
            f"images of size {resolution} are below min_resolution={min_resolution}"
        )
    n_levels = int(np.log2(resolution / min_resolution)) + 1
    pyr_real = laplacian_pyramid(real, n_levels)
    pyr_fake = laplacian_pyramid(fake, n_levels)
    out = {}
    for lvl, (lr, lf) in enumerate(zip(pyr_real, pyr_fake)):
        res = lr.shape[-1]
        coord_rng = np.random.default_rng((seed, lvl, 0))
        coords = _sample_coords(
            lr.shape[0], lr.shape[2], lr.shape[3], patches_per_image, patch_size,
            coord_rng,
        )
        desc_r = _normalize(_patch_descriptors(lr, coords, patch_size))
        desc_f = _normalize(_patch_descriptors(lf, coords, patch_size))
        proj_rng = np.random.default_rng((seed, lvl, 1))
        out[res] = _sliced_wasserstein(desc_r, desc_f, n_projections, proj_rng)
    return out


def swd(real_images, fake_images, **kwargs) -> float:
    """Average of the per-level distances (see ``swd_levels``)."""
    levels = swd_levels(real_images, fake_images, **kwargs)
    return float(np.mean(list(levels.values())))
