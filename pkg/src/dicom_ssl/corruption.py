"""Grouped patch masking: connected blocks of tokens are zeroed in pixel space."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .data import ImageBatch


@dataclass(frozen=True)
class MaskPair:
    """Corrupted batch plus the aligned token mask ``T`` and pixel mask ``M``.

    ``token_mask`` has shape N x n and ``pixel_mask`` N x H x W; both are
    uint8 with 1 marking a manipulated location.
    """

    token_mask: np.ndarray
    pixel_mask: np.ndarray
    corrupted: ImageBatch


def target_count(ratio: float, n: int) -> int:
    # tolerance guards against 0.7 * 10 == 7.000000000000001
    return min(n, max(0, math.ceil(ratio * n - 1e-9)))


def sample_group_mask(grid, ratio, rng, mean_block_side=3.0):
    """Sample a token mask of connected rectangular groups.

    Blocks are seeded at uniformly chosen unmasked patches, with geometric
    side lengths of mean ``mean_block_side``, until ``ceil(ratio * n)``
    tokens are covered; the last block's overshoot is trimmed uniformly.
    Returns a uint8 vector of length ``grid[0] * grid[1]`` in row-major order.
    """
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"mask ratio must lie in [0, 1], got {ratio}")
    if mean_block_side < 1.0:
        raise ValueError(f"mean block side must be >= 1, got {mean_block_side}")
    gh, gw = int(grid[0]), int(grid[1])
    n = gh * gw
    uniforms = rng.random(6 * n)
    return kernels.group_mask(gh, gw, target_count(ratio, n), float(mean_block_side),
                              uniforms)


def sample_batch_masks(n_images, grid, ratio, rng, mean_block_side=3.0):
    return np.stack([sample_group_mask(grid, ratio, rng, mean_block_side)
                     for _ in range(n_images)])


def token_to_pixel_mask(token_mask, image_shape, patch_size):
    """Dilate a token mask (n or N x n) to pixel resolution by patch geometry."""
    h, w = image_shape
    gh, gw = h // patch_size, w // patch_size
    t = np.asarray(token_mask)
    squeeze = t.ndim == 1
    t = t.reshape(-1, gh, gw)
    m = np.repeat(np.repeat(t, patch_size, axis=1), patch_size, axis=2).astype(np.uint8)
    return m[0] if squeeze else m


def apply_mask(batch: ImageBatch, token_mask, patch_size: int) -> MaskPair:
    """Zero the patches flagged in ``token_mask`` (shape n or N x n)."""
    n_img, h, w = batch.images.shape
    if h % patch_size or w % patch_size:
        raise ValueError(f"image {h}x{w} not divisible by patch size {patch_size}")
    n = (h // patch_size) * (w // patch_size)
    t = np.asarray(token_mask, dtype=np.uint8)
    if t.ndim == 1:
        t = np.broadcast_to(t, (n_img, t.shape[0]))
    if t.shape != (n_img, n):
        raise ValueError(f"token mask shape {t.shape} does not match ({n_img}, {n})")
    m = token_to_pixel_mask(t, (h, w), patch_size)
    corrupted = np.where(m == 1, np.float32(0.0), batch.images).astype(batch.images.dtype)
    return MaskPair(np.ascontiguousarray(t), m,
                    ImageBatch(corrupted, batch.labels.copy(), list(batch.ids)))
