"""Patch-grid bookkeeping: random masks, (un)patchify, mask upsampling, patch normalization.

Masks use ``True`` for masked (non-visible) patches. Functions accept numpy
arrays or torch tensors with optional leading batch dimensions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from einops import rearrange, repeat

from .errors import InvalidArgument

VAR_FLOOR = 1e-6


@dataclass(frozen=True)
class PatchGrid:
    image_size: int
    patch_size: int

    def __post_init__(self):
        if self.patch_size <= 0 or self.image_size <= 0 or self.image_size % self.patch_size:
            raise InvalidArgument(f"patch size {self.patch_size} does not divide image size {self.image_size}")

    @property
    def grid_side(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid_side**2


def num_masked(grid: PatchGrid, ratio: float) -> int:
    if not 0.0 < ratio < 1.0:
        raise InvalidArgument(f"masking ratio must lie in (0, 1), got {ratio}")
    return int(math.floor(ratio * grid.num_patches))


def sample_mask(grid: PatchGrid, ratio: float, rng: np.random.Generator) -> np.ndarray:
    """Uniformly random boolean mask with exactly ``floor(ratio * N)`` masked patches."""
    k = num_masked(grid, ratio)
    mask = np.zeros(grid.num_patches, dtype=bool)
    mask[rng.permutation(grid.num_patches)[:k]] = True
    return mask


def sample_masks(grid: PatchGrid, ratio: float, batch: int, generator: torch.Generator | None = None) -> torch.Tensor:
    """Batched torch version of :func:`sample_mask`, shape (batch, N)."""
    k = num_masked(grid, ratio)
    order = torch.rand(batch, grid.num_patches, generator=generator).argsort(dim=1)
    mask = torch.zeros(batch, grid.num_patches, dtype=torch.bool)
    mask.scatter_(1, order[:, :k], True)
    return mask


def _check_spatial(x, grid: PatchGrid):
    if x.shape[-1] != grid.image_size or x.shape[-2] != grid.image_size:
        raise InvalidArgument(f"raster spatial shape {tuple(x.shape[-2:])} does not match image size {grid.image_size}")


def patchify(x, grid: PatchGrid):
    """(..., C, H, W) -> (..., N, C*p*p), patches in row-major grid order."""
    _check_spatial(x, grid)
    p = grid.patch_size
    return rearrange(x, "... c (gh p1) (gw p2) -> ... (gh gw) (c p1 p2)", p1=p, p2=p)


def unpatchify(patches, grid: PatchGrid, channels: int | None = None):
    """Inverse of :func:`patchify`."""
    p, g = grid.patch_size, grid.grid_side
    if patches.shape[-2] != grid.num_patches:
        raise InvalidArgument(f"expected {grid.num_patches} patches, got {patches.shape[-2]}")
    if channels is None:
        channels = patches.shape[-1] // (p * p)
    if channels * p * p != patches.shape[-1]:
        raise InvalidArgument(f"patch vector length {patches.shape[-1]} is not channels*{p}*{p}")
    return rearrange(patches, "... (gh gw) (c p1 p2) -> ... c (gh p1) (gw p2)", gh=g, gw=g, p1=p, p2=p, c=channels)


def mask_to_grid(mask, grid: PatchGrid):
    """(..., N) -> (..., g, g)."""
    if mask.shape[-1] != grid.num_patches:
        raise InvalidArgument(f"mask length {mask.shape[-1]} != {grid.num_patches}")
    return rearrange(mask, "... (gh gw) -> ... gh gw", gh=grid.grid_side)


def upsample_mask(mask, grid: PatchGrid, resolution: int):
    """Replicate each patch's flag over a (resolution/g)^2 block."""
    g = grid.grid_side
    if resolution % g:
        raise InvalidArgument(f"resolution {resolution} not a multiple of grid side {g}")
    f = resolution // g
    return repeat(mask_to_grid(mask, grid), "... gh gw -> ... (gh f1) (gw f2)", f1=f, f2=f)


def upsample_mask_to_pixels(mask, grid: PatchGrid):
    return upsample_mask(mask, grid, grid.image_size)


def patch_normalize(x, grid: PatchGrid, valid=None, eps: float = VAR_FLOOR):
    """Standardize each patch of each channel to zero mean, unit variance.

    ``valid`` (..., H, W) excludes missing pixels from the patch moments;
    they are returned as 0. Variance is floored at ``eps``.
    """
    is_np = isinstance(x, np.ndarray)
    t = torch.as_tensor(x, dtype=torch.float64 if is_np else None)
    p = grid.patch_size
    _check_spatial(t, grid)
    blocks = rearrange(t, "... c (gh p1) (gw p2) -> ... c gh gw (p1 p2)", p1=p, p2=p)
    if valid is None:
        w = torch.ones_like(blocks)
    else:
        v = torch.as_tensor(valid).to(blocks.dtype)
        w = rearrange(v, "... (gh p1) (gw p2) -> ... gh gw (p1 p2)", p1=p, p2=p).unsqueeze(-4).expand_as(blocks)
    n = w.sum(-1, keepdim=True).clamp_min(1.0)
    mean = (blocks * w).sum(-1, keepdim=True) / n
    var = (((blocks - mean) * w) ** 2).sum(-1, keepdim=True) / n
    out = (blocks - mean) / torch.sqrt(var.clamp_min(eps)) * w
    out = rearrange(out, "... c gh gw (p1 p2) -> ... c (gh p1) (gw p2)", p1=p, p2=p)
    if is_np:
        return out.numpy().astype(x.dtype if x.dtype.kind == "f" else np.float64)
    return out


def pack_mask(mask) -> bytes:
    return np.packbits(np.asarray(mask, dtype=bool).ravel()).tobytes()


def unpack_mask(data: bytes, shape: tuple[int, ...]) -> np.ndarray:
    n = int(np.prod(shape))
    return np.unpackbits(np.frombuffer(data, dtype=np.uint8))[:n].astype(bool).reshape(shape)
