"""Structured token augmentation: Gaussian jitter on low-variance patches.

Works on raw patch pixels (scaled to [0, 1]) before the linear projection.
A patch ``x_i`` is perturbed as ``x_i + alpha * M_i * eps_i`` where
``M_i = 1`` iff its population variance is strictly below ``tau`` and
``eps_i`` holds i.i.d. ``N(0, sigma**2)`` draws, one per pixel element.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EmptyPatch, ShapeMismatch
from .tensor import RngStream, Tensor, gaussian


@dataclass(frozen=True)
class STAConfig:
    alpha: float = 0.1
    tau: float = 0.1
    sigma: float = 0.1
    train_only: bool = True

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")
        if self.sigma < 0:
            raise ValueError(f"sigma must be >= 0, got {self.sigma}")


@dataclass
class PatchGrid:
    """Flattened patches of one image, ``patches[N, P]`` with N = grid_h * grid_w."""

    patches: Tensor
    grid_h: int
    grid_w: int

    def __post_init__(self):
        if self.patches.ndim != 2 or self.patches.shape[0] != self.grid_h * self.grid_w:
            raise ShapeMismatch(
                f"patches {self.patches.shape} do not fit a {self.grid_h}x{self.grid_w} grid"
            )

    @property
    def num_patches(self) -> int:
        return self.patches.shape[0]


def patch_variance(grid: PatchGrid) -> Tensor:
    """Population variance of each patch over all its pixels and channels."""
    x = grid.patches.data
    if x.shape[-1] < 1:
        raise EmptyPatch("patches have no pixels")
    centered = x - x.mean(axis=-1, keepdims=True)
    return Tensor._wrap((centered * centered).mean(axis=-1))


def sta_mask(variances: Tensor, tau: float) -> Tensor:
    return Tensor._wrap((variances.data < tau).astype(np.float64))


def sta_augment(grid: PatchGrid, cfg: STAConfig, rng: RngStream, training: bool) -> PatchGrid:
    """Perturb the low-variance patches of ``grid``.

    Noise for the whole ``[N, P]`` grid is drawn from ``rng`` in one call
    (whether or not a patch is masked), so a copy of the stream taken beforehand
    replays it exactly. Perturbed values are clipped to [0, 1]; unmasked patches
    are returned bit-for-bit.
    """
    if (cfg.train_only and not training) or cfg.alpha == 0:
        return grid
    x = grid.patches.data
    mask = sta_mask(patch_variance(grid), cfg.tau).data.astype(bool)
    eps = gaussian(rng, x.shape, cfg.sigma).data
    if not mask.any():
        return grid
    out = x.copy()
    out[mask] = np.clip(x[mask] + cfg.alpha * eps[mask], 0.0, 1.0)
    return PatchGrid(Tensor._wrap(out), grid.grid_h, grid.grid_w)
