"""Tissue detection and non-overlapping tiling.

The tissue mask is a classical stand-in for a learned segmenter: Otsu
threshold on the HSV saturation channel, optionally at a downsampled level,
followed by removal of small connected components.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from skimage.color import rgb2hsv
from skimage.filters import threshold_otsu
from skimage.morphology import remove_small_objects

from .ingest import write_tile_manifest

log = logging.getLogger(__name__)

DEFAULT_TILE = 224
DEFAULT_MIN_TISSUE = 0.5
DEFAULT_MPP = 0.5
# saturation below this is background whatever Otsu says (white glass, grey dust)
MIN_SATURATION = 0.05


@dataclass
class TileGrid:
    tile_size_px: int
    mpp: float
    tiles: list[tuple[str, int, int]] = field(default_factory=list)

    def __len__(self):
        return len(self.tiles)

    def write(self, path: str | Path) -> Path:
        return write_tile_manifest(self.tiles, self.tile_size_px, self.mpp, path)


def tissue_mask(image: np.ndarray, downsample: int = 1, min_object_px: int = 64) -> np.ndarray:
    """Boolean tissue mask at ``1/downsample`` of the image resolution."""
    image = np.asarray(image)
    if image.size == 0:
        raise ValueError("empty image")
    if image.ndim != 3 or image.shape[2] < 3:
        raise ValueError(f"expected an RGB raster, got shape {image.shape}")
    rgb = image[::downsample, ::downsample, :3]
    sat = rgb2hsv(rgb)[..., 1]
    if np.ptp(sat) == 0:
        warnings.warn("degenerate image (uniform saturation); returning an empty tissue mask", stacklevel=2)
        return np.zeros(sat.shape, dtype=bool)
    mask = sat > max(threshold_otsu(sat), MIN_SATURATION)
    if min_object_px > 0:
        mask = remove_small_objects(mask, min_size=min_object_px)
    return mask


def tessellate(mask: np.ndarray, tile_size_px: int = DEFAULT_TILE, min_tissue_frac: float = DEFAULT_MIN_TISSUE,
               mpp: float = DEFAULT_MPP, downsample: int = 1) -> TileGrid:
    """Grid-aligned tiles whose tissue fraction is at least ``min_tissue_frac``, row-major.

    Tiles without any tissue are never emitted, even at ``min_tissue_frac=0``.

    ``mask`` may be at 1/downsample of the slide resolution; tile coordinates
    are always reported in full-resolution pixels.
    """
    if not 0.0 <= min_tissue_frac <= 1.0:
        raise ValueError("min_tissue_frac must lie in [0, 1]")
    if tile_size_px % downsample:
        raise ValueError("tile size must be a multiple of the mask downsample factor")
    step = tile_size_px // downsample
    mask = np.asarray(mask, dtype=bool)
    rows, cols = mask.shape[0] // step, mask.shape[1] // step
    frac = mask[:rows * step, :cols * step].reshape(rows, step, cols, step).mean(axis=(1, 3))
    grid = TileGrid(tile_size_px, mpp)
    for i in range(rows):
        for j in range(cols):
            if frac[i, j] >= min_tissue_frac and frac[i, j] > 0:
                grid.tiles.append((f"r{i:04d}_c{j:04d}", j * tile_size_px, i * tile_size_px))
    return grid
