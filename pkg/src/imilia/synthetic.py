"""Synthetic stand-ins for the external artifacts: cell predictions, patch embeddings, slide images.

The generators plant a known relationship so downstream stages have something
to find: signal ("inflamed") tiles carry little epithelium and many immune
cells, background tiles the reverse. Patch embeddings encode the epithelium
fraction of their patch along a fixed direction.
"""

from __future__ import annotations

import math
from pathlib import Path
from typing import Sequence

import numpy as np

from .episeg import EPISEG_TILE, PATCH, pool_mask, write_mask, write_patch_grid
from .ingest import SlideRecord, SynthTruth, read_tile_manifest
from .interpret import CellInstance, write_cells

# Poisson means per tile: (background, signal)
CELL_RATES = {
    "epithelial": (18.0, 4.0),
    "cancer": (1.0, 1.0),
    "lymphocyte": (4.0, 22.0),
    "plasmocyte": (3.0, 10.0),
    "eosinophil": (0.5, 3.0),
    "neutrophil": (0.3, 4.0),
    "endothelial": (2.0, 4.0),
    "fibroblast": (5.0, 3.0),
}
EPI_FRAC = {False: (0.3, 0.7), True: (0.0, 0.25)}
PATCH_SIGNAL = 3.0


def _epithelium_block(frac: float, n: int, rng: np.random.Generator) -> np.ndarray:
    """n x n patch labels with a horizontal band covering ~frac of the rows."""
    k = int(round(frac * n))
    block = np.zeros((n, n))
    if k:
        start = int(rng.integers(0, n - k + 1))
        block[start:start + k] = 1.0
    return block


def _hexagon(cx: float, cy: float, radius: float) -> tuple[tuple[float, float], ...]:
    return tuple((cx + radius * math.cos(a), cy + radius * math.sin(a)) for a in np.linspace(0, 2 * math.pi, 7)[:-1])


def synth_interpretability(records: Sequence[SlideRecord], truth: SynthTruth, out_dir: str | Path, seed: int = 0,
                           d_patch: int = 8, tile_px: int = 224) -> dict[str, Path]:
    """Write ``cells/<slide>.jsonl`` and slide-level ``patches/<slide>`` grids for every slide."""
    out_dir = Path(out_dir)
    rng = np.random.default_rng([seed, 7])
    direction = rng.standard_normal(d_patch)
    direction /= np.linalg.norm(direction)
    n = tile_px // PATCH
    for rec in records:
        tiles = read_tile_manifest(rec.tile_manifest_path)
        signal = set(truth.signal_tiles.get(rec.slide_id, []))
        gh = max(y for _, y, _, _ in tiles.values()) // tile_px + 1
        gw = max(x for x, _, _, _ in tiles.values()) // tile_px + 1
        labels = np.zeros((gh * n, gw * n))
        cells = []
        for tid, (x, y, _, _) in tiles.items():
            is_sig = tid in signal
            lo, hi = EPI_FRAC[is_sig]
            block = _epithelium_block(rng.uniform(lo, hi), n, rng)
            labels[y // PATCH:y // PATCH + n, x // PATCH:x // PATCH + n] = block
            epi_px = np.repeat(np.repeat(block, PATCH, 0), PATCH, 1)
            epi_rows = np.flatnonzero(epi_px[:, 0])
            k = 0
            for cls, rates in CELL_RATES.items():
                for _ in range(rng.poisson(rates[int(is_sig)])):
                    cx = float(rng.uniform(4, tile_px - 4))
                    if cls in ("epithelial", "cancer") and epi_rows.size:
                        cy = float(rng.choice(epi_rows) + rng.uniform(0, 1))
                    else:
                        cy = float(rng.uniform(4, tile_px - 4))
                    cy = min(max(cy, 4.0), tile_px - 4.0)
                    cells.append(CellInstance(f"{tid}_{k}", cls, (cx, cy), _hexagon(cx, cy, 3.0), tid))
                    k += 1
        grid = labels[..., None] * PATCH_SIGNAL * direction + rng.standard_normal((gh * n, gw * n, d_patch))
        write_patch_grid(grid, out_dir / "patches" / rec.slide_id, mpp=rec.mpp_x)
        write_cells(cells, out_dir / "cells" / f"{rec.slide_id}.jsonl")
    np.save(out_dir / "patch_direction.npy", direction)
    return {"cells": out_dir / "cells", "patches": out_dir / "patches"}


def synth_episeg_pairs(out_dir: str | Path, n_images: int = 6, d_patch: int = 8, seed: int = 0,
                       size_px: int = EPISEG_TILE, direction: np.ndarray | None = None) -> Path:
    """Training pairs for EpiSeg: per image a pixel mask and a patch-embedding grid.

    Masks are unions of random rectangles at pixel resolution, so pooled
    labels are genuinely fractional at rectangle borders. Embeddings are
    ``soft_label * signal * direction + noise``.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng([seed, 11])
    if direction is None:
        direction = rng.standard_normal(d_patch)
    direction = direction / np.linalg.norm(direction)
    for i in range(n_images):
        mask = np.zeros((size_px, size_px), dtype=np.uint8)
        for _ in range(int(rng.integers(2, 6))):
            x0, y0 = rng.integers(0, size_px - 100, size=2)
            w, h = rng.integers(60, 400, size=2)
            mask[y0:y0 + h, x0:x0 + w] = 1
        y = pool_mask(mask, PATCH)
        grid = y[..., None] * PATCH_SIGNAL * direction + rng.standard_normal((*y.shape, direction.size))
        write_patch_grid(grid, out_dir / f"img{i:03d}")
        write_mask(out_dir / f"img{i:03d}_mask.pgm", mask)
    return out_dir


def synth_he_image(size: int = 448, blob_frac: float = 0.4, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """(RGB uint8 image, true tissue mask): a pink elliptical blob with texture on a white background."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[:size, :size]
    a = math.sqrt(blob_frac * size * size / math.pi)
    blob = ((xx - size / 2) ** 2 + (yy - size / 2) ** 2) <= a * a
    img = np.full((size, size, 3), 245, dtype=np.float64)
    img += rng.normal(0, 3, img.shape)
    pink = np.array([214.0, 120.0, 170.0])
    purple = np.array([120.0, 70.0, 160.0])
    mix = rng.uniform(0, 1, (size, size, 1)) ** 3
    tissue = pink * (1 - mix) + purple * mix + rng.normal(0, 8, img.shape)
    img[blob] = tissue[blob]
    return np.clip(img, 0, 255).astype(np.uint8), blob

