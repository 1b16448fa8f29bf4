"""Patch-level epithelium classifier on patch embeddings.

Pixel masks are average-pooled to one soft label per P x P patch, and an
L2-regularized logistic model is fit on (patch embedding, soft label) pairs
with the soft-label cross-entropy

    J(w, b) = mean_i [softplus(z_i) - y_i z_i] + ||w||^2 / (2 C N),   z_i = w.x_i + b

so that C keeps its usual inverse-strength meaning. Inference on an extreme
tile runs on the expanded context grid and crops the window that covers the
tile.
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .ingest import FeatureMatrix, read_features, write_features
from .metrics import average_precision

log = logging.getLogger(__name__)

PATCH = 14
EPISEG_TILE = 1022
MIL_TILE = 224
DEFAULT_C = 1e-2


class EpiSegError(ValueError):
    pass


@dataclass
class EpiSegModel:
    weights: np.ndarray
    bias: float
    C: float = DEFAULT_C

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.C <= 0:
            raise EpiSegError("C must be positive")
        if not (np.isfinite(self.weights).all() and np.isfinite(self.bias)):
            raise EpiSegError("non-finite EpiSeg parameters")

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps({"format": "imilia-episeg", "C": self.C, "bias": self.bias,
                                    "weights": self.weights.tolist()}, indent=1) + "\n")
        return path

    @classmethod
    def load(cls, path: str | Path) -> "EpiSegModel":
        d = json.loads(Path(path).read_text())
        if d.get("format") != "imilia-episeg":
            raise EpiSegError(f"{path} is not an EpiSeg model file")
        return cls(np.array(d["weights"]), float(d["bias"]), float(d["C"]))


def pool_mask(mask: np.ndarray, P: int = PATCH) -> np.ndarray:
    """Per-patch mean of a binary mask; trailing rows/columns past the last full patch are dropped."""
    if P <= 0:
        raise EpiSegError("patch size must be positive")
    mask = np.asarray(mask)
    H, W = mask.shape
    if H < P or W < P:
        raise EpiSegError(f"mask {mask.shape} smaller than one {P}x{P} patch")
    gh, gw = H // P, W // P
    blocks = mask[:gh * P, :gw * P].astype(np.float64).reshape(gh, P, gw, P)
    return blocks.sum(axis=(1, 3)) / (P * P)


# ---------------------------------------------------------------------------
# fitting


def _softplus(z):
    return np.logaddexp(0.0, z)


def _sigmoid(z):
    return np.exp(-np.logaddexp(0.0, -z))


def objective(X: np.ndarray, y: np.ndarray, w: np.ndarray, b: float, C: float) -> float:
    z = X @ w + b
    n = X.shape[0]
    return float(np.mean(_softplus(z) - y * z) + (w @ w) / (2.0 * C * n))


def objective_grad(X: np.ndarray, y: np.ndarray, w: np.ndarray, b: float, C: float) -> tuple[np.ndarray, float]:
    n = X.shape[0]
    r = _sigmoid(X @ w + b) - y
    return X.T @ r / n + w / (C * n), float(r.mean())


def fit(X: np.ndarray, y: np.ndarray, C: float = DEFAULT_C, tol: float = 1e-9, max_iter: int = 200) -> EpiSegModel:
    """Damped Newton iterations until the gradient max-norm drops below ``tol``."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or y.shape != (X.shape[0],):
        raise EpiSegError("fit needs X of shape (N, d) and y of shape (N,)")
    if X.shape[0] < 2 or np.all(y == y[0]):
        raise EpiSegError("fit needs at least two pairs with non-identical labels")
    if not np.isfinite(X).all():
        raise EpiSegError("non-finite patch embeddings")
    if ((y < 0) | (y > 1)).any():
        raise EpiSegError("soft labels must lie in [0, 1]")
    n, d = X.shape
    Xb = np.hstack([X, np.ones((n, 1))])
    theta = np.zeros(d + 1)
    reg = np.full(d + 1, 1.0 / (C * n))
    reg[-1] = 0.0

    def f(t):
        return objective(X, y, t[:-1], t[-1], C)

    val = f(theta)
    for _ in range(max_iter):
        z = Xb @ theta
        s = _sigmoid(z)
        grad = Xb.T @ (s - y) / n + reg * theta
        if np.max(np.abs(grad)) < tol:
            break
        H = (Xb * (s * (1.0 - s))[:, None]).T @ Xb / n + np.diag(reg)
        H[np.diag_indices_from(H)] += 1e-12
        try:
            step = np.linalg.solve(H, grad)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(H, grad, rcond=None)[0]
        t, slope = 1.0, float(grad @ step)
        while True:
            cand = theta - t * step
            cval = f(cand)
            if cval <= val - 1e-4 * t * slope or t < 1e-10:
                break
            t *= 0.5
        if cval > val:
            break
        theta, val = cand, cval
    else:
        log.warning("EpiSeg fit hit the iteration cap (%d)", max_iter)
    return EpiSegModel(theta[:-1].copy(), float(theta[-1]), C)


def select_C(X: np.ndarray, y: np.ndarray, grid: Sequence[float], n_folds: int = 3, seed: int = 0) -> float:
    """Grid value with the best mean out-of-fold AP (labels binarized at 0.5); ties go to the smaller C."""
    if not grid:
        raise EpiSegError("empty C grid")
    if n_folds < 2:
        raise EpiSegError("n_folds must be >= 2")
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    fold = np.empty(len(y), dtype=int)
    fold[np.random.default_rng(seed).permutation(len(y))] = np.arange(len(y)) % n_folds
    best_c, best_ap = None, -np.inf
    for C in sorted(float(c) for c in grid):
        aps = []
        for f in range(n_folds):
            tr, te = fold != f, fold == f
            yb = (y[te] >= 0.5).astype(int)
            if yb.sum() == 0:
                continue
            m = fit(X[tr], y[tr], C)
            aps.append(average_precision(X[te] @ m.weights + m.bias, yb))
        ap = float(np.mean(aps)) if aps else -np.inf
        log.info("C=%g mean out-of-fold AP=%.4f", C, ap)
        if best_c is None or ap > best_ap:
            best_c, best_ap = C, ap
    return best_c


# ---------------------------------------------------------------------------
# inference


def infer_tile(model: EpiSegModel, patch_embeddings: np.ndarray) -> np.ndarray:
    """Pointwise probability map over a (gh, gw, d) patch-embedding grid."""
    E = np.asarray(patch_embeddings, dtype=np.float64)
    if E.ndim != 3 or E.shape[2] != model.weights.size:
        raise EpiSegError(f"expected (gh, gw, {model.weights.size}) embeddings, got {E.shape}")
    return _sigmoid((E * model.weights).sum(axis=-1) + model.bias)


def crop_window(expanded_px: int = EPISEG_TILE, tile_px: int = MIL_TILE, P: int = PATCH) -> tuple[int, int]:
    """(first patch index, patch count) of the window covering the centred tile.

    The tile sits at pixel offset (expanded_px - tile_px) // 2. Among windows
    of tile_px // P patches, the one overlapping the tile most is chosen,
    lowest start on ties (patches 28..43 for the 1022 / 224 / 14 geometry).
    """
    n = tile_px // P
    g = expanded_px // P
    off = (expanded_px - tile_px) // 2

    def overlap(s):
        return max(0, min(off + tile_px, (s + n) * P) - max(off, s * P))

    start = max(range(g - n + 1), key=lambda s: (overlap(s), -s))
    return start, n


def infer_extreme_tile(model: EpiSegModel, expanded: np.ndarray, tile_px: int = MIL_TILE,
                       expanded_px: int = EPISEG_TILE, P: int = PATCH) -> np.ndarray:
    g = expanded_px // P
    if expanded.shape[:2] != (g, g):
        raise EpiSegError(f"expanded grid must be {g}x{g} patches, got {expanded.shape[:2]}")
    start, n = crop_window(expanded_px, tile_px, P)
    return infer_tile(model, expanded[start:start + n, start:start + n])


def _reflect(i: np.ndarray, n: int) -> np.ndarray:
    if n == 1:
        return np.zeros_like(i)
    period = 2 * (n - 1)
    i = np.mod(i, period)
    return np.where(i > n - 1, period - i, i)


def expand_patch_grid(slide_grid: np.ndarray, tile_x_px: int, tile_y_px: int, tile_px: int = MIL_TILE,
                      expanded_px: int = EPISEG_TILE, P: int = PATCH) -> np.ndarray:
    """Expanded (g, g, d) context around a tile, cut from a slide-level patch grid.

    The tile lands on the crop window returned by ``crop_window``. Context
    falling outside the slide is filled by mirroring, with a warning.
    """
    if tile_x_px % P or tile_y_px % P:
        raise EpiSegError("tile origin must be aligned to the patch grid")
    g = expanded_px // P
    start, _ = crop_window(expanded_px, tile_px, P)
    rows = tile_y_px // P - start + np.arange(g)
    cols = tile_x_px // P - start + np.arange(g)
    GH, GW = slide_grid.shape[:2]
    if rows.min() < 0 or cols.min() < 0 or rows.max() >= GH or cols.max() >= GW:
        warnings.warn(f"tile at ({tile_x_px}, {tile_y_px}) is near the slide border; mirroring context", stacklevel=2)
        rows, cols = _reflect(rows, GH), _reflect(cols, GW)
    return slide_grid[np.ix_(rows, cols)]


def expand_tile_region(image: np.ndarray, x: int, y: int, tile_px: int = MIL_TILE,
                       expanded_px: int = EPISEG_TILE) -> np.ndarray:
    """Pixel region of size expanded_px centred on the tile at (x, y), mirrored at slide borders."""
    off = (expanded_px - tile_px) // 2
    H, W = image.shape[:2]
    y0, x0 = y - off, x - off
    y1, x1 = y0 + expanded_px, x0 + expanded_px
    pad = [(max(0, -y0), max(0, y1 - H)), (max(0, -x0), max(0, x1 - W))] + [(0, 0)] * (image.ndim - 2)
    if any(p for pair in pad for p in pair):
        warnings.warn(f"tile at ({x}, {y}) is near the slide border; mirroring context", stacklevel=2)
        image = np.pad(image, pad, mode="reflect")
        y0 += pad[0][0]
        x0 += pad[1][0]
    return image[y0:y0 + expanded_px, x0:x0 + expanded_px]


def binarize(grid: np.ndarray, threshold: float = 0.5, P: int = PATCH) -> np.ndarray:
    """grid >= threshold, upsampled to pixels by P x P block replication."""
    if not 0.0 < threshold < 1.0:
        raise EpiSegError("threshold must lie in (0, 1)")
    hard = (np.asarray(grid) >= threshold).astype(np.uint8)
    return np.repeat(np.repeat(hard, P, axis=0), P, axis=1)


# ---------------------------------------------------------------------------
# containers and PGM I/O


def grid_from_container(fm: FeatureMatrix) -> np.ndarray:
    if fm.grid is None:
        raise EpiSegError("patch-embedding container has no grid shape")
    gh, gw = fm.grid
    if gh * gw != fm.n_tiles:
        raise EpiSegError(f"grid {gh}x{gw} does not match {fm.n_tiles} rows")
    return np.asarray(fm.data, dtype=np.float64).reshape(gh, gw, fm.d)


def write_patch_grid(grid: np.ndarray, path: str | Path, mpp: float | None = None) -> Path:
    gh, gw, d = grid.shape
    ids = [f"p{i}_{j}" for i in range(gh) for j in range(gw)]
    return write_features(FeatureMatrix(grid.reshape(gh * gw, d).astype(np.float32), ids, mpp=mpp, grid=(gh, gw)), path)


def read_patch_grid(path: str | Path) -> np.ndarray:
    return grid_from_container(read_features(path))


def write_pgm(path: str | Path, arr: np.ndarray, maxval: int) -> Path:
    """Binary PGM (P5); 16-bit samples are big-endian as the format requires."""
    arr = np.asarray(arr)
    if arr.ndim != 2:
        raise ValueError("PGM holds a 2-D raster")
    dtype = ">u2" if maxval > 255 else "u1"
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    head = f"P5\n{arr.shape[1]} {arr.shape[0]}\n{maxval}\n".encode()
    path.write_bytes(head + np.ascontiguousarray(arr, dtype=dtype).tobytes())
    return path


def read_pgm(path: str | Path) -> tuple[np.ndarray, int]:
    raw = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end:end + 1].isspace():
            end += 1
        fields.append(raw[pos:end].decode())
        pos = end
    pos += 1
    if fields[0] != "P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    dtype = ">u2" if maxval > 255 else "u1"
    arr = np.frombuffer(raw[pos:], dtype=dtype, count=w * h).reshape(h, w)
    return arr.astype(np.int64), maxval


def write_mask(path: str | Path, mask: np.ndarray) -> Path:
    return write_pgm(path, (np.asarray(mask) > 0).astype(np.uint8) * 255, 255)


def read_mask(path: str | Path) -> np.ndarray:
    arr, _ = read_pgm(path)
    return (arr > 0).astype(np.uint8)


def write_prob(path: str | Path, grid: np.ndarray) -> Path:
    return write_pgm(path, np.rint(np.clip(grid, 0.0, 1.0) * 65535).astype(np.uint16), 65535)


def read_prob(path: str | Path) -> np.ndarray:
    arr, maxval = read_pgm(path)
    return arr / maxval


def load_pairs_dir(pairs_dir: str | Path, P: int = PATCH) -> tuple[np.ndarray, np.ndarray]:
    """(X, y) from ``<name>.json/.bin`` patch grids and matching ``<name>_mask.pgm`` pixel masks."""
    pairs_dir = Path(pairs_dir)
    xs, ys = [], []
    for header in sorted(pairs_dir.glob("*.json")):
        mask_path = header.with_name(header.stem + "_mask.pgm")
        if not mask_path.exists():
            raise EpiSegError(f"no mask {mask_path.name} for {header.name}")
        grid = read_patch_grid(header)
        labels = pool_mask(read_mask(mask_path), P)
        if labels.shape != grid.shape[:2]:
            raise EpiSegError(f"{header.stem}: pooled mask {labels.shape} vs embedding grid {grid.shape[:2]}")
        xs.append(grid.reshape(-1, grid.shape[2]))
        ys.append(labels.ravel())
    if not xs:
        raise EpiSegError(f"no patch-embedding containers in {pairs_dir}")
    return np.concatenate(xs), np.concatenate(ys)
