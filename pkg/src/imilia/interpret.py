"""Cell predictions, epithelium masks and the per-tile interpretable features.

Cells come from an external detector as JSON lines, one cell per line::

    {"tile_id": "t00012", "cell_id": 7, "class": "lymphocyte",
     "centroid": [x, y], "polygon": [[x, y], ...]}

Coordinates are pixels in the tile frame. The in-epithelium density of class
c is the number of class-c centroids falling on epithelium pixels divided by
the epithelium area in square micrometres.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .metrics import pearson

log = logging.getLogger(__name__)

KNOWN_CLASSES = ("epithelial", "lymphocyte", "plasmocyte", "eosinophil", "neutrophil",
                 "endothelial", "fibroblast", "cancer")
# the seven classes reported downstream; "cancer" is folded into epithelial first
COUNT_CLASSES = ("epithelial", "lymphocyte", "plasmocyte", "eosinophil", "neutrophil", "endothelial", "fibroblast")
DENSITY_CLASSES = ("epithelial", "lymphocyte", "plasmocyte", "eosinophil", "neutrophil")
OTHER_PREFIX = "other:"


class CellError(ValueError):
    pass


@dataclass(frozen=True)
class CellInstance:
    cell_id: str
    class_label: str
    centroid: tuple[float, float]
    polygon: tuple[tuple[float, float], ...]
    tile_id: str = ""

    def __post_init__(self):
        if len(self.polygon) < 3:
            raise CellError(f"cell {self.cell_id!r}: polygon needs >= 3 vertices, got {len(self.polygon)}")
        xs = [p[0] for p in self.polygon]
        ys = [p[1] for p in self.polygon]
        cx, cy = self.centroid
        if not (min(xs) <= cx <= max(xs) and min(ys) <= cy <= max(ys)):
            raise CellError(f"cell {self.cell_id!r}: centroid outside its polygon's bounding box")


def normalize_class(name: str, strict: bool = False) -> str:
    n = name.strip().lower()
    if n in KNOWN_CLASSES or n.startswith(OTHER_PREFIX):
        return n
    if strict:
        raise CellError(f"unknown cell class {name!r}")
    return OTHER_PREFIX + n


def load_cells(path: str | Path, tile_size: int | None = 224, strict: bool = False) -> dict[str, list[CellInstance]]:
    """Cells grouped by tile id.

    Unknown classes become ``other:<name>`` unless ``strict`` is set, in
    which case they are rejected. Centroids must lie inside the tile when
    ``tile_size`` is given.
    """
    out: dict[str, list[CellInstance]] = {}
    with Path(path).open() as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                cid = str(rec["cell_id"])
                cell = CellInstance(
                    cell_id=cid,
                    class_label=normalize_class(rec["class"], strict),
                    centroid=(float(rec["centroid"][0]), float(rec["centroid"][1])),
                    polygon=tuple((float(x), float(y)) for x, y in rec["polygon"]),
                    tile_id=str(rec["tile_id"]),
                )
            except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
                raise CellError(f"{path}:{lineno}: {exc}") from exc
            if tile_size is not None:
                cx, cy = cell.centroid
                if not (0 <= cx < tile_size and 0 <= cy < tile_size):
                    raise CellError(f"{path}:{lineno}: cell {cid!r} centroid {cell.centroid} outside the {tile_size}px tile")
            out.setdefault(cell.tile_id, []).append(cell)
    return out


def write_cells(cells: Iterable[CellInstance], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        for c in cells:
            fh.write(json.dumps({"tile_id": c.tile_id, "cell_id": c.cell_id, "class": c.class_label,
                                 "centroid": list(c.centroid), "polygon": [list(p) for p in c.polygon]}) + "\n")
    return path


def remap_cancer(cells: Sequence[CellInstance]) -> list[CellInstance]:
    return [replace(c, class_label="epithelial") if c.class_label == "cancer" else c for c in cells]


def _pixel(c: CellInstance) -> tuple[int, int]:
    return math.floor(c.centroid[1]), math.floor(c.centroid[0])


def in_mask(cells: Sequence[CellInstance], E: np.ndarray) -> list[bool]:
    H, W = E.shape
    out = []
    for c in cells:
        r, col = _pixel(c)
        if not (0 <= r < H and 0 <= col < W):
            raise CellError(f"cell {c.cell_id!r} centroid {c.centroid} outside the {W}x{H} mask")
        out.append(bool(E[r, col]))
    return out


def density(cells: Sequence[CellInstance], E: np.ndarray, mpp_x: float, mpp_y: float, cls: str) -> float:
    """In-epithelium density of ``cls`` in cells per square micrometre; 0 when E is empty."""
    if mpp_x <= 0 or mpp_y <= 0:
        raise CellError("mpp must be positive")
    area_px = int(np.count_nonzero(E))
    if area_px == 0:
        return 0.0
    hits = sum(inside for c, inside in zip(cells, in_mask(cells, E)) if c.class_label == cls)
    return hits / (area_px * mpp_x * mpp_y)


@dataclass
class TileFeatureRow:
    slide_id: str
    tile_id: str
    side: str
    cohort: str = ""
    counts: dict[str, int] = field(default_factory=dict)
    epithelium_area_um2: float = 0.0
    densities: dict[str, float] = field(default_factory=dict)
    empty_epithelium: bool = True
    score: float = float("nan")

    def columns(self) -> dict[str, object]:
        row: dict[str, object] = {"slide_id": self.slide_id, "tile_id": self.tile_id, "side": self.side,
                                  "cohort": self.cohort, "score": self.score}
        for c in COUNT_CLASSES:
            row[f"count_{c}"] = self.counts.get(c, 0)
        row["count_other"] = sum(v for k, v in self.counts.items() if k not in COUNT_CLASSES)
        row["epithelium_area_um2"] = self.epithelium_area_um2
        row["empty_epithelium"] = int(self.empty_epithelium)
        for c in DENSITY_CLASSES:
            row[f"density_{c}"] = self.densities.get(c, 0.0)
        return row


FEATURE_COLUMNS = list(TileFeatureRow("", "", "").columns())


def tile_features(cells: Sequence[CellInstance], E: np.ndarray | None, mpp_x: float, mpp_y: float,
                  slide_id: str = "", tile_id: str = "", side: str = "", cohort: str = "",
                  score: float = float("nan")) -> TileFeatureRow:
    """Counts per class plus in-epithelium densities. ``E=None`` means no mask: densities stay zero."""
    counts: dict[str, int] = {c: 0 for c in COUNT_CLASSES}
    for c in cells:
        counts[c.class_label] = counts.get(c.class_label, 0) + 1
    if E is None:
        return TileFeatureRow(slide_id, tile_id, side, cohort, counts, 0.0, {c: 0.0 for c in DENSITY_CLASSES}, True, score)
    area = int(np.count_nonzero(E)) * mpp_x * mpp_y
    dens = {c: density(cells, E, mpp_x, mpp_y, c) for c in DENSITY_CLASSES}
    return TileFeatureRow(slide_id, tile_id, side, cohort, counts, area, dens, area == 0, score)


def write_feature_rows(rows: Sequence[TileFeatureRow], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, FEATURE_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.columns().items()})
    return path


def read_feature_rows(path: str | Path) -> list[TileFeatureRow]:
    rows = []
    with Path(path).open(newline="") as fh:
        for rec in csv.DictReader(fh):
            counts = {c: int(rec[f"count_{c}"]) for c in COUNT_CLASSES}
            if int(rec.get("count_other", 0) or 0):
                counts["other"] = int(rec["count_other"])
            rows.append(TileFeatureRow(
                rec["slide_id"], rec["tile_id"], rec["side"], rec.get("cohort", ""), counts,
                float(rec["epithelium_area_um2"]), {c: float(rec[f"density_{c}"]) for c in DENSITY_CLASSES},
                bool(int(rec["empty_epithelium"])), float(rec.get("score", "nan") or "nan")))
    return rows


def epithelium_agreement(rows: Sequence[TileFeatureRow]) -> tuple[float, float]:
    """Pearson (r, p) between epithelial cell counts and epithelium area."""
    x = [r.counts.get("epithelial", 0) for r in rows]
    y = [r.epithelium_area_um2 for r in rows]
    return pearson(x, y)
