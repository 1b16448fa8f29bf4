"""Slide manifests, tile-embedding containers, CV folds and synthetic cohorts.

A feature container is a pair of files sharing a stem: ``<stem>.json`` holds
the header (dims, dtype tag, tile ids, optional mpp / grid shape) and
``<stem>.bin`` holds the raw little-endian float32 payload in row-major order.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

MANIFEST_COLUMNS = ["slide_id", "cohort", "label", "mpp_x", "mpp_y", "tile_manifest", "feature_path"]
TILE_MANIFEST_COLUMNS = ["tile_id", "x_px", "y_px", "tile_size_px", "mpp"]
CONTAINER_FORMAT = "imilia-features"
DTYPE_TAG = "float32-le"


class DataError(ValueError):
    """Raised when an input file violates its documented contract."""


@dataclass(frozen=True)
class SlideRecord:
    slide_id: str
    cohort: str
    label: int | None
    mpp_x: float
    mpp_y: float
    tile_manifest_path: Path | None
    feature_path: Path

    def __post_init__(self):
        if not (self.mpp_x > 0 and self.mpp_y > 0):
            raise DataError(f"slide {self.slide_id!r}: non-positive mpp ({self.mpp_x}, {self.mpp_y})")
        if self.label not in (None, 0, 1):
            raise DataError(f"slide {self.slide_id!r}: label must be 0, 1 or empty, got {self.label!r}")


@dataclass
class FeatureMatrix:
    """Tile embeddings of one slide, rows aligned with ``tile_ids``."""

    data: np.ndarray
    tile_ids: list[str]
    mpp: float | None = None
    grid: tuple[int, int] | None = None

    def __post_init__(self):
        if self.data.ndim != 2:
            raise DataError(f"feature matrix must be 2-D, got shape {self.data.shape}")
        if self.data.shape[0] < 1:
            raise DataError("feature matrix has no tiles")
        if len(self.tile_ids) != self.data.shape[0]:
            raise DataError(f"{len(self.tile_ids)} tile ids for {self.data.shape[0]} rows")
        bad = ~np.isfinite(self.data)
        if bad.any():
            row = int(np.argwhere(bad)[0, 0])
            raise DataError(f"non-finite value in feature row {row} (tile {self.tile_ids[row]!r})")

    @property
    def n_tiles(self) -> int:
        return self.data.shape[0]

    @property
    def d(self) -> int:
        return self.data.shape[1]


@dataclass
class FoldAssignment:
    n_folds: int
    assignment: dict[str, int] = field(default_factory=dict)

    def fold_ids(self, fold: int) -> list[str]:
        return [s for s, f in self.assignment.items() if f == fold]


# ---------------------------------------------------------------------------
# feature containers


def _stem(path: Path) -> Path:
    path = Path(path)
    return path.with_suffix("") if path.suffix in (".json", ".bin") else path


def write_features(fm: FeatureMatrix, path: str | Path) -> Path:
    """Write ``fm`` as a canonical container; returns the header path."""
    stem = _stem(Path(path))
    stem.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "format": CONTAINER_FORMAT,
        "dtype": DTYPE_TAG,
        "n_tiles": int(fm.n_tiles),
        "d": int(fm.d),
        "tile_ids": list(fm.tile_ids),
    }
    if fm.mpp is not None:
        header["mpp"] = float(fm.mpp)
    if fm.grid is not None:
        header["grid"] = [int(g) for g in fm.grid]
    json_path = stem.with_suffix(".json")
    json_path.write_text(json.dumps(header, indent=2, sort_keys=True) + "\n")
    stem.with_suffix(".bin").write_bytes(np.ascontiguousarray(fm.data, dtype="<f4").tobytes())
    return json_path


def read_features(path: str | Path) -> FeatureMatrix:
    stem = _stem(Path(path))
    json_path, bin_path = stem.with_suffix(".json"), stem.with_suffix(".bin")
    if not json_path.exists() or not bin_path.exists():
        raise DataError(f"feature container {stem} is missing its .json or .bin part")
    try:
        header = json.loads(json_path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"unreadable feature header {json_path}: {exc}") from exc
    if header.get("dtype") != DTYPE_TAG:
        raise DataError(f"{json_path}: unsupported dtype tag {header.get('dtype')!r}")
    n, d = int(header["n_tiles"]), int(header["d"])
    payload = bin_path.read_bytes()
    if len(payload) != n * d * 4:
        raise DataError(f"{bin_path}: header declares {n}x{d} floats ({n * d * 4} bytes), payload has {len(payload)} bytes")
    data = np.frombuffer(payload, dtype="<f4").reshape(n, d).astype(np.float32)
    grid = tuple(header["grid"]) if "grid" in header else None
    return FeatureMatrix(data=data, tile_ids=list(header["tile_ids"]), mpp=header.get("mpp"), grid=grid)


def load_features(record: SlideRecord) -> FeatureMatrix:
    try:
        return read_features(record.feature_path)
    except DataError as exc:
        raise DataError(f"slide {record.slide_id!r}: {exc}") from exc


# ---------------------------------------------------------------------------
# manifests


def _resolve(base: Path, value: str) -> Path | None:
    if not value:
        return None
    p = Path(value)
    return p if p.is_absolute() else base / p


def load_dataset(manifest_path: str | Path, check_features: bool = True) -> list[SlideRecord]:
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise DataError(f"manifest not found: {manifest_path}")
    base = manifest_path.parent
    records: list[SlideRecord] = []
    seen: set[str] = set()
    with manifest_path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(MANIFEST_COLUMNS) - set(reader.fieldnames or [])
        if missing:
            raise DataError(f"{manifest_path}: missing columns {sorted(missing)}")
        for lineno, row in enumerate(reader, start=2):
            sid = row["slide_id"].strip()
            if not sid:
                raise DataError(f"{manifest_path}:{lineno}: empty slide_id")
            if sid in seen:
                raise DataError(f"{manifest_path}:{lineno}: duplicate slide_id {sid!r}")
            seen.add(sid)
            label_s = row["label"].strip()
            try:
                label = int(label_s) if label_s else None
                mpp_x, mpp_y = float(row["mpp_x"]), float(row["mpp_y"])
            except ValueError as exc:
                raise DataError(f"{manifest_path}:{lineno}: malformed row for {sid!r}: {exc}") from exc
            feature_path = _resolve(base, row["feature_path"].strip())
            if feature_path is None:
                raise DataError(f"{manifest_path}:{lineno}: slide {sid!r} has no feature_path")
            try:
                rec = SlideRecord(sid, row["cohort"].strip(), label, mpp_x, mpp_y,
                                  _resolve(base, row["tile_manifest"].strip()), feature_path)
            except DataError as exc:
                raise DataError(f"{manifest_path}:{lineno}: {exc}") from exc
            if check_features:
                stem = _stem(feature_path)
                if not stem.with_suffix(".json").exists() or not stem.with_suffix(".bin").exists():
                    raise DataError(f"{manifest_path}:{lineno}: unreadable feature container for {sid!r}: {stem}")
            records.append(rec)
    return records


def write_dataset(records: Sequence[SlideRecord], manifest_path: str | Path) -> Path:
    manifest_path = Path(manifest_path)
    base = manifest_path.parent.resolve()

    def rel(p: Path | None) -> str:
        if p is None:
            return ""
        p = Path(p).resolve()
        try:
            return p.relative_to(base).as_posix()
        except ValueError:
            return str(p)

    with manifest_path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_COLUMNS)
        for r in records:
            w.writerow([r.slide_id, r.cohort, "" if r.label is None else r.label, repr(r.mpp_x), repr(r.mpp_y),
                        rel(r.tile_manifest_path), rel(r.feature_path)])
    return manifest_path


def write_tile_manifest(rows: Iterable[tuple[str, int, int]], tile_size_px: int, mpp: float, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TILE_MANIFEST_COLUMNS)
        for tile_id, x, y in rows:
            w.writerow([tile_id, int(x), int(y), int(tile_size_px), repr(float(mpp))])
    return path


def read_tile_manifest(path: str | Path) -> dict[str, tuple[int, int, int, float]]:
    """tile_id -> (x_px, y_px, tile_size_px, mpp)."""
    out = {}
    with Path(path).open(newline="") as fh:
        for row in csv.DictReader(fh):
            out[row["tile_id"]] = (int(row["x_px"]), int(row["y_px"]), int(row["tile_size_px"]), float(row["mpp"]))
    return out


# ---------------------------------------------------------------------------
# folds


def make_folds(dataset: Sequence[SlideRecord], n_folds: int = 5, seed: int = 0) -> FoldAssignment:
    """Stratified fold assignment: seeded shuffle per class, then round-robin.

    The round-robin cursor carries over between classes so fold sizes differ
    by at most one overall as well as per class.
    """
    if n_folds < 2:
        raise DataError(f"n_folds must be >= 2, got {n_folds}")
    by_class: dict[int, list[str]] = {0: [], 1: []}
    for r in dataset:
        if r.label is not None:
            by_class[r.label].append(r.slide_id)
    for c, ids in by_class.items():
        if len(ids) < n_folds:
            raise DataError(f"too few slides of class {c} for {n_folds} folds ({len(ids)})")
    rng = np.random.default_rng(seed)
    assignment: dict[str, int] = {}
    cursor = 0
    for c in (0, 1):
        ids = sorted(by_class[c])
        for i in rng.permutation(len(ids)):
            assignment[ids[i]] = cursor % n_folds
            cursor += 1
    return FoldAssignment(n_folds, dict(sorted(assignment.items())))


# ---------------------------------------------------------------------------
# synthetic cohorts


@dataclass
class SynthTruth:
    """Ground truth kept alongside a synthetic cohort."""

    direction: np.ndarray
    signal_tiles: dict[str, list[str]]


def synth_dataset(
    n_slides: int,
    n_tiles_range: tuple[int, int],
    d: int,
    separation: float,
    seed: int,
    out_dir: str | Path,
    signal_frac: float = 0.2,
    prevalence: float = 0.5,
    cohort: str = "synthetic",
    tile_size_px: int = 224,
    mpp: float = 0.5,
) -> tuple[list[SlideRecord], SynthTruth]:
    """Write a synthetic cohort of Gaussian tile embeddings under ``out_dir``.

    Background tiles are N(0, I_d). In positive slides a fraction
    ``signal_frac`` of tiles is drawn from N(separation * u, I_d) for a fixed
    random unit vector u. Writes ``manifest.csv``, per-slide feature
    containers and tile manifests, and ``truth.csv`` listing signal tiles.
    """
    if separation < 0:
        raise ValueError("separation must be >= 0")
    lo, hi = n_tiles_range
    if not (1 <= lo <= hi):
        raise ValueError(f"bad n_tiles_range {n_tiles_range}")
    if not (0 < signal_frac <= 1) or not (0 < prevalence < 1):
        raise ValueError("signal_frac must be in (0, 1] and prevalence in (0, 1)")
    out_dir = Path(out_dir)
    (out_dir / "features").mkdir(parents=True, exist_ok=True)
    (out_dir / "tiles").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    u = rng.standard_normal(d)
    u /= np.linalg.norm(u)

    n_pos = int(round(prevalence * n_slides))
    labels = np.array([1] * n_pos + [0] * (n_slides - n_pos))
    rng.shuffle(labels)
    width = len(str(n_slides - 1))
    records, signal = [], {}
    for i in range(n_slides):
        sid = f"slide_{i:0{width}d}"
        n = int(rng.integers(lo, hi + 1))
        X = rng.standard_normal((n, d))
        cols = math.ceil(math.sqrt(n))
        tile_ids = [f"t{j:05d}" for j in range(n)]
        if labels[i] == 1:
            k = max(1, int(round(signal_frac * n)))
            idx = np.sort(rng.choice(n, size=k, replace=False))
            X[idx] += separation * u
            signal[sid] = [tile_ids[j] for j in idx]
        fm = FeatureMatrix(X.astype(np.float32), tile_ids, mpp=mpp)
        feat = write_features(fm, out_dir / "features" / sid)
        tman = write_tile_manifest(((t, (j % cols) * tile_size_px, (j // cols) * tile_size_px)
                                    for j, t in enumerate(tile_ids)),
                                   tile_size_px, mpp, out_dir / "tiles" / f"{sid}.csv")
        records.append(SlideRecord(sid, cohort, int(labels[i]), mpp, mpp, tman, feat.with_suffix("")))
    write_dataset(records, out_dir / "manifest.csv")
    with (out_dir / "truth.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["slide_id", "tile_id"])
        for sid in sorted(signal):
            for t in signal[sid]:
                w.writerow([sid, t])
    return records, SynthTruth(u, signal)
