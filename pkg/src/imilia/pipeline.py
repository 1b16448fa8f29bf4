"""End-to-end run: preprocess -> train/CV -> ensemble inference -> extremes -> EpiSeg -> features -> report.

Each stage writes its outputs into the run directory and then a marker file
``stages/<name>.done``. A failing stage writes ``stages/<name>.failed`` and
raises ``StageError``; outputs of earlier stages are left untouched.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import time
import warnings
from contextlib import contextmanager
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import chowder, episeg, interpret, metrics, preprocess, report
from .config import RunConfig, dump_toml
from .ingest import SlideRecord, load_dataset, make_folds, read_tile_manifest

log = logging.getLogger(__name__)

STAGES = ("preprocess", "train", "infer", "extremes", "episeg", "features", "report")


class StageError(RuntimeError):
    def __init__(self, stage: str, digest: str, cause: BaseException):
        super().__init__(f"stage {stage} failed (input digest {digest[:16]}): {type(cause).__name__}: {cause}")
        self.stage, self.digest, self.cause = stage, digest, cause


def digest_paths(paths: Sequence[str | Path]) -> str:
    """sha256 over the bytes of the given files (missing files contribute their name only)."""
    h = hashlib.sha256()
    for p in sorted(str(p) for p in paths):
        h.update(Path(p).name.encode())
        if Path(p).is_file():
            h.update(Path(p).read_bytes())
    return h.hexdigest()


class Run:
    def __init__(self, cfg: RunConfig, run_dir: str | Path):
        self.cfg = cfg
        self.dir = Path(run_dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        (self.dir / "stages").mkdir(exist_ok=True)
        self.events = self.dir / "events.jsonl"

    def event(self, kind: str, **fields) -> None:
        with self.events.open("a") as fh:
            fh.write(json.dumps({"time": round(time.time(), 3), "event": kind, **fields}, default=str) + "\n")

    def warn(self, stage: str, message: str) -> None:
        log.warning("[%s] %s", stage, message)
        self.event("warning", stage=stage, message=message)

    @contextmanager
    def stage(self, name: str, inputs: Sequence[str | Path] = ()) -> Iterator[None]:
        for suffix in (".done", ".failed"):
            (self.dir / "stages" / f"{name}{suffix}").unlink(missing_ok=True)
        self.event("stage_start", stage=name)
        log.info("stage %s", name)
        t0 = time.time()
        try:
            with warnings.catch_warnings(record=True) as caught:
                warnings.simplefilter("always")
                yield
            for w in caught:
                self.warn(name, str(w.message))
        except Exception as exc:
            digest = digest_paths(inputs)
            (self.dir / "stages" / f"{name}.failed").write_text(
                json.dumps({"stage": name, "input_digest": digest, "error": type(exc).__name__, "message": str(exc)}) + "\n")
            self.event("stage_failed", stage=name, error=str(exc), input_digest=digest)
            raise StageError(name, digest, exc) from exc
        (self.dir / "stages" / f"{name}.done").write_text(name + "\n")
        self.event("stage_done", stage=name, seconds=round(time.time() - t0, 3))


# ---------------------------------------------------------------------------
# stages


def stage_preprocess(run: Run) -> None:
    from skimage.io import imread

    pc = run.cfg.preprocess
    src = Path(run.cfg.data.images_dir)
    images = sorted([*src.glob("*.png"), *src.glob("*.npy")])
    if not images:
        run.warn("preprocess", f"no images in {src}")
    for p in images:
        img = np.load(p) if p.suffix == ".npy" else imread(p)
        mask = preprocess.tissue_mask(img, downsample=pc.downsample)
        grid = preprocess.tessellate(mask, pc.tile_size, pc.min_tissue_frac, pc.mpp, pc.downsample)
        grid.write(run.dir / "tiles" / f"{p.stem}.csv")
        episeg.write_mask(run.dir / "tiles" / f"{p.stem}_tissue.pgm", mask)


def _write_predictions(path: Path, records: Sequence[SlideRecord], probs: dict[str, float]) -> Path:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["slide_id", "cohort", "label", "score"])
        for r in records:
            if r.slide_id in probs:
                w.writerow([r.slide_id, r.cohort, "" if r.label is None else r.label, repr(probs[r.slide_id])])
    return path


def read_predictions(path: str | Path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        return [{**row, "score": float(row["score"]), "label": int(row["label"]) if row["label"] else None}
                for row in csv.DictReader(fh)]


def stage_train(run: Run, records: Sequence[SlideRecord]) -> chowder.CVResult:
    cfg = run.cfg
    cohorts = set(cfg.data.train_cohorts)
    train = [r for r in records if r.label is not None and (not cohorts or r.cohort in cohorts)]
    folds = make_folds(train, cfg.chowder.n_folds, cfg.run.seed)
    with (run.dir / "folds.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["slide_id", "fold"])
        w.writerows(sorted(folds.assignment.items()))
    cv = chowder.cross_validate(train, folds, cfg.chowder_config, workers=cfg.run.threads)
    chowder.save_models(cv.models, run.dir / "models")
    _write_predictions(run.dir / "predictions_oof.csv", train, cv.oof)
    with (run.dir / "train_log.jsonl").open("w") as fh:
        for fold, entries in enumerate(cv.logs):
            for e in entries:
                fh.write(json.dumps({"fold": fold, **e.__dict__}) + "\n")
    auc = cv.auc(train)
    run.event("cv_auc", value=auc)
    log.info("cross-validation AUC %.4f", auc)
    return cv


def stage_infer(run: Run, records: Sequence[SlideRecord]) -> chowder.TileScoreTable:
    models = chowder.load_models(run.dir / "models")
    probs, table = chowder.predict_dataset(models, records)
    table.to_csv(run.dir / "scores.csv")
    _write_predictions(run.dir / "predictions.csv", records, probs)
    return table


def stage_extremes(run: Run, records: Sequence[SlideRecord], table: chowder.TileScoreTable) -> list[dict]:
    rows = []
    for cohort in sorted({r.cohort for r in records}):
        ids = [r.slide_id for r in records if r.cohort == cohort]
        sub = table.for_slides(ids)
        if len(sub) == 0:
            continue
        for side in ("max", "min"):
            for rank, (sid, tid, score) in enumerate(chowder.extract_extremes(sub, run.cfg.extremes.n, side)):
                rows.append({"cohort": cohort, "side": side, "rank": rank, "slide_id": sid, "tile_id": tid, "score": score})
    write_extremes(rows, run.dir / "extremes.csv")
    return rows


def write_extremes(rows: Sequence[dict], path: Path) -> Path:
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, ["cohort", "side", "rank", "slide_id", "tile_id", "score"], lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({**r, "score": repr(float(r["score"]))})
    return path


def read_extremes(path: str | Path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        return [{**r, "rank": int(r["rank"]), "score": float(r["score"])} for r in csv.DictReader(fh)]


def fit_episeg(ec, seed: int) -> tuple[episeg.EpiSegModel, float]:
    X, y = episeg.load_pairs_dir(ec.pairs_dir, ec.patch_size)
    C = episeg.select_C(X, y, ec.C_grid, ec.n_folds, seed) if len(ec.C_grid) > 1 else (ec.C_grid[0] if ec.C_grid else ec.C)
    return episeg.fit(X, y, C), C


def expanded_grid_for(patch_dir: Path, rec: SlideRecord, tile_id: str, tiles: dict | None, ec,
                      slide_grids: dict | None = None) -> np.ndarray | None:
    """Expanded patch grid for one tile: a per-tile container if present, else cut from the slide grid."""
    per_tile = patch_dir / rec.slide_id / f"{tile_id}.json"
    if per_tile.exists():
        return episeg.read_patch_grid(per_tile)
    slide = patch_dir / f"{rec.slide_id}.json"
    if slide.exists() and tiles and tile_id in tiles:
        x, y, size, _ = tiles[tile_id]
        cache = {} if slide_grids is None else slide_grids
        if rec.slide_id not in cache:
            cache[rec.slide_id] = episeg.read_patch_grid(slide)
        return episeg.expand_patch_grid(cache[rec.slide_id], x, y, size, ec.tile_size, ec.patch_size)
    return None


def stage_episeg(run: Run, records: Sequence[SlideRecord], extremes: Sequence[dict]) -> int:
    ec = run.cfg.episeg
    if ec.model:
        model = episeg.EpiSegModel.load(ec.model)
    elif ec.pairs_dir:
        model, C = fit_episeg(ec, run.cfg.run.seed)
        run.event("episeg_fit", C=C)
    else:
        run.warn("episeg", "no EpiSeg model or training pairs configured; epithelium masks skipped")
        return 0
    model.save(run.dir / "episeg_model.json")
    if not run.cfg.data.patch_dir:
        run.warn("episeg", "no patch-embedding directory configured; epithelium masks skipped")
        return 0
    by_id = {r.slide_id: r for r in records}
    patch_dir = Path(run.cfg.data.patch_dir)
    manifests: dict[str, dict] = {}
    slide_grids: dict[str, np.ndarray] = {}
    done, missing, mirrored = 0, 0, 0
    for e in extremes:
        rec = by_id[e["slide_id"]]
        if rec.slide_id not in manifests:
            manifests[rec.slide_id] = read_tile_manifest(rec.tile_manifest_path) if rec.tile_manifest_path else {}
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            grid = expanded_grid_for(patch_dir, rec, e["tile_id"], manifests[rec.slide_id], ec, slide_grids)
        mirrored += bool(caught)
        if grid is None:
            missing += 1
            continue
        tile_px = manifests[rec.slide_id].get(e["tile_id"], (0, 0, 224, 0))[2]
        prob = episeg.infer_extreme_tile(model, grid, tile_px, ec.tile_size, ec.patch_size)
        out = run.dir / "episeg" / e["slide_id"]
        episeg.write_prob(out / f"{e['tile_id']}_prob.pgm", prob)
        episeg.write_mask(out / f"{e['tile_id']}_mask.pgm", episeg.binarize(prob, ec.threshold, ec.patch_size))
        done += 1
    if mirrored:
        run.warn("episeg", f"{mirrored} extreme tiles lie near a slide border; their context was mirrored")
    if missing:
        run.warn("episeg", f"{missing} extreme tiles have no patch embeddings")
    return done


def stage_features(run: Run, records: Sequence[SlideRecord], extremes: Sequence[dict]) -> list[interpret.TileFeatureRow]:
    cells_dir = Path(run.cfg.data.cells_dir) if run.cfg.data.cells_dir else None
    if cells_dir is None or not any(cells_dir.glob("*.jsonl")):
        run.warn("features", "no cell prediction files; features skipped, report degrades to scores only")
        return []
    by_id = {r.slide_id: r for r in records}
    cache: dict[str, dict[str, list[interpret.CellInstance]]] = {}
    rows = []
    for e in extremes:
        rec = by_id[e["slide_id"]]
        if rec.slide_id not in cache:
            path = cells_dir / f"{rec.slide_id}.jsonl"
            cache[rec.slide_id] = interpret.load_cells(path) if path.exists() else {}
        cells = interpret.remap_cancer(cache[rec.slide_id].get(e["tile_id"], []))
        mask_path = run.dir / "episeg" / rec.slide_id / f"{e['tile_id']}_mask.pgm"
        E = episeg.read_mask(mask_path) if mask_path.exists() else None
        rows.append(interpret.tile_features(cells, E, rec.mpp_x, rec.mpp_y, rec.slide_id, e["tile_id"],
                                            e["side"], rec.cohort, e["score"]))
    interpret.write_feature_rows(rows, run.dir / "features.csv")
    with_mask = [r for r in rows if not r.empty_epithelium]
    if len(with_mask) >= 3:
        try:
            r, p = interpret.epithelium_agreement(with_mask)
            run.event("epithelium_agreement", r=r, p=p, n=len(with_mask))
        except metrics.MetricError as exc:
            run.warn("features", f"epithelium agreement undefined: {exc}")
    return rows


def stage_report(run: Run, rows: Sequence[interpret.TileFeatureRow]) -> list[Path]:
    rc = run.cfg.report
    preds_path = run.dir / "predictions_oof.csv"
    if not preds_path.exists():
        preds_path = run.dir / "predictions.csv"
    preds = [p for p in read_predictions(preds_path) if p["label"] is not None] if preds_path.exists() else []
    pr = None
    summary: dict = {}
    if preds and len({p["label"] for p in preds}) == 2:
        scores = np.array([p["score"] for p in preds])
        labels = np.array([p["label"] for p in preds])
        pr = (scores, labels)
        auc, lo, hi = metrics.bootstrap_ci(metrics.roc_auc, (scores, labels), rc.bootstrap, rc.level, run.cfg.run.seed)
        summary["slide_auc"] = {"value": auc, "ci": [lo, hi], "level": rc.level, "n": int(labels.size), "source": preds_path.name}
    written = report.write_report(rows, run.dir / "report", pr, "Slide-level precision-recall")
    (run.dir / "report" / "metrics.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return written + [run.dir / "report" / "metrics.json"]


def config_digest(cfg: RunConfig) -> str:
    """Digest of the configuration minus where the run is written."""
    doc = cfg.to_dict()
    doc["run"] = {k: v for k, v in doc["run"].items() if k not in ("out_dir", "threads")}
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()


def run_pipeline(cfg: RunConfig, run_dir: str | Path | None = None) -> Path:
    run = Run(cfg, run_dir or cfg.run.out_dir)
    (run.dir / "config.toml").write_text(dump_toml(cfg))
    manifest = Path(cfg.data.manifest)
    run.event("pipeline_start", seed=cfg.run.seed)

    if cfg.preprocess.enabled and cfg.data.images_dir:
        with run.stage("preprocess", sorted(Path(cfg.data.images_dir).glob("*"))):
            stage_preprocess(run)
    with run.stage("train", [manifest]):
        records = load_dataset(manifest)
        stage_train(run, records)
    with run.stage("infer", [manifest, *sorted((run.dir / "models").glob("*"))]):
        table = stage_infer(run, records)
    with run.stage("extremes", [run.dir / "scores.csv"]):
        extremes = stage_extremes(run, records, table)
    with run.stage("episeg", [run.dir / "extremes.csv"]):
        stage_episeg(run, records, extremes)
    with run.stage("features", [run.dir / "extremes.csv"]):
        rows = stage_features(run, records, extremes)
    with run.stage("report", [run.dir / "features.csv", run.dir / "predictions.csv"]):
        written = stage_report(run, rows)
        outputs = [*sorted((run.dir / "models").glob("*")), run.dir / "folds.csv", run.dir / "predictions_oof.csv",
                   run.dir / "predictions.csv", run.dir / "scores.csv", run.dir / "extremes.csv",
                   run.dir / "features.csv", run.dir / "episeg_model.json",
                   *sorted((run.dir / "episeg").rglob("*.pgm")), *written]
        report.write_run_manifest(run.dir / "run_manifest.json", {"run": cfg.run.seed},
                                  {"manifest": manifest}, outputs, base=run.dir,
                                  extra={"config_sha256": config_digest(cfg)})
    run.event("pipeline_done")
    return run.dir
