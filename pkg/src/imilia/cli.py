"""Command-line entry point: ``imilia <subcommand> ...``.

Every subcommand exits 0 on success. On error it prints one JSON line
prefixed with ``imilia-error:`` to stderr and exits 1 (2 for usage errors).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__, chowder, episeg, interpret, metrics, pipeline, preprocess, report
from .config import ConfigError, RunConfig, dump_toml, load_config, resolve_seed
from .ingest import load_dataset, make_folds, synth_dataset
from .synthetic import synth_episeg_pairs, synth_interpretability

log = logging.getLogger("imilia")


def _setup_logging(verbose: int) -> None:
    level = logging.WARNING - 10 * min(verbose, 2)
    logging.basicConfig(level=level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s", force=True)


def _out_json(doc) -> None:
    print(json.dumps(doc, sort_keys=True))


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(a) -> None:
    seed = resolve_seed(a.seed)
    out = Path(a.out)
    records, truth = synth_dataset(a.n_slides, (a.min_tiles, a.max_tiles), a.d, a.separation, seed, out,
                                   signal_frac=a.signal_frac, prevalence=a.prevalence, cohort=a.cohort)
    doc = {"manifest": str(out / "manifest.csv"), "slides": len(records)}
    if a.interpret:
        synth_interpretability(records, truth, out, seed, d_patch=a.d_patch)
        direction = np.load(out / "patch_direction.npy")
        synth_episeg_pairs(out / "episeg_pairs", n_images=a.episeg_images, seed=seed, direction=direction)
        cfg = RunConfig()
        cfg.run.seed = seed
        cfg.run.out_dir = "run"
        cfg.data.manifest = "manifest.csv"
        cfg.data.cells_dir = "cells"
        cfg.data.patch_dir = "patches"
        cfg.episeg.pairs_dir = "episeg_pairs"
        cfg.episeg.C_grid = [1e-3, 1e-2, 1e-1]
        (out / "pipeline.toml").write_text(dump_toml(cfg))
        doc["config"] = str(out / "pipeline.toml")
    _out_json(doc)


def cmd_preprocess(a) -> None:
    from skimage.io import imread

    path = Path(a.image)
    img = np.load(path) if path.suffix == ".npy" else imread(path)
    mask = preprocess.tissue_mask(img, downsample=a.downsample)
    grid = preprocess.tessellate(mask, a.tile_size, a.min_tissue_frac, a.mpp, a.downsample)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    grid.write(out / f"{path.stem}.csv")
    episeg.write_mask(out / f"{path.stem}_tissue.pgm", mask)
    _out_json({"tiles": len(grid), "manifest": str(out / f"{path.stem}.csv")})


def _config_from_args(a, extra: dict | None = None) -> RunConfig:
    overrides = dict(extra or {})
    cfg = load_config(getattr(a, "config", None), overrides)
    cfg.run.seed = resolve_seed(getattr(a, "seed", None), cfg.run.seed)
    return cfg


def cmd_train(a) -> None:
    cfg = _config_from_args(a, {"chowder.n_folds": a.folds, "chowder.n_epochs": a.epochs, "run.threads": a.threads})
    records = load_dataset(a.manifest)
    labeled = [r for r in records if r.label is not None]
    folds = make_folds(labeled, cfg.chowder.n_folds, cfg.run.seed)
    cv = chowder.cross_validate(labeled, folds, cfg.chowder_config, workers=cfg.run.threads)
    out = Path(a.out)
    chowder.save_models(cv.models, out)
    pipeline._write_predictions(out / "predictions_oof.csv", labeled, cv.oof)
    with (out / "folds.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["slide_id", "fold"])
        w.writerows(sorted(folds.assignment.items()))
    _out_json({"models": len(cv.models), "cv_auc": cv.auc(labeled), "out": str(out)})


def cmd_infer(a) -> None:
    models = chowder.load_models(a.models)
    records = load_dataset(a.manifest)
    probs, table = chowder.predict_dataset(models, records)
    table.to_csv(a.scores_out)
    if a.predictions_out:
        pipeline._write_predictions(Path(a.predictions_out), records, probs)
    _out_json({"slides": len(probs), "rows": len(table), "scores": a.scores_out})


def cmd_extremes(a) -> None:
    table = chowder.TileScoreTable.from_csv(a.scores)
    rows = chowder.extract_extremes(table, a.n, a.side)
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["rank", "slide_id", "tile_id", "score"])
    for i, (sid, tid, s) in enumerate(rows):
        w.writerow([i, sid, tid, repr(s)])


def cmd_episeg_train(a) -> None:
    seed = resolve_seed(a.seed)
    X, y = episeg.load_pairs_dir(a.pairs, a.patch_size)
    grid = [float(c) for c in a.grid.split(",") if c.strip()]
    C = episeg.select_C(X, y, grid, a.folds, seed) if len(grid) > 1 else grid[0]
    model = episeg.fit(X, y, C)
    model.save(a.out)
    g = episeg.objective_grad(X, y, model.weights, model.bias, C)
    _out_json({"C": C, "n_pairs": int(len(y)), "grad_max": float(max(np.abs(g[0]).max(), abs(g[1]))), "model": a.out})


def cmd_episeg_infer(a) -> None:
    model = episeg.EpiSegModel.load(a.model)
    out = Path(a.out)
    n = 0
    for header in sorted(Path(a.tiles).glob("*.json")):
        grid = episeg.read_patch_grid(header)
        g = a.tile_size // a.patch_size
        if grid.shape[:2] == (g, g) and not a.full:
            prob = episeg.infer_extreme_tile(model, grid, a.crop_tile_size, a.tile_size, a.patch_size)
        else:
            prob = episeg.infer_tile(model, grid)
        episeg.write_prob(out / f"{header.stem}_prob.pgm", prob)
        episeg.write_mask(out / f"{header.stem}_mask.pgm", episeg.binarize(prob, a.threshold, a.patch_size))
        n += 1
    _out_json({"tiles": n, "out": str(out)})


def cmd_features(a) -> None:
    records = {r.slide_id: r for r in load_dataset(a.manifest, check_features=False)}
    masks = Path(a.masks)
    rows = []
    for path in sorted(Path(a.cells).glob("*.jsonl")):
        sid = path.stem
        if sid not in records:
            log.warning("cells for unknown slide %s skipped", sid)
            continue
        rec = records[sid]
        for tid, cells in sorted(interpret.load_cells(path, a.tile_size).items()):
            mp = masks / sid / f"{tid}_mask.pgm"
            E = episeg.read_mask(mp) if mp.exists() else None
            rows.append(interpret.tile_features(interpret.remap_cancer(cells), E, rec.mpp_x, rec.mpp_y,
                                                sid, tid, a.side, rec.cohort))
    interpret.write_feature_rows(rows, a.out)
    _out_json({"rows": len(rows), "out": a.out})


def _read_two_col(path: str, value_col: str | None = None) -> dict[str, str]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        cols = reader.fieldnames or []
        if len(cols) < 2:
            raise ValueError(f"{path}: need an id column and a value column")
        vcol = value_col if value_col in cols else cols[1]
        return {row[cols[0]]: row[vcol] for row in reader}


def _read_instances(path: str) -> dict[str, dict[str, tuple[str, list]]]:
    """tile_id -> {cell_id: (class, polygon)} from cell JSONL or CSV (tile_id,cell_id,class,polygon="x y;x y;...")."""
    out: dict[str, dict[str, tuple[str, list]]] = {}
    if path.endswith(".jsonl"):
        for tid, cells in interpret.load_cells(path, tile_size=None).items():
            out[tid] = {c.cell_id: (c.class_label, list(c.polygon)) for c in interpret.remap_cancer(cells)}
        return out
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            poly = [tuple(float(v) for v in pt.split()) for pt in row["polygon"].split(";") if pt.strip()]
            cls = interpret.normalize_class(row["class"])
            out.setdefault(row.get("tile_id", ""), {})[row["cell_id"]] = ("epithelial" if cls == "cancer" else cls, poly)
    return out


def _instance_records(pred_path: str, gt_path: str) -> list[tuple[str | None, str | None, float]]:
    """One record per detection outcome: (pred class, gt class, IoU); None marks an unmatched side."""
    pred, gt = _read_instances(pred_path), _read_instances(gt_path)
    recs = []
    for tid in sorted(set(pred) | set(gt)):
        p, g = pred.get(tid, {}), gt.get(tid, {})
        m = metrics.match_instances({k: v[1] for k, v in p.items()}, {k: v[1] for k, v in g.items()})
        recs += [(p[pi][0], g[gi][0], iou) for pi, gi, iou in m.pairs]
        recs += [(p[pi][0], None, 0.0) for pi in m.unmatched_pred]
        recs += [(None, g[gi][0], 0.0) for gi in m.unmatched_gt]
    return recs


def _pq_from_records(recs) -> tuple[float, float, float]:
    m = metrics.MatchResult([(i, i, r[2]) for i, r in enumerate(recs) if r[0] is not None and r[1] is not None],
                            [i for i, r in enumerate(recs) if r[1] is None], [i for i, r in enumerate(recs) if r[0] is None])
    return metrics.pq_dq_sq(m)


def _f1_from_records(recs) -> dict[str, float]:
    pred = {i: r[0] for i, r in enumerate(recs) if r[0] is not None}
    gt = {i: r[1] for i, r in enumerate(recs) if r[1] is not None}
    m = metrics.MatchResult([(i, i, r[2]) for i, r in enumerate(recs) if r[0] is not None and r[1] is not None])
    return metrics.f1_per_class(pred, gt, m)


def cmd_eval(a) -> None:
    seed = resolve_seed(a.seed)
    doc: dict = {"metric": a.metric, "bootstrap": a.bootstrap, "level": a.level, "seed": seed}

    def ci(stat, sample):
        if a.bootstrap <= 0:
            return {"value": float(stat(*sample) if isinstance(sample, tuple) else stat(sample))}
        v, lo, hi = metrics.bootstrap_ci(stat, sample, a.bootstrap, a.level, seed)
        return {"value": v, "ci": [lo, hi]}

    if a.metric in ("auc", "ap", "pearson"):
        pred = _read_two_col(a.pred, "score")
        gt = _read_two_col(a.gt, "label" if a.metric != "pearson" else None)
        ids = sorted(set(pred) & set(gt))
        if not ids:
            raise ValueError("no ids shared between --pred and --gt")
        x = np.array([float(pred[i]) for i in ids])
        y = np.array([float(gt[i]) for i in ids])
        doc["n"] = len(ids)
        if a.metric == "pearson":
            r, p = metrics.pearson(x, y)
            doc.update(ci(lambda u, v: metrics.pearson(u, v)[0], (x, y)))
            doc["value"], doc["p_value"] = r, p
        else:
            fn = metrics.roc_auc if a.metric == "auc" else metrics.average_precision
            doc.update(ci(fn, (x, y.astype(int))))
    else:
        recs = _instance_records(a.pred, a.gt)
        doc["n"] = len(recs)
        sample = np.array(recs, dtype=object)
        if a.metric == "pq":
            names = ("pq", "dq", "sq")
            for k, name in enumerate(names):
                doc[name] = ci(lambda s, k=k: _pq_from_records(list(s))[k], sample)
        else:
            classes = sorted(_f1_from_records(recs))
            doc["f1"] = {c: ci(lambda s, c=c: _f1_from_records(list(s)).get(c, float("nan")), sample) for c in classes}
    _out_json(doc)


def cmd_report(a) -> None:
    seed = resolve_seed(a.seed)
    rows = interpret.read_feature_rows(a.features) if a.features else []
    pr = None
    if a.scores:
        with open(a.scores, newline="") as fh:
            reader = csv.DictReader(fh)
            cols = reader.fieldnames or []
            data = list(reader)
        if "label" in cols and "score" in cols:
            data = [d for d in data if d["label"] != ""]
            pr = (np.array([float(d["score"]) for d in data]), np.array([int(d["label"]) for d in data]))
        else:
            log.warning("%s has no label column; PR curve skipped", a.scores)
    out = Path(a.out)
    written = report.write_report(rows, out, pr)
    inputs = {k: v for k, v in (("features", a.features), ("scores", a.scores)) if v}
    report.write_run_manifest(out / "run_manifest.json", {"run": seed}, inputs, written, base=out)
    _out_json({"written": [p.name for p in written] + ["run_manifest.json"], "out": str(out)})


def cmd_pipeline(a) -> None:
    overrides = {"run.threads": a.threads, "extremes.n": a.n_extremes, "chowder.n_epochs": a.epochs}
    cfg = _config_from_args(a, overrides)
    if a.manifest:
        cfg.data.manifest = a.manifest
    out = pipeline.run_pipeline(cfg, a.out or cfg.run.out_dir)
    _out_json({"run_dir": str(out)})


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="imilia", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"imilia {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.set_defaults(func=fn)
        sp.add_argument("-v", "--verbose", action="count", default=0)
        return sp

    s = add("synth", cmd_synth, "write a synthetic cohort (and optional interpretability inputs)")
    s.add_argument("--out", required=True)
    s.add_argument("--n-slides", type=int, default=50)
    s.add_argument("--min-tiles", type=int, default=60)
    s.add_argument("--max-tiles", type=int, default=200)
    s.add_argument("--d", type=int, default=32)
    s.add_argument("--separation", type=float, default=6.0)
    s.add_argument("--signal-frac", type=float, default=0.2)
    s.add_argument("--prevalence", type=float, default=0.5)
    s.add_argument("--cohort", default="synthetic")
    s.add_argument("--interpret", action="store_true", help="also write cells, patch grids, EpiSeg pairs and pipeline.toml")
    s.add_argument("--d-patch", type=int, default=8)
    s.add_argument("--episeg-images", type=int, default=6)
    s.add_argument("--seed", type=int)

    s = add("preprocess", cmd_preprocess, "tissue mask and tile manifest for one image")
    s.add_argument("--image", required=True)
    s.add_argument("--tile-size", type=int, default=224)
    s.add_argument("--min-tissue-frac", type=float, default=0.5)
    s.add_argument("--mpp", type=float, default=0.5)
    s.add_argument("--downsample", type=int, default=1)
    s.add_argument("--out", required=True)

    s = add("train", cmd_train, "cross-validated Chowder training")
    s.add_argument("--manifest", required=True)
    s.add_argument("--folds", type=int)
    s.add_argument("--epochs", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--config")
    s.add_argument("--threads", type=int)
    s.add_argument("--out", required=True)

    s = add("infer", cmd_infer, "ensemble inference, writes a tile score table")
    s.add_argument("--models", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--scores-out", required=True)
    s.add_argument("--predictions-out")

    s = add("extremes", cmd_extremes, "cohort-wide max or min tiles from a score table")
    s.add_argument("--scores", required=True)
    s.add_argument("--n", type=int, default=1000)
    s.add_argument("--side", choices=("max", "min"), required=True)

    s = add("episeg-train", cmd_episeg_train, "fit the patch-level epithelium classifier")
    s.add_argument("--pairs", required=True)
    s.add_argument("--grid", default="1e-2")
    s.add_argument("--folds", type=int, default=3)
    s.add_argument("--patch-size", type=int, default=14)
    s.add_argument("--seed", type=int)
    s.add_argument("--out", default="episeg_model.json")

    s = add("episeg-infer", cmd_episeg_infer, "epithelium probability maps and masks for patch grids")
    s.add_argument("--model", required=True)
    s.add_argument("--tiles", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--threshold", type=float, default=0.5)
    s.add_argument("--patch-size", type=int, default=14)
    s.add_argument("--tile-size", type=int, default=1022)
    s.add_argument("--crop-tile-size", type=int, default=224)
    s.add_argument("--full", action="store_true", help="keep the whole grid instead of the centre crop")

    s = add("features", cmd_features, "per-tile cell counts and in-epithelium densities")
    s.add_argument("--cells", required=True)
    s.add_argument("--masks", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--tile-size", type=int, default=224)
    s.add_argument("--side", default="")
    s.add_argument("--out", required=True)

    s = add("eval", cmd_eval, "metrics with bootstrap confidence intervals")
    s.add_argument("--pred", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--metric", choices=("auc", "ap", "pearson", "f1", "pq"), required=True)
    s.add_argument("--bootstrap", type=int, default=1000)
    s.add_argument("--level", type=float, default=0.95)
    s.add_argument("--seed", type=int)

    s = add("report", cmd_report, "composition table, violin plots, PR curve and run manifest")
    s.add_argument("--features")
    s.add_argument("--scores")
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)

    s = add("pipeline", cmd_pipeline, "run every stage end to end")
    s.add_argument("--config")
    s.add_argument("--manifest")
    s.add_argument("--seed", type=int)
    s.add_argument("--epochs", type=int)
    s.add_argument("--n-extremes", type=int)
    s.add_argument("--threads", type=int)
    s.add_argument("--out")
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _setup_logging(args.verbose)
    try:
        args.func(args)
    except pipeline.StageError as exc:
        print("imilia-error: " + json.dumps({"command": args.command, "stage": exc.stage, "input_digest": exc.digest,
                                              "error": type(exc.cause).__name__, "message": str(exc.cause)}), file=sys.stderr)
        return 1
    except (ConfigError, ValueError, OSError, KeyError, ArithmeticError) as exc:
        print("imilia-error: " + json.dumps({"command": args.command, "error": type(exc).__name__, "message": str(exc)}),
              file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
