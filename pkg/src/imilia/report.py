"""Result tables and plots: min/max composition, violin plots, PR curve, run manifest.

All graphics are hand-written SVG so that output bytes depend only on inputs.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence
from xml.sax.saxutils import escape

import numpy as np

from . import __version__
from .interpret import COUNT_CLASSES, DENSITY_CLASSES, TileFeatureRow
from .metrics import average_precision, pr_curve

SIDES = ("min", "max")
COUNT_FEATURES = tuple(f"count_{c}" for c in COUNT_CLASSES)
DENSITY_FEATURES = tuple(f"density_{c}" for c in DENSITY_CLASSES)
KDE_POINTS = 512
KDE_PAD = 4.0   # support extends this many bandwidths past the data
SIDE_COLORS = {"min": "#4C72B0", "max": "#C44E52"}


def feature_value(row: TileFeatureRow, feature: str) -> float:
    kind, cls = feature.split("_", 1)
    if kind == "count":
        return float(row.counts.get(cls, 0))
    return float(row.densities.get(cls, 0.0))


def _stats(values: np.ndarray) -> dict[str, float]:
    q1, med, q3 = np.percentile(values, [25, 50, 75])
    return {"n": int(values.size), "mean": float(values.mean()), "median": float(med),
            "q1": float(q1), "q3": float(q3)}


def composition_table(rows: Sequence[TileFeatureRow],
                      features: Sequence[str] = COUNT_FEATURES + DENSITY_FEATURES) -> list[dict]:
    """Per (cohort, side, feature) n / mean / median / quartiles, sorted by key."""
    if not rows:
        raise ValueError("no feature rows")
    groups: dict[tuple[str, str], list[TileFeatureRow]] = {}
    for r in rows:
        groups.setdefault((r.cohort, r.side), []).append(r)
    out = []
    for (cohort, side) in sorted(groups):
        members = groups[(cohort, side)]
        for f in features:
            vals = np.array([feature_value(r, f) for r in members])
            out.append({"cohort": cohort, "side": side, "feature": f, **_stats(vals)})
    return out


def write_composition(table: Sequence[dict], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cols = ["cohort", "side", "feature", "n", "mean", "median", "q1", "q3"]
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, cols, lineterminator="\n")
        w.writeheader()
        for row in table:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    return path


# ---------------------------------------------------------------------------
# violins


@dataclass
class ViolinSpec:
    cohort: str
    side: str
    feature: str
    values: np.ndarray
    median: float = math.nan
    q1: float = math.nan
    q3: float = math.nan
    bandwidth: float = 0.0
    support: np.ndarray = field(default_factory=lambda: np.zeros(0))
    density: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def has_kde(self) -> bool:
        return self.density.size > 0


def silverman_bandwidth(values: np.ndarray) -> float:
    n = values.size
    sd = values.std(ddof=1)
    iqr = np.subtract(*np.percentile(values, [75, 25]))
    spread = min(sd, iqr / 1.34) if iqr > 0 else sd
    return float(0.9 * spread * n ** (-0.2))


def make_violin(cohort: str, side: str, feature: str, values: Iterable[float]) -> ViolinSpec:
    """Summary plus a Gaussian KDE (Silverman bandwidth) on a fixed grid.

    Groups with fewer than two values or zero spread get no KDE and are drawn
    as a box glyph.
    """
    v = np.asarray(list(values), dtype=np.float64)
    spec = ViolinSpec(cohort, side, feature, v)
    if v.size == 0:
        return spec
    spec.q1, spec.median, spec.q3 = (float(x) for x in np.percentile(v, [25, 50, 75]))
    if v.size < 2:
        return spec
    h = silverman_bandwidth(v)
    if not h > 0:
        return spec
    grid = np.linspace(v.min() - KDE_PAD * h, v.max() + KDE_PAD * h, KDE_POINTS)
    z = (grid[:, None] - v[None, :]) / h
    dens = np.exp(-0.5 * z * z).sum(axis=1) / (v.size * h * math.sqrt(2 * math.pi))
    spec.bandwidth, spec.support, spec.density = h, grid, dens
    return spec


def violin_specs(rows: Sequence[TileFeatureRow], features: Sequence[str]) -> list[ViolinSpec]:
    cohorts = sorted({r.cohort for r in rows})
    specs = []
    for cohort in cohorts:
        for f in features:
            for side in SIDES:
                vals = [feature_value(r, f) for r in rows if r.cohort == cohort and r.side == side]
                specs.append(make_violin(cohort, side, f, vals))
    return specs


def _fmt(x: float) -> str:
    return f"{x:.2f}"


def _nice_range(lo: float, hi: float) -> tuple[float, float]:
    if hi <= lo:
        pad = abs(lo) * 0.1 or 1.0
        return lo - pad, hi + pad
    pad = 0.05 * (hi - lo)
    return lo - pad, hi + pad


def render_violin(specs: Sequence[ViolinSpec], title: str = "") -> str:
    """One panel per cohort; within a panel, a min/max pair of violins per feature.

    Bodies span the observed value range of their group. Empty groups are
    omitted and listed in a note at the bottom of the figure.
    """
    cohorts = sorted({s.cohort for s in specs})
    features = list(dict.fromkeys(s.feature for s in specs))
    panel_w, panel_h, margin, top = 60 + 70 * len(features), 320, 50, 40
    width = margin + len(cohorts) * (panel_w + margin)
    omitted = [s for s in specs if s.values.size == 0]
    height = top + panel_h + 90 + 14 * (1 if omitted else 0)
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="10">',
           f'<rect width="{width}" height="{height}" fill="white"/>']
    if title:
        out.append(f'<text x="{width / 2:.1f}" y="16" text-anchor="middle" font-size="13">{escape(title)}</text>')
    for p, cohort in enumerate(cohorts):
        x0 = margin + p * (panel_w + margin)
        panel = [s for s in specs if s.cohort == cohort and s.values.size]
        vals = np.concatenate([s.values for s in panel]) if panel else np.array([0.0, 1.0])
        lo, hi = _nice_range(float(vals.min()), float(vals.max()))
        max_dens = max((float(s.density.max()) for s in panel if s.has_kde), default=1.0)

        def ypos(v):
            return top + panel_h - (v - lo) / (hi - lo) * panel_h

        out.append(f'<g class="panel" data-cohort="{escape(cohort)}">')
        out.append(f'<rect x="{x0}" y="{top}" width="{panel_w}" height="{panel_h}" fill="none" stroke="#888"/>')
        out.append(f'<text x="{x0 + panel_w / 2:.1f}" y="{top - 6}" text-anchor="middle" font-size="12">{escape(cohort or "all")}</text>')
        for t in np.linspace(lo, hi, 5):
            out.append(f'<text x="{x0 - 4}" y="{ypos(t) + 3:.2f}" text-anchor="end">{t:.3g}</text>')
        for fi, feat in enumerate(features):
            for si, side in enumerate(SIDES):
                s = next((q for q in panel if q.feature == feat and q.side == side), None)
                if s is None:
                    continue
                cx = x0 + 40 + fi * 70 + si * 26
                group = f"{cohort}|{feat}|{side}"
                color = SIDE_COLORS.get(side, "#666")
                if s.has_kde:
                    keep = (s.support >= s.values.min()) & (s.support <= s.values.max())
                    ys = np.concatenate([[s.values.min()], s.support[keep], [s.values.max()]])
                    ds = np.interp(ys, s.support, s.density) / max_dens * 12.0
                    right = [f"{cx + d:.2f},{ypos(y):.2f}" for y, d in zip(ys, ds)]
                    left = [f"{cx - d:.2f},{ypos(y):.2f}" for y, d in zip(ys[::-1], ds[::-1])]
                    out.append(f'<path class="violin" data-group="{escape(group)}" d="M{" L".join(right + left)} Z" '
                               f'fill="{color}" fill-opacity="0.5" stroke="{color}"/>')
                else:
                    y_top, y_bot = ypos(float(s.values.max())), ypos(float(s.values.min()))
                    out.append(f'<rect class="box" data-group="{escape(group)}" x="{cx - 6:.2f}" y="{y_top:.2f}" '
                               f'width="12" height="{max(y_bot - y_top, 1.0):.2f}" fill="{color}" fill-opacity="0.5" stroke="{color}"/>')
                out.append(f'<line x1="{cx - 4:.2f}" x2="{cx + 4:.2f}" y1="{ypos(s.median):.2f}" y2="{ypos(s.median):.2f}" stroke="black"/>')
            lx = x0 + 40 + fi * 70 + 13
            out.append(f'<text x="{lx:.1f}" y="{top + panel_h + 12}" text-anchor="end" '
                       f'transform="rotate(-40 {lx:.1f} {top + panel_h + 12})">{escape(feat.split("_", 1)[1])}</text>')
        out.append("</g>")
    ly = top + panel_h + 70
    for i, side in enumerate(SIDES):
        out.append(f'<rect x="{margin + i * 80}" y="{ly - 9}" width="10" height="10" fill="{SIDE_COLORS[side]}" fill-opacity="0.5"/>')
        out.append(f'<text x="{margin + i * 80 + 14}" y="{ly}">{side} tiles</text>')
    if omitted:
        names = ", ".join(f"{s.cohort}/{s.feature}/{s.side}" for s in omitted)
        out.append(f'<text class="note" x="{margin}" y="{ly + 16}">omitted (no values): {escape(names)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


# ---------------------------------------------------------------------------
# precision-recall


def render_pr_curve(scores, labels, title: str = "Precision-recall") -> tuple[str, str]:
    """(SVG, CSV) of the step-wise PR curve, one point per distinct score threshold."""
    labels = np.asarray(labels)
    if labels.size == 0 or labels.min() == labels.max():
        raise ValueError("PR curve needs both classes")
    thr, rec, prec = pr_curve(scores, labels)
    ap = average_precision(scores, labels)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["threshold", "recall", "precision"])
    for row in zip(thr.tolist(), rec.tolist(), prec.tolist()):
        w.writerow([repr(v) for v in row])

    size, m = 320, 45

    def px(r, p):
        return f"{m + r * size:.2f},{m + (1 - p) * size:.2f}"

    # step curve: precision holds from the previous recall to the current one
    pts = [px(0.0, float(prec[0]))]
    prev_r = 0.0
    for r, p in zip(rec.tolist(), prec.tolist()):
        pts.append(px(prev_r, p))
        pts.append(px(r, p))
        prev_r = r
    W, H = size + 2 * m, size + 2 * m
    svg = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" '
           f'font-family="sans-serif" font-size="10">',
           f'<rect width="{W}" height="{H}" fill="white"/>',
           f'<text x="{W / 2:.1f}" y="18" text-anchor="middle" font-size="13">{escape(title)}</text>',
           f'<rect x="{m}" y="{m}" width="{size}" height="{size}" fill="none" stroke="#888"/>']
    for t in np.linspace(0, 1, 6):
        svg.append(f'<text x="{m + t * size:.1f}" y="{m + size + 14}" text-anchor="middle">{t:.1f}</text>')
        svg.append(f'<text x="{m - 5}" y="{m + (1 - t) * size + 3:.1f}" text-anchor="end">{t:.1f}</text>')
    svg.append(f'<text x="{m + size / 2}" y="{H - 6}" text-anchor="middle">recall</text>')
    svg.append(f'<text x="12" y="{m + size / 2}" text-anchor="middle" transform="rotate(-90 12 {m + size / 2})">precision</text>')
    svg.append(f'<polyline class="pr" fill="none" stroke="#C44E52" stroke-width="1.5" points="{" ".join(pts)}"/>')
    svg.append(f'<text class="legend" x="{m + size - 6}" y="{m + 16}" text-anchor="end">AP = {ap:.3f}</text>')
    svg.append("</svg>")
    return "\n".join(svg) + "\n", buf.getvalue()


# ---------------------------------------------------------------------------
# run manifest


def file_digest(path: str | Path) -> str:
    h = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_run_manifest(path: str | Path, seeds: Mapping[str, int], inputs: Mapping[str, str | Path],
                       outputs: Sequence[str | Path], base: str | Path | None = None, extra: Mapping | None = None) -> Path:
    """JSON record of tool version, seeds and sha256 digests; no timestamps so reruns compare equal."""
    path = Path(path)
    base = Path(base) if base is not None else path.parent

    def name(p):
        p = Path(p)
        try:
            return p.resolve().relative_to(base.resolve()).as_posix()
        except ValueError:
            return p.name

    doc = {
        "tool": "imilia",
        "version": __version__,
        "seeds": dict(sorted(seeds.items())),
        "inputs": {k: {"path": name(v), "sha256": file_digest(v)} for k, v in sorted(inputs.items()) if Path(v).is_file()},
        "outputs": {name(p): file_digest(p) for p in sorted(map(Path, outputs)) if p.is_file()},
    }
    if extra:
        doc["info"] = dict(extra)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


def write_report(rows: Sequence[TileFeatureRow] | None, out_dir: str | Path,
                 pr: tuple[Sequence[float], Sequence[int]] | None = None, pr_title: str = "Precision-recall") -> list[Path]:
    """composition.csv, violin_counts.svg, violin_densities.svg and pr_curve.svg/.csv as available."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    if rows:
        written.append(write_composition(composition_table(rows), out_dir / "composition.csv"))
        for name, feats, title in (("counts", COUNT_FEATURES, "Cell types in min / max tiles"),
                                   ("densities", DENSITY_FEATURES, "Cell density in epithelium (cells / um2)")):
            p = out_dir / f"violin_{name}.svg"
            p.write_text(render_violin(violin_specs(rows, feats), title))
            written.append(p)
    if pr is not None:
        svg, table = render_pr_curve(pr[0], pr[1], pr_title)
        (out_dir / "pr_curve.svg").write_text(svg)
        (out_dir / "pr_curve.csv").write_text(table)
        written += [out_dir / "pr_curve.svg", out_dir / "pr_curve.csv"]
    return written
