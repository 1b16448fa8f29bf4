"""Multi-channel Chowder: linear tile scoring, extreme-score selection and an MLP head.

Everything is plain numpy with a hand-written backward pass. A slide is a bag
of tile embeddings ``X`` (n_tiles x d); K parallel linear scorers give an
(n_tiles x K) score matrix, each channel keeps its r largest (descending) and
r smallest (ascending) scores, and the concatenation of the 2rK kept scores is
fed to an MLP producing a single logit.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .ingest import DataError, FeatureMatrix, FoldAssignment, SlideRecord, load_features
from .metrics import MetricError, roc_auc

log = logging.getLogger(__name__)

MODEL_FORMAT = "imilia-chowder"
ENSEMBLE_ID = "ensemble"
_SCORE_CHUNK = 2048


@dataclass
class ChowderConfig:
    K: int = 5
    r: int = 25
    mlp_hidden: tuple[int, ...] = (128, 64)
    mlp_dropout: tuple[float, ...] = (0.5, 0.5)
    lr: float = 0.01
    batch_size: int = 256
    max_tiles: int = 1000
    n_epochs: int = 30
    seed: int = 0
    standardize: bool = False

    def __post_init__(self):
        self.mlp_hidden = tuple(int(h) for h in self.mlp_hidden)
        self.mlp_dropout = tuple(float(p) for p in self.mlp_dropout)
        if self.K < 1 or self.r < 1:
            raise ValueError("K and r must be >= 1")
        if len(self.mlp_dropout) != len(self.mlp_hidden):
            raise ValueError("mlp_dropout must have one entry per hidden layer")
        if any(not 0.0 <= p < 1.0 for p in self.mlp_dropout):
            raise ValueError("dropout probabilities must lie in [0, 1)")
        if any(h < 1 for h in self.mlp_hidden):
            raise ValueError("hidden widths must be >= 1")
        if self.lr <= 0 or self.batch_size < 1 or self.max_tiles < 1 or self.n_epochs < 1:
            raise ValueError("lr, batch_size, max_tiles and n_epochs must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mlp_hidden"] = list(self.mlp_hidden)
        d["mlp_dropout"] = list(self.mlp_dropout)
        return d


def _layer_names(n_hidden: int) -> list[str]:
    return [f"fc{i}" for i in range(n_hidden)] + ["out"]


@dataclass
class ChowderModel:
    config: ChowderConfig
    d: int
    params: dict[str, np.ndarray]
    # per-dimension input standardization, identity when config.standardize is off
    input_mean: np.ndarray | None = None
    input_std: np.ndarray | None = None
    seed: int = 0

    @classmethod
    def init(cls, config: ChowderConfig, d: int, rng: np.random.Generator) -> "ChowderModel":
        """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) init for every weight and bias."""
        params: dict[str, np.ndarray] = {}
        bound = 1.0 / math.sqrt(d)
        params["score_w"] = rng.uniform(-bound, bound, size=(d, config.K))
        params["score_b"] = rng.uniform(-bound, bound, size=config.K)
        fan_in = 2 * config.r * config.K
        for name, width in zip(_layer_names(len(config.mlp_hidden)), [*config.mlp_hidden, 1]):
            bound = 1.0 / math.sqrt(fan_in)
            params[f"{name}_w"] = rng.uniform(-bound, bound, size=(fan_in, width))
            params[f"{name}_b"] = rng.uniform(-bound, bound, size=width)
            fan_in = width
        return cls(config, d, params, seed=config.seed)

    @property
    def param_names(self) -> list[str]:
        return ["score_w", "score_b"] + [f"{n}_{p}" for n in _layer_names(len(self.config.mlp_hidden)) for p in "wb"]

    def copy(self) -> "ChowderModel":
        return ChowderModel(self.config, self.d, {k: v.copy() for k, v in self.params.items()},
                            None if self.input_mean is None else self.input_mean.copy(),
                            None if self.input_std is None else self.input_std.copy(), self.seed)

    def prepare(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.d:
            raise ValueError(f"expected (n_tiles, {self.d}) embeddings, got {X.shape}")
        if X.shape[0] < 1:
            raise ValueError("a slide needs at least one tile")
        if self.input_mean is not None:
            X = (X - self.input_mean) / self.input_std
        return X


# ---------------------------------------------------------------------------
# forward / backward


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def tile_scores(model: ChowderModel, X: np.ndarray) -> np.ndarray:
    """(n_tiles, K) scores; each row is computed with the same summation order.

    A broadcast product summed over the embedding axis is used instead of a
    BLAS matmul so that a tile's score does not depend on its row position.
    """
    w, b = model.params["score_w"], model.params["score_b"]
    out = np.empty((X.shape[0], w.shape[1]))
    for start in range(0, X.shape[0], _SCORE_CHUNK):
        chunk = X[start:start + _SCORE_CHUNK]
        out[start:start + _SCORE_CHUNK] = (chunk[:, :, None] * w[None, :, :]).sum(axis=1) + b
    return out


def select_extremes(scores: np.ndarray, r: int) -> np.ndarray:
    """Tile indices of the kept scores, shape (K, 2r).

    Row k is [top r of channel k, descending] + [bottom r, ascending]. Ties go
    to the lower tile index. With fewer than r tiles each half is padded by
    repeating its most extreme entry.
    """
    n, K = scores.shape
    m = min(r, n)
    idx = np.empty((K, 2 * r), dtype=np.int64)
    for k in range(K):
        s = scores[:, k]
        top = np.argsort(-s, kind="stable")[:m]
        bottom = np.argsort(s, kind="stable")[:m]
        if m < r:
            top = np.concatenate([np.full(r - m, top[0]), top])
            bottom = np.concatenate([np.full(r - m, bottom[0]), bottom])
        idx[k, :r] = top
        idx[k, r:] = bottom
    return idx


@dataclass
class _Cache:
    X: np.ndarray
    scores: np.ndarray
    idx: np.ndarray
    acts: list[np.ndarray]      # input to each linear layer
    sigs: list[np.ndarray]      # hidden sigmoid outputs before dropout
    masks: list[np.ndarray | None]
    logit: float


def _forward(model: ChowderModel, X: np.ndarray, train_mode: bool, rng: np.random.Generator | None) -> _Cache:
    cfg = model.config
    scores = tile_scores(model, X)
    idx = select_extremes(scores, cfg.r)
    h = scores[idx, np.arange(cfg.K)[:, None]].ravel()
    acts, sigs, masks = [], [], []
    for i, name in enumerate(_layer_names(len(cfg.mlp_hidden))[:-1]):
        acts.append(h)
        h = sigmoid(h @ model.params[f"{name}_w"] + model.params[f"{name}_b"])
        sigs.append(h)
        p = cfg.mlp_dropout[i]
        mask = None
        if train_mode and p > 0:
            if rng is None:
                raise ValueError("train_mode forward needs an rng for dropout")
            mask = (rng.random(h.shape) >= p) / (1.0 - p)
            h = h * mask
        masks.append(mask)
    acts.append(h)
    logit = float(h @ model.params["out_w"][:, 0] + model.params["out_b"][0])
    return _Cache(X, scores, idx, acts, sigs, masks, logit)


def forward(model: ChowderModel, W: FeatureMatrix | np.ndarray, train_mode: bool = False,
            rng: np.random.Generator | None = None) -> tuple[float, np.ndarray]:
    """(logit, per-tile scores of shape (n_tiles, K))."""
    X = model.prepare(W.data if isinstance(W, FeatureMatrix) else W)
    c = _forward(model, X, train_mode, rng)
    return c.logit, c.scores


def loss(logit: float, label: int) -> float:
    """Sigmoid binary cross-entropy, log(1 + exp(-z)) for y=1 and log(1 + exp(z)) for y=0."""
    if label not in (0, 1):
        raise ValueError("label must be 0 or 1")
    z = -logit if label == 1 else logit
    return max(z, 0.0) + math.log1p(math.exp(-abs(z)))


def _backward(model: ChowderModel, c: _Cache, label: int) -> dict[str, np.ndarray]:
    cfg = model.config
    names = _layer_names(len(cfg.mlp_hidden))
    grads: dict[str, np.ndarray] = {}
    g = np.array([float(sigmoid(c.logit)) - label])   # dL/dlogit
    for i in range(len(names) - 1, -1, -1):
        a = c.acts[i]
        grads[f"{names[i]}_w"] = np.outer(a, g)
        grads[f"{names[i]}_b"] = g.copy()
        g = model.params[f"{names[i]}_w"] @ g
        if i > 0:
            if c.masks[i - 1] is not None:
                g = g * c.masks[i - 1]
            sig = c.sigs[i - 1]
            g = g * sig * (1.0 - sig)
    # g is now dL/d(selected scores), laid out channel-major (K, 2r)
    g_sel = g.reshape(cfg.K, 2 * cfg.r)
    d_scores = np.zeros_like(c.scores)
    for k in range(cfg.K):
        np.add.at(d_scores[:, k], c.idx[k], g_sel[k])
    rows = np.flatnonzero(d_scores.any(axis=1))
    grads["score_w"] = c.X[rows].T @ d_scores[rows]
    grads["score_b"] = d_scores.sum(axis=0)
    return grads


def backward(model: ChowderModel, W: FeatureMatrix | np.ndarray, label: int, train_mode: bool = False,
             rng: np.random.Generator | None = None) -> tuple[float, dict[str, np.ndarray]]:
    """(loss, gradients) for one slide.

    The extreme-score selection is treated as a fixed index set at the
    current parameters, so only selected tiles receive gradient.
    """
    X = model.prepare(W.data if isinstance(W, FeatureMatrix) else W)
    c = _forward(model, X, train_mode, rng)
    return loss(c.logit, label), _backward(model, c, label)


# ---------------------------------------------------------------------------
# optimisation


class Adam:
    def __init__(self, lr: float = 0.01, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for k in params:
            g = grads[k]
            if k not in self.m:
                self.m[k] = np.zeros_like(params[k])
                self.v[k] = np.zeros_like(params[k])
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            params[k] -= self.lr * (self.m[k] / bc1) / (np.sqrt(self.v[k] / bc2) + self.eps)


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    train_auc: float
    valid_loss: float
    valid_auc: float


@dataclass
class TrainResult:
    model: ChowderModel
    log: list[EpochLog]
    best_epoch: int


def _safe_auc(scores, labels) -> float:
    try:
        return roc_auc(scores, labels)
    except MetricError:
        return float("nan")


def _features_for(records: Sequence[SlideRecord], cache: dict[str, np.ndarray] | None) -> dict[str, np.ndarray]:
    out = {}
    for r in records:
        if cache is not None and r.slide_id in cache:
            out[r.slide_id] = cache[r.slide_id]
        else:
            out[r.slide_id] = np.asarray(load_features(r).data, dtype=np.float64)
            if cache is not None:
                cache[r.slide_id] = out[r.slide_id]
    return out


def _round_f32(model: ChowderModel) -> ChowderModel:
    m = model.copy()
    m.params = {k: v.astype(np.float32).astype(np.float64) for k, v in m.params.items()}
    if m.input_mean is not None:
        m.input_mean = m.input_mean.astype(np.float32).astype(np.float64)
        m.input_std = m.input_std.astype(np.float32).astype(np.float64)
    return m


def predict_logits(model: ChowderModel, feats: Mapping[str, np.ndarray], ids: Sequence[str]) -> np.ndarray:
    return np.array([_forward(model, model.prepare(feats[s]), False, None).logit for s in ids])


def train_fold(train: Sequence[SlideRecord], valid: Sequence[SlideRecord], cfg: ChowderConfig,
               features: dict[str, np.ndarray] | None = None, stream: int = 0) -> TrainResult:
    """Train one model with Adam on ``train``; keep the epoch with the best validation AUC.

    Each epoch shuffles the training slides, subsamples every slide to at
    most ``cfg.max_tiles`` tiles (without replacement) and takes one Adam step
    per mini-batch of ``cfg.batch_size`` slides on the mean slide loss.
    Validation uses all tiles with dropout off. ``stream`` separates the random
    streams of models sharing ``cfg.seed`` (e.g. CV folds).

    The returned parameters are rounded to float32, the precision of the
    model file, so in-memory and reloaded predictions agree exactly.
    """
    train = [r for r in train if r.label is not None]
    labels = np.array([r.label for r in train])
    if len(train) == 0 or len(set(labels.tolist())) < 2:
        raise DataError("training set must contain both classes")
    valid = [r for r in valid if r.label is not None]
    feats = _features_for([*train, *valid], features)
    d = next(iter(feats.values())).shape[1]

    init_rng = np.random.default_rng([cfg.seed, stream, 0])
    data_rng = np.random.default_rng([cfg.seed, stream, 1])
    drop_rng = np.random.default_rng([cfg.seed, stream, 2])
    model = ChowderModel.init(cfg, d, init_rng)
    if cfg.standardize:
        allx = np.concatenate([feats[r.slide_id] for r in train])
        model.input_mean = allx.mean(axis=0)
        model.input_std = np.where(allx.std(axis=0) > 0, allx.std(axis=0), 1.0)
    prepared = {s: model.prepare(x) for s, x in feats.items()}
    opt = Adam(cfg.lr)

    v_ids = [r.slide_id for r in valid]
    v_labels = np.array([r.label for r in valid])
    best, best_key, best_epoch, history = model.copy(), None, 0, []
    for epoch in range(1, cfg.n_epochs + 1):
        order = data_rng.permutation(len(train))
        ep_logits = np.empty(len(train))
        ep_losses = np.empty(len(train))
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            acc = {k: np.zeros_like(v) for k, v in model.params.items()}
            for i in batch:
                X = prepared[train[i].slide_id]
                if X.shape[0] > cfg.max_tiles:
                    X = X[np.sort(data_rng.choice(X.shape[0], cfg.max_tiles, replace=False))]
                c = _forward(model, X, True, drop_rng)
                for k, g in _backward(model, c, int(labels[i])).items():
                    acc[k] += g
                ep_logits[i] = c.logit
                ep_losses[i] = loss(c.logit, int(labels[i]))
            opt.step(model.params, {k: g / len(batch) for k, g in acc.items()})
        if v_ids:
            v_logits = predict_logits(model, prepared, v_ids)
            v_loss = float(np.mean([loss(z, int(y)) for z, y in zip(v_logits, v_labels)]))
            v_auc = _safe_auc(v_logits, v_labels)
        else:
            v_loss = v_auc = float("nan")
        entry = EpochLog(epoch, float(ep_losses.mean()), _safe_auc(ep_logits, labels), v_loss, v_auc)
        history.append(entry)
        log.debug("epoch %d train_loss=%.4f valid_loss=%.4f valid_auc=%.4f", epoch, entry.train_loss, v_loss, v_auc)
        # best validation AUC, then lowest validation loss; earliest epoch on ties
        if not v_ids:
            key = (epoch,)
        else:
            key = (-math.inf if math.isnan(v_auc) else v_auc, -v_loss)
        if best_key is None or key > best_key:
            best, best_key, best_epoch = model.copy(), key, epoch
    return TrainResult(_round_f32(best), history, best_epoch)


@dataclass
class CVResult:
    models: list[ChowderModel]
    oof: dict[str, float] = field(default_factory=dict)   # slide_id -> out-of-fold probability
    logs: list[list[EpochLog]] = field(default_factory=list)

    def auc(self, dataset: Sequence[SlideRecord]) -> float:
        lab = {r.slide_id: r.label for r in dataset}
        ids = sorted(self.oof)
        return roc_auc([self.oof[s] for s in ids], [lab[s] for s in ids])


def _fold_job(args):
    f, tr, va, cfg, feats = args
    res = train_fold(tr, va, cfg, feats, stream=f)
    logits = predict_logits(res.model, {s: res.model.prepare(feats[s]) for s in (r.slide_id for r in va)},
                            [r.slide_id for r in va])
    return res, logits


def cross_validate(dataset: Sequence[SlideRecord], folds: FoldAssignment, cfg: ChowderConfig,
                   features: dict[str, np.ndarray] | None = None, workers: int = 1) -> CVResult:
    """One model per fold, each trained without its fold and validated on it.

    Folds are independent, so ``workers > 1`` trains them in separate
    processes (0 = one per core) with results identical to a serial run.
    """
    labeled = [r for r in dataset if r.label is not None]
    missing = [r.slide_id for r in labeled if r.slide_id not in folds.assignment]
    if missing:
        raise DataError(f"slides without a fold: {missing[:5]}")
    feats = _features_for(labeled, {} if features is None else features)
    jobs = []
    for f in range(folds.n_folds):
        tr = [r for r in labeled if folds.assignment[r.slide_id] != f]
        va = [r for r in labeled if folds.assignment[r.slide_id] == f]
        jobs.append((f, tr, va, cfg, {r.slide_id: feats[r.slide_id] for r in (*tr, *va)}))
    workers = workers or os.cpu_count() or 1
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
            outcomes = list(pool.map(_fold_job, jobs))
    else:
        outcomes = [_fold_job(j) for j in jobs]
    result = CVResult([])
    for (f, _, va, _, _), (res, logits) in zip(jobs, outcomes):
        log.info("fold %d: best epoch %d, valid AUC %.4f", f, res.best_epoch, res.log[res.best_epoch - 1].valid_auc)
        for r, z in zip(va, logits):
            result.oof[r.slide_id] = float(sigmoid(z))
        result.models.append(res.model)
        result.logs.append(res.log)
    return result


# ---------------------------------------------------------------------------
# ensembling and tile-score tables


@dataclass
class TileScoreTable:
    slide_id: np.ndarray   # object arrays of str
    tile_id: np.ndarray
    channel: np.ndarray
    model_id: np.ndarray
    score: np.ndarray

    COLUMNS = ("slide_id", "tile_id", "channel", "model_id", "score")

    def __len__(self):
        return len(self.score)

    @classmethod
    def empty(cls) -> "TileScoreTable":
        e = np.array([], dtype=object)
        return cls(e, e.copy(), np.array([], dtype=np.int64), e.copy(), np.array([], dtype=np.float64))

    @classmethod
    def from_scores(cls, slide_id: str, tile_ids: Sequence[str], scores: np.ndarray, model_id: str) -> "TileScoreTable":
        n, K = scores.shape
        return cls(np.full(n * K, slide_id, dtype=object),
                   np.repeat(np.asarray(tile_ids, dtype=object), K),
                   np.tile(np.arange(K), n),
                   np.full(n * K, model_id, dtype=object),
                   scores.ravel().astype(np.float64))

    @classmethod
    def concat(cls, tables: Sequence["TileScoreTable"]) -> "TileScoreTable":
        if not tables:
            return cls.empty()
        return cls(*(np.concatenate([getattr(t, c) for t in tables]) for c in cls.COLUMNS))

    def select(self, mask: np.ndarray) -> "TileScoreTable":
        return TileScoreTable(*(getattr(self, c)[mask] for c in self.COLUMNS))

    def for_slides(self, slide_ids) -> "TileScoreTable":
        return self.select(np.isin(self.slide_id, list(slide_ids)))

    def to_csv(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.COLUMNS)
            for row in zip(self.slide_id, self.tile_id, self.channel.tolist(), self.model_id, self.score.tolist()):
                w.writerow([row[0], row[1], row[2], row[3], repr(row[4])])
        return path

    @classmethod
    def from_csv(cls, path: str | Path) -> "TileScoreTable":
        cols: dict[str, list] = {c: [] for c in cls.COLUMNS}
        with Path(path).open(newline="") as fh:
            reader = csv.DictReader(fh)
            if tuple(reader.fieldnames or ()) != cls.COLUMNS:
                raise DataError(f"{path}: expected columns {','.join(cls.COLUMNS)}")
            for row in reader:
                for c in cls.COLUMNS:
                    cols[c].append(row[c])
        return cls(np.array(cols["slide_id"], dtype=object), np.array(cols["tile_id"], dtype=object),
                   np.array(cols["channel"], dtype=np.int64), np.array(cols["model_id"], dtype=object),
                   np.array(cols["score"], dtype=np.float64))


def ensemble_predict(models: Sequence[ChowderModel], W: FeatureMatrix, slide_id: str = "") -> tuple[float, TileScoreTable]:
    """Mean member probability and a score table with per-model and ensemble rows."""
    if not models:
        raise ValueError("ensemble_predict needs at least one model")
    if len({(m.d, m.config.K) for m in models}) != 1:
        raise ValueError("ensemble members disagree on input dim or channel count")
    probs, scores, tables = [], [], []
    for i, m in enumerate(models):
        logit, s = forward(m, W, train_mode=False)
        probs.append(float(sigmoid(logit)))
        scores.append(s)
        tables.append(TileScoreTable.from_scores(slide_id, W.tile_ids, s, str(i)))
    tables.append(TileScoreTable.from_scores(slide_id, W.tile_ids, np.mean(scores, axis=0), ENSEMBLE_ID))
    return float(np.mean(probs)), TileScoreTable.concat(tables)


def predict_dataset(models: Sequence[ChowderModel], dataset: Sequence[SlideRecord]) -> tuple[dict[str, float], TileScoreTable]:
    probs, tables = {}, []
    for r in dataset:
        p, t = ensemble_predict(models, load_features(r), r.slide_id)
        probs[r.slide_id] = p
        tables.append(t)
    return probs, TileScoreTable.concat(tables)


def extract_extremes(table: TileScoreTable, n: int = 1000, side: str = "max") -> list[tuple[str, str, float]]:
    """Cohort-wide top (side="max") or bottom (side="min") tiles.

    A tile's score is the mean over channels of its ensemble rows (or of all
    rows when the table has no ensemble rows). Ties go to the
    lexicographically smallest (slide_id, tile_id).
    """
    if side not in ("max", "min"):
        raise ValueError("side must be 'max' or 'min'")
    if len(table) == 0:
        raise ValueError("empty score table")
    ens = table.model_id == ENSEMBLE_ID
    t = table.select(ens) if ens.any() else table
    per_tile: dict[tuple[str, str], list[float]] = {}
    for s, tid, sc in zip(t.slide_id, t.tile_id, t.score.tolist()):
        per_tile.setdefault((s, tid), []).append(sc)
    items = [(key, float(np.mean(v))) for key, v in per_tile.items()]
    sign = -1.0 if side == "max" else 1.0
    items.sort(key=lambda kv: (sign * kv[1], kv[0]))
    if n > len(items):
        log.warning("requested %d %s tiles but only %d available; returning all", n, side, len(items))
    return [(k[0], k[1], v) for k, v in items[:n]]


# ---------------------------------------------------------------------------
# model files


def save_model(model: ChowderModel, path: str | Path) -> Path:
    """JSON header ``<stem>.json`` plus float32 little-endian payload ``<stem>.bin``."""
    stem = Path(path)
    stem = stem.with_suffix("") if stem.suffix in (".json", ".bin") else stem
    stem.parent.mkdir(parents=True, exist_ok=True)
    arrays = [(n, model.params[n]) for n in model.param_names]
    if model.input_mean is not None:
        arrays += [("input_mean", model.input_mean), ("input_std", model.input_std)]
    layout, offset, chunks = [], 0, []
    for name, arr in arrays:
        a = np.ascontiguousarray(arr, dtype="<f4")
        layout.append({"name": name, "shape": list(a.shape), "offset": offset})
        offset += a.size
        chunks.append(a.tobytes())
    header = {"format": MODEL_FORMAT, "dtype": "float32-le", "config": model.config.to_dict(),
              "d": model.d, "seed": model.seed, "params": layout}
    stem.with_suffix(".json").write_text(json.dumps(header, indent=2, sort_keys=True) + "\n")
    stem.with_suffix(".bin").write_bytes(b"".join(chunks))
    return stem.with_suffix(".json")


def load_model(path: str | Path) -> ChowderModel:
    stem = Path(path)
    stem = stem.with_suffix("") if stem.suffix in (".json", ".bin") else stem
    header = json.loads(stem.with_suffix(".json").read_text())
    if header.get("format") != MODEL_FORMAT:
        raise DataError(f"{stem}.json is not a Chowder model file")
    cfg_d = header["config"]
    cfg = ChowderConfig(**{**cfg_d, "mlp_hidden": tuple(cfg_d["mlp_hidden"]), "mlp_dropout": tuple(cfg_d["mlp_dropout"])})
    flat = np.frombuffer(stem.with_suffix(".bin").read_bytes(), dtype="<f4").astype(np.float64)
    arrays = {}
    for entry in header["params"]:
        size = int(np.prod(entry["shape"])) if entry["shape"] else 1
        if entry["offset"] + size > flat.size:
            raise DataError(f"{stem}.bin is truncated")
        arrays[entry["name"]] = flat[entry["offset"]:entry["offset"] + size].reshape(entry["shape"]).copy()
    mean, std = arrays.pop("input_mean", None), arrays.pop("input_std", None)
    model = ChowderModel(cfg, int(header["d"]), arrays, mean, std, int(header["seed"]))
    if set(model.param_names) != set(arrays):
        raise DataError(f"{stem}: parameter set does not match the configuration")
    return model


def save_models(models: Sequence[ChowderModel], out_dir: str | Path) -> list[Path]:
    return [save_model(m, Path(out_dir) / f"fold_{i}") for i, m in enumerate(models)]


def load_models(model_dir: str | Path) -> list[ChowderModel]:
    paths = sorted(Path(model_dir).glob("fold_*.json"), key=lambda p: int(p.stem.split("_")[1]))
    if not paths:
        raise DataError(f"no fold_*.json model files in {model_dir}")
    return [load_model(p) for p in paths]
