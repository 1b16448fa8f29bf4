"""Run configuration: one TOML file with a section per stage, CLI overrides on top."""

from __future__ import annotations

import dataclasses
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .chowder import ChowderConfig


class ConfigError(ValueError):
    pass


@dataclass
class RunSection:
    seed: int = 0
    out_dir: str = "run"
    threads: int = 0   # 0 = available cores


@dataclass
class DataSection:
    manifest: str = ""
    cells_dir: str = ""
    patch_dir: str = ""
    images_dir: str = ""
    train_cohorts: list[str] = field(default_factory=list)   # empty = every labeled slide


@dataclass
class PreprocessSection:
    enabled: bool = False
    tile_size: int = 224
    min_tissue_frac: float = 0.5
    mpp: float = 0.5
    downsample: int = 1


@dataclass
class ChowderSection:
    K: int = 5
    r: int = 25
    mlp_hidden: list[int] = field(default_factory=lambda: [128, 64])
    mlp_dropout: list[float] = field(default_factory=lambda: [0.5, 0.5])
    lr: float = 0.01
    batch_size: int = 256
    max_tiles: int = 1000
    n_epochs: int = 30
    standardize: bool = False
    n_folds: int = 5

    def to_config(self, seed: int) -> ChowderConfig:
        return ChowderConfig(K=self.K, r=self.r, mlp_hidden=tuple(self.mlp_hidden), mlp_dropout=tuple(self.mlp_dropout),
                             lr=self.lr, batch_size=self.batch_size, max_tiles=self.max_tiles,
                             n_epochs=self.n_epochs, seed=seed, standardize=self.standardize)


@dataclass
class ExtremesSection:
    n: int = 1000


@dataclass
class EpiSegSection:
    model: str = ""
    pairs_dir: str = ""
    C: float = 1e-2
    C_grid: list[float] = field(default_factory=list)
    n_folds: int = 3
    threshold: float = 0.5
    patch_size: int = 14
    tile_size: int = 1022


@dataclass
class ReportSection:
    bootstrap: int = 1000
    level: float = 0.95


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    data: DataSection = field(default_factory=DataSection)
    preprocess: PreprocessSection = field(default_factory=PreprocessSection)
    chowder: ChowderSection = field(default_factory=ChowderSection)
    extremes: ExtremesSection = field(default_factory=ExtremesSection)
    episeg: EpiSegSection = field(default_factory=EpiSegSection)
    report: ReportSection = field(default_factory=ReportSection)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @property
    def chowder_config(self) -> ChowderConfig:
        return self.chowder.to_config(self.run.seed)


_LIST_ITEM = {"mlp_hidden": int, "mlp_dropout": float, "C_grid": float, "train_cohorts": str}


def _coerce(section: str, key: str, value: Any, target: Any) -> Any:
    expected = type(target)
    if isinstance(target, bool):
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "false", "1", "0"):
            return value.lower() in ("true", "1")
    elif isinstance(target, list):
        if isinstance(value, str):
            value = [v for v in value.split(",") if v.strip()]
        if isinstance(value, list):
            try:
                return [_LIST_ITEM.get(key, str)(v) for v in value]
            except (TypeError, ValueError):
                pass
    elif isinstance(target, (int, float)) and not isinstance(value, bool):
        try:
            coerced = expected(value)
            if expected is not int or float(value) == coerced:
                return coerced
        except (TypeError, ValueError):
            pass
    elif isinstance(target, str):
        return str(value)
    raise ConfigError(f"[{section}] {key}: cannot use {value!r} as {expected.__name__}")


def from_mapping(data: Mapping[str, Any], base: RunConfig | None = None) -> RunConfig:
    cfg = base or RunConfig()
    sections = {f.name: f for f in dataclasses.fields(RunConfig)}
    for name, values in data.items():
        if name not in sections:
            raise ConfigError(f"unknown config section [{name}]")
        if not isinstance(values, Mapping):
            raise ConfigError(f"[{name}] must be a table")
        sec = getattr(cfg, name)
        known = {f.name for f in dataclasses.fields(sec)}
        for key, value in values.items():
            if key not in known:
                raise ConfigError(f"unknown key [{name}] {key}")
            setattr(sec, key, _coerce(name, key, value, getattr(sec, key)))
    cfg.chowder_config  # validates Chowder fields
    return cfg


def load_config(path: str | Path | None = None, overrides: Mapping[str, Any] | None = None) -> RunConfig:
    """Defaults < config file < ``overrides`` (dotted keys such as ``"chowder.lr"``).

    Relative paths in the [data] and [episeg] sections are resolved against
    the config file's directory.
    """
    cfg = RunConfig()
    if path is not None:
        path = Path(path)
        try:
            doc = tomllib.loads(path.read_text())
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        cfg = from_mapping(doc, cfg)
        base = path.parent
        for sec, keys in (("data", ("manifest", "cells_dir", "patch_dir", "images_dir")),
                          ("episeg", ("model", "pairs_dir")), ("run", ("out_dir",))):
            for k in keys:
                v = getattr(getattr(cfg, sec), k)
                if v and not Path(v).is_absolute():
                    setattr(getattr(cfg, sec), k, str(base / v))
    if overrides:
        nested: dict[str, dict[str, Any]] = {}
        for dotted, v in overrides.items():
            if v is None:
                continue
            sec, _, key = dotted.partition(".")
            nested.setdefault(sec, {})[key] = v
        cfg = from_mapping(nested, cfg)
    return cfg


def resolve_seed(cli_seed: int | None, cfg_seed: int | None = None) -> int:
    """--seed, then $IMILIA_SEED, then the config value, then 0."""
    if cli_seed is not None:
        return int(cli_seed)
    env = os.environ.get("IMILIA_SEED")
    if env:
        return int(env)
    return int(cfg_seed or 0)


def dump_toml(cfg: RunConfig) -> str:
    """Serialize a config back to TOML (flat tables, scalars and lists only)."""

    def val(v):
        if isinstance(v, bool):
            return "true" if v else "false"
        if isinstance(v, str):
            return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
        if isinstance(v, list):
            return "[" + ", ".join(val(x) for x in v) + "]"
        return repr(v)

    lines = []
    for name, sec in cfg.to_dict().items():
        lines.append(f"[{name}]")
        lines += [f"{k} = {val(v)}" for k, v in sec.items()]
        lines.append("")
    return "\n".join(lines)
