import pytest

from imilia import config
from imilia.config import ConfigError, RunConfig


def test_defaults():
    cfg = config.load_config()
    assert cfg.chowder.K == 5 and cfg.chowder.r == 25 and cfg.chowder.mlp_hidden == [128, 64]
    assert cfg.extremes.n == 1000 and cfg.episeg.tile_size == 1022


def test_unknown_keys_rejected(tmp_path):
    p = tmp_path / "c.toml"
    p.write_text("[chowder]\nR = 3\n")
    with pytest.raises(ConfigError, match="unknown key"):
        config.load_config(p)
    p.write_text("[chowdr]\nr = 3\n")
    with pytest.raises(ConfigError, match="section"):
        config.load_config(p)
    p.write_text("[chowder]\nr = 'many'\n")
    with pytest.raises(ConfigError):
        config.load_config(p)


def test_file_then_overrides(tmp_path):
    p = tmp_path / "c.toml"
    p.write_text('[chowder]\nr = 3\nlr = 0.1\n[data]\nmanifest = "m.csv"\n')
    cfg = config.load_config(p, {"chowder.lr": "0.5", "chowder.K": None})
    assert (cfg.chowder.r, cfg.chowder.lr, cfg.chowder.K) == (3, 0.5, 5)
    assert cfg.data.manifest == str(tmp_path / "m.csv")


def test_seed_precedence(monkeypatch):
    monkeypatch.delenv("IMILIA_SEED", raising=False)
    assert config.resolve_seed(None, 4) == 4
    assert config.resolve_seed(None, None) == 0
    monkeypatch.setenv("IMILIA_SEED", "9")
    assert config.resolve_seed(None, 4) == 9
    assert config.resolve_seed(2, 4) == 2


def test_dump_round_trip(tmp_path):
    cfg = RunConfig()
    cfg.chowder.mlp_dropout = [0.25, 0.0]
    cfg.episeg.C_grid = [1e-3, 0.1]
    cfg.data.train_cohorts = ["A", 'q"x']
    (tmp_path / "c.toml").write_text(config.dump_toml(cfg))
    back = config.load_config(tmp_path / "c.toml")
    back.run.out_dir = cfg.run.out_dir
    assert back.to_dict() == cfg.to_dict()
