import json
from pathlib import Path

import pytest

from sluice.config import RunConfig, validate_ablation
from sluice.constants import OUT_DIR_ENV_VAR, THREADS_ENV_VAR
from sluice.exceptions import ConfigurationError

from conftest import tiny_raw

CONFIGS = Path(__file__).parents[3] / "configs"


def _write(tmp_path, raw):
    path = tmp_path / "conf.json"
    path.write_text(json.dumps(raw))
    return path


@pytest.mark.parametrize("name", ["default.json", "long_chunk.json"])
def test_shipped_configs_load(name):
    conf = RunConfig.load(CONFIGS / name)
    assert conf.model.H in (32, 64)
    assert conf.model.r == 4
    assert conf.check_interval == 4


def test_defaults_without_file():
    conf = RunConfig.load()
    assert conf.exec.tau == 0.5
    assert conf.model.window == 8


@pytest.mark.parametrize(
    "updates",
    [
        {"model": {"H": 9}},
        {"model": {"k": 5}},
        {"model": {"k": 64}},
        {"model": {"w": 1}},
        {"model": {"width": 9}},
        {"exec": {"tau": 1.0}},
        {"exec": {"policies": ["fixed-64"]}},
        {"exec": {"policies": ["greedy"]}},
        {"exec": {"policies": ["base-3"]}},
        {"exec": {"tasks": ["fold-laundry"]}},
        {"schema_version": 2},
        {"verbose": True},
        {"train": {"momentum": 0.9}},
    ],
)
def test_invalid_configs_are_rejected(tmp_path, updates):
    with pytest.raises(ConfigurationError):
        RunConfig.load(_write(tmp_path, tiny_raw(**updates)))


def test_overrides(tmp_path, monkeypatch):
    path = _write(tmp_path, tiny_raw())
    monkeypatch.setenv(OUT_DIR_ENV_VAR, (tmp_path / "env-out").as_posix())
    monkeypatch.setenv(THREADS_ENV_VAR, "3")
    conf = RunConfig.load(path)
    assert conf.out_path == tmp_path / "env-out"
    assert conf.exec.parallel_episodes == 3
    flagged = RunConfig.load(path, seed=9, out_dir=tmp_path / "flag", parallel=2)
    assert flagged.seed == 9
    assert flagged.out_path == tmp_path / "flag"
    assert flagged.exec.parallel_episodes == 2


def test_hash_ignores_output_dir_and_threads(tmp_path):
    base = RunConfig.load(_write(tmp_path, tiny_raw()))
    moved = base.resolve(out_dir=tmp_path / "elsewhere", parallel=4)
    assert moved.config_hash() == base.config_hash()
    assert base.resolve(seed=4).config_hash() != base.config_hash()
    assert len(base.config_hash()) == 20
    snap = base.snapshot()
    assert RunConfig.model_validate(snap) == base


def test_ablation_names():
    assert validate_ablation("no_pred") == "no_pred"
    with pytest.raises(ConfigurationError):
        validate_ablation("no_brain")


def test_missing_file(tmp_path):
    with pytest.raises(ConfigurationError, match="cannot read"):
        RunConfig.load(tmp_path / "nope.json")


def test_base_horizons_get_their_own_model(tmp_path):
    raw = tiny_raw(exec={"policies": ["base-16", "fixed-8", "base-4", "base-16"]})
    conf = RunConfig.load(_write(tmp_path, raw))
    assert conf.base_horizons == [4, 16]
    short, wide = conf.with_horizon(4).model, conf.with_horizon(16).model
    assert (short.H, short.k, short.r) == (4, 4, 2)
    assert (wide.H, wide.k) == (16, conf.model.k)
    assert conf.with_horizon(16).exec == conf.exec
    assert RunConfig.load(_write(tmp_path, tiny_raw())).base_horizons == []
