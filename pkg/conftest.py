import json
from pathlib import Path

import numpy as np
import pytest

from sluice.config import RunConfig
from sluice.constants import OUT_DIR_ENV_VAR, THREADS_ENV_VAR
from sluice.simenv import generate_demos
from sluice.wam import train_wam


def pytest_addoption(parser):
    parser.addoption(
        "--desk-scale",
        action="store_true",
        help="also run the acceptance checks that train on the default config",
    )


def pytest_collection_modifyitems(config, items):
    if config.getoption("--desk-scale"):
        return
    skip = pytest.mark.skip(reason="needs --desk-scale")
    for item in items:
        if "desk" in item.keywords:
            item.add_marker(skip)


TINY = {
    "schema_version": 1,
    "seed": 3,
    "model": {
        "H": 8,
        "r": 2,
        "k": 4,
        "latent_dim": 8,
        "n_L": 2,
        "sem_dim": 4,
        "trunk_width": 16,
        "layers": 1,
        "heads": 2,
        "width": 8,
    },
    "train": {"batch": 8, "wam_steps": 30, "verifier_steps": 10, "log_every": 10},
    "verdata": {
        "demos_per_task": 3,
        "rollouts_per_task": 1,
        "samples_per_class": 12,
        "windows_per_episode": 3,
    },
    "exec": {
        "policies": ["fixed-4", "fixed-8", "adaptive"],
        "episodes_per_task": 2,
    },
}


def tiny_raw(**updates) -> dict:
    raw = {k: dict(v) if isinstance(v, dict) else v for k, v in TINY.items()}
    for section, vals in updates.items():
        if isinstance(vals, dict):
            vals = {**raw.get(section, {}), **vals}
        raw[section] = vals
    return raw


@pytest.fixture(autouse=True)
def _clean_env(monkeypatch):
    monkeypatch.delenv(OUT_DIR_ENV_VAR, raising=False)
    monkeypatch.delenv(THREADS_ENV_VAR, raising=False)


@pytest.fixture
def tmp_out(tmp_path) -> Path:
    return tmp_path / "runs"


@pytest.fixture
def tiny_config(tmp_out) -> RunConfig:
    return RunConfig.model_validate({**tiny_raw(), "out_dir": tmp_out.as_posix()})


@pytest.fixture
def tiny_config_file(tmp_path) -> Path:
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(tiny_raw()))
    return path


@pytest.fixture(scope="session")
def session_config(tmp_path_factory) -> RunConfig:
    out = tmp_path_factory.mktemp("session-runs")
    return RunConfig.model_validate({**tiny_raw(), "out_dir": out.as_posix()})


@pytest.fixture(scope="session")
def tiny_demos(session_config):
    conf = session_config
    return generate_demos(
        conf.env, conf.seed, 2, conf.exec.tasks, latent_dim=conf.model.latent_dim
    )


@pytest.fixture(scope="session")
def tiny_wam(tiny_demos, session_config):
    model, _ = train_wam([ep for ep in tiny_demos if ep.success], session_config)
    return model


@pytest.fixture
def rng():
    return np.random.default_rng(42)
