"""Shared fixtures: the toy scene and the stage-1 pretrained backbone.

The pretrain is expensive, so it runs once per session and is content-
addressed on disk under tests/_pretrain_cache (safe to delete).
"""

from pathlib import Path

import pytest

from sclrf import harness
from sclrf.config import ExperimentConfig
from sclrf.scene import generate_scene

PRETRAIN_CACHE = Path(__file__).parent / "_pretrain_cache"


@pytest.fixture(scope="session")
def toy_config() -> ExperimentConfig:
    return ExperimentConfig()


@pytest.fixture(scope="session")
def toy_scene(toy_config):
    return generate_scene(toy_config.scene)


@pytest.fixture(scope="session")
def pretrained_field(toy_config, toy_scene):
    PRETRAIN_CACHE.mkdir(exist_ok=True)
    return harness.get_pretrained(toy_config, toy_scene,
                                  cache_dir=PRETRAIN_CACHE, log=print)


@pytest.fixture(scope="session")
def pretrain_diagnostics_path(toy_config, pretrained_field):
    from sclrf.config import config_hash

    key = config_hash(toy_config, pretrain_only=True)
    return PRETRAIN_CACHE / f"{key}.diagnostics.csv"
