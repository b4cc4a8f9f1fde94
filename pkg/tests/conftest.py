"""Shared fixtures: a reduced desk configuration and a small generated scene."""

import os
from dataclasses import replace

import pytest

from sparsevox.config import BackboneConfig, GFAConfig, LMFAConfig, PipelineConfig, preset_config
from sparsevox.io.scene_generate import SceneGenerator
from sparsevox.models.scene import SceneSample


def pytest_collection_modifyitems(config, items):
    if os.environ.get("SPARSEVOX_RUN_SLOW") == "1":
        return
    skip_slow = pytest.mark.skip(reason="set SPARSEVOX_RUN_SLOW=1 to run")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


def make_small_config(seed: int = 3) -> PipelineConfig:
    """Desk grid with narrow layers and a light scene, fast enough for finite differences."""
    desk = preset_config("desk")
    return replace(
        desk,
        backbone=BackboneConfig(channels=(4, 4, 8, 8, 8, 8), fusion_channels=8),
        lmfa=LMFAConfig(n_key=12, M=4),
        gfa=GFAConfig(n_query=6, n_kv=40, heads=2, ffn_hidden=12),
        scene=replace(desk.scene, n_objects=(2, 1, 1), ground_points=400, clutter_points=120),
        seed=seed,
    )


@pytest.fixture
def small_cfg() -> PipelineConfig:
    return make_small_config()


@pytest.fixture
def small_scene(small_cfg) -> SceneSample:
    return SceneGenerator.generate_scene(small_cfg.scene, small_cfg.seed)
