"""Configuration presets and the flat config file loader."""

from sparsevox.config.loader import load_config, parse_config_text
from sparsevox.config.pipeline import (
    PRESETS,
    BackboneConfig,
    EvalConfig,
    GFAConfig,
    LMFAConfig,
    PipelineConfig,
    PostprocessConfig,
    TrainConfig,
    VoxelGridConfig,
    nuscenes_scene_spec,
    preset_config,
    with_seed,
)

__all__ = [
    "PRESETS",
    "BackboneConfig",
    "EvalConfig",
    "GFAConfig",
    "LMFAConfig",
    "PipelineConfig",
    "PostprocessConfig",
    "TrainConfig",
    "VoxelGridConfig",
    "load_config",
    "nuscenes_scene_spec",
    "parse_config_text",
    "preset_config",
    "with_seed",
]
