from .scenes import (
    SHAPES,
    COLORS,
    BACKGROUNDS,
    SIZES,
    ObjectSpec,
    Scene,
    DomainSplit,
    DOMAINS,
    sample_scene,
    SceneGenerationError,
)
from .rendering import render, render_u8
from .grammar import describe, extract_tuples, scene_tuples, LEXICON
from .dataset import DatasetConfig, DatasetRecord, build_dataset, ShapeWorldDataset

__all__ = [
    "SHAPES", "COLORS", "BACKGROUNDS", "SIZES",
    "ObjectSpec", "Scene", "DomainSplit", "DOMAINS",
    "sample_scene", "SceneGenerationError",
    "render", "render_u8",
    "describe", "extract_tuples", "scene_tuples", "LEXICON",
    "DatasetConfig", "DatasetRecord", "build_dataset", "ShapeWorldDataset",
]
