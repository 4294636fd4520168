"""Synthetic shape scenes with exact oracles for five multimodal tasks."""
from .oracle import OracleError, oracle_answer, oracle_text
from .scene import COLORS, SHAPES, SceneObject, SceneSpec, render_scene, sample_scene
from .store import DatasetError, fnv1a64, load_vocabulary, read_dataset, read_ppm, write_dataset, write_ppm
from .tasks import (
    DEFAULT_MIX,
    TASKS,
    AmbiguousSceneError,
    TaskSample,
    generate_dataset,
    make_sample,
    mixture_counts,
    parse_mix,
    task_vocabulary,
)

__all__ = [
    "COLORS",
    "DEFAULT_MIX",
    "SHAPES",
    "TASKS",
    "AmbiguousSceneError",
    "DatasetError",
    "OracleError",
    "SceneObject",
    "SceneSpec",
    "TaskSample",
    "fnv1a64",
    "generate_dataset",
    "load_vocabulary",
    "make_sample",
    "mixture_counts",
    "oracle_answer",
    "oracle_text",
    "parse_mix",
    "read_dataset",
    "read_ppm",
    "render_scene",
    "sample_scene",
    "task_vocabulary",
    "write_dataset",
    "write_ppm",
]
