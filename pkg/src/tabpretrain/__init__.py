"""Pretraining objectives for MLPs on tabular data, on a small numpy autodiff core."""

from .data import Dataset, TaskType, load, prepare, save
from .metrics import MetricKind, score
from .model import EmbeddingSpec, ModelSpec, ModelState
from .objective import Objective
from .trainer import PipelineConfig, TrainConfig, ensemble, run_efficient, run_pipeline, run_seeds

__version__ = "0.1.0"

__all__ = [
    "Dataset",
    "EmbeddingSpec",
    "MetricKind",
    "ModelSpec",
    "ModelState",
    "Objective",
    "PipelineConfig",
    "TaskType",
    "TrainConfig",
    "ensemble",
    "load",
    "prepare",
    "run_efficient",
    "run_pipeline",
    "run_seeds",
    "save",
    "score",
]
