"""Temporal knowledge graph completion by attention flow over query-dependent subgraphs."""
__version__ = "0.1.0"

from .data import DatasetBundle, TemporalKG, build_bundle, load_dataset
from .evaluate import MetricsReport, evaluate
from .model import ModelConfig, TGAP
from .train import TrainConfig, load_checkpoint, save_checkpoint, train

__all__ = [
    "DatasetBundle", "MetricsReport", "ModelConfig", "TGAP", "TemporalKG", "TrainConfig", "build_bundle",
    "evaluate", "load_checkpoint", "load_dataset", "save_checkpoint", "train",
]
