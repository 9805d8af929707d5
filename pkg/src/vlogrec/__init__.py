"""Vlogger-augmented graph neural network recommendation for micro-videos.

The pipeline turns behavior logs into a user/video/vlogger graph, augments it
with meta-path walks, propagates embeddings over two views and trains them
with a multi-task ranking objective.
"""
from .data import Dataset, PositiveRuleConfig, generate_synthetic, preprocess
from .evaluation import MetricsReport, evaluate, recommend, run_ablation_suite
from .graph import MetaPathConfig, TripartiteGraph, augment, build_graph
from .model import TrainConfig, lightgcn_config
from .objective import LossWeights
from .training import load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "Dataset",
    "LossWeights",
    "MetaPathConfig",
    "MetricsReport",
    "PositiveRuleConfig",
    "TrainConfig",
    "TripartiteGraph",
    "augment",
    "build_graph",
    "evaluate",
    "generate_synthetic",
    "lightgcn_config",
    "load_checkpoint",
    "preprocess",
    "recommend",
    "run_ablation_suite",
    "save_checkpoint",
    "train",
]
