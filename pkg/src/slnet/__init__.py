"""Lightweight hierarchical point-cloud backbone with a deployability harness."""

from .backbone import ModelConfig, SLNet, build_model
from .estimator import NapeFeaturizer, PointCloudClassifier
from .geom import PointCloud
from .nape import NapeConfig, nape_embed
from .netscore import (BenchConfig, EfficiencyRecord, count_params,
                       estimate_flops, measure_latency, measure_peak_memory,
                       netscore, spearman)
from .tensor import Param, Tape, Tensor, backward
from .train import LossConfig, OptimConfig, train_classifier

__version__ = "0.1.0"

__all__ = [
    "BenchConfig",
    "EfficiencyRecord",
    "LossConfig",
    "ModelConfig",
    "NapeConfig",
    "NapeFeaturizer",
    "OptimConfig",
    "Param",
    "PointCloud",
    "PointCloudClassifier",
    "SLNet",
    "Tape",
    "Tensor",
    "backward",
    "build_model",
    "count_params",
    "estimate_flops",
    "measure_latency",
    "measure_peak_memory",
    "nape_embed",
    "netscore",
    "spearman",
    "train_classifier",
]
