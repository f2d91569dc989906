"""riverseg: binary water segmentation with a hierarchical transformer
encoder, all-MLP decoder and low-rank adapters, built on a small numpy
autograd engine."""

from . import checkpoint, config, data, experiment, lora, metrics, model, overlay, synth, tensor, train
from .config import RunConfig
from .metrics import ConfusionMatrix, MetricsReport, compute_metrics, evaluate_dataset
from .model import ModelConfig, SegFormer, named_config, param_count
from .tensor import Tensor

__version__ = "0.1.0"

__all__ = [
    "ConfusionMatrix", "MetricsReport", "ModelConfig", "RunConfig", "SegFormer",
    "Tensor", "checkpoint", "compute_metrics", "config", "data",
    "evaluate_dataset", "experiment", "lora", "metrics", "model",
    "named_config", "overlay", "param_count", "synth", "tensor", "train",
]
