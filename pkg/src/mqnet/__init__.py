"""Title-guided product segmentation with mutual query fusion, in pure numpy."""
from .config import RunConfig, load_config, profile_config
from .data import generate_sample, generate_split, load_manifest
from .estimator import MutualQuerySegmenter
from .metrics import MetricsReport, evaluate, iou
from .model import ModelConfig, SegModel
from .tensor import Tensor, grad_check

__version__ = "0.1.0"

__all__ = [
    "ModelConfig", "MetricsReport", "MutualQuerySegmenter", "RunConfig", "SegModel", "Tensor",
    "evaluate", "generate_sample", "generate_split", "grad_check", "iou", "load_config", "load_manifest",
    "profile_config",
]
