"""From-scratch differentiable tensors and a chest X-ray lung-disease toolkit."""

from .tensor import Tensor, no_grad
from .metrics import MetricRow, compute_metrics, confusion, f_beta
from .zoo import Model, ZOO, get_model_spec, param_count, spec_digest
from .train import (
    PredictResult,
    RunReport,
    TrainConfig,
    compare,
    evaluate_checkpoint,
    fit,
    predict_image,
    train,
)
from .checkpoint import load_model, read_checkpoint, restore_model, save_checkpoint

__version__ = "0.1.0"

__all__ = [
    "Tensor", "no_grad",
    "MetricRow", "compute_metrics", "confusion", "f_beta",
    "Model", "ZOO", "get_model_spec", "param_count", "spec_digest",
    "PredictResult", "RunReport", "TrainConfig",
    "compare", "evaluate_checkpoint", "fit", "predict_image", "train",
    "load_model", "read_checkpoint", "restore_model", "save_checkpoint",
    "__version__",
]
