"""Part-aware vision transformer for object re-identification, built on a
small reverse-mode autodiff library over numpy."""

from .config import RunConfig, ValidationError, load_config
from .losses import LossWeights, total_loss
from .metrics import EvalReport, cmc_map, fuse
from .model import FeatureSet, ModelConfig, PartFormer, model_forward
from .tensor import Tensor, grad_check, no_grad

__all__ = [
    "EvalReport",
    "FeatureSet",
    "LossWeights",
    "ModelConfig",
    "PartFormer",
    "RunConfig",
    "Tensor",
    "ValidationError",
    "cmc_map",
    "fuse",
    "grad_check",
    "load_config",
    "model_forward",
    "no_grad",
    "total_loss",
]

__version__ = "0.1.0"
