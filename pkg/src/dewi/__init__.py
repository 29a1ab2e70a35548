"""DeWi: a classifier trained by alternating a metric-learning step (batch-hard
triplet loss plus cross-entropy) with a Mixup step, on a small numpy autograd engine."""

from .config import RunConfig, load_config, preset
from .model import DeWiModel, ModelConfig, build_model, classify, embed, predict
from .tensor import Tensor, backward, grad_check, no_grad
from .trainer import TrainConfig, TrainerState, evaluate, fit, lr_at_epoch

__version__ = "0.1.0"

__all__ = [
    "DeWiModel", "ModelConfig", "RunConfig", "Tensor", "TrainConfig", "TrainerState",
    "backward", "build_model", "classify", "embed", "evaluate", "fit", "grad_check",
    "load_config", "lr_at_epoch", "no_grad", "predict", "preset",
]
