"""Point-proxy transformer point cloud completion."""

from .config import ModelConfig, RunConfig, TrainConfig, model_preset, train_preset
from .errors import (CheckpointError, DegenerateInputError, DimensionError, DomainError,
                     NonFiniteLossError, ParseError, ProxyTrError, UsageError)
from .estimator import ProxyCompletion
from .metrics import chamfer, fidelity, fscore, mmd
from .model import CompletionModel
from .training import Trainer, load_model, save_model

__all__ = [
    "CheckpointError", "CompletionModel", "DegenerateInputError", "DimensionError",
    "DomainError", "ModelConfig", "NonFiniteLossError", "ParseError", "ProxyCompletion",
    "ProxyTrError", "RunConfig", "TrainConfig", "Trainer", "UsageError", "chamfer", "fidelity",
    "fscore", "load_model", "mmd", "model_preset", "save_model", "train_preset",
]
