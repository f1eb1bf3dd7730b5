"""Accident-risk prediction on road graphs with multi-scale graph attention and GRUs."""

from .model import ModelConfig, ModelParams, forward, init_params
from .training import TrainConfig, evaluate, train

__version__ = "0.1.0"

__all__ = ["ModelConfig", "ModelParams", "TrainConfig", "evaluate", "forward", "init_params", "train", "__version__"]
