"""Joint training of an energy-based model, a generator and an inference model
through a divergence triangle objective, with landscape and occlusion tools."""

__version__ = "0.1.0"

from .autodiff import Tensor, check_gradients, no_grad
from .data import DataSet, Synthetic2D, load_idx, sample_synthetic
from .landscape import LandscapeConfig, map_landscape
from .models import ModelConfig, build_models
from .trainer import TrainConfig, train

__all__ = [
    "DataSet",
    "LandscapeConfig",
    "ModelConfig",
    "Synthetic2D",
    "Tensor",
    "TrainConfig",
    "build_models",
    "check_gradients",
    "load_idx",
    "map_landscape",
    "no_grad",
    "sample_synthetic",
    "train",
]
