"""Adaptive token dictionary super-resolution on a small numpy autodiff engine."""
from .model import ModelConfig, build_model, count_params, forward, preset, upscale
from .train import TrainConfig, train_loop

__all__ = ["ModelConfig", "TrainConfig", "build_model", "count_params", "forward", "preset", "train_loop",
           "upscale"]
__version__ = "0.1.0"
