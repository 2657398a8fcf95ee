"""Feedback Former: a MetaFormer encoder, Semantic FPN decoder and a two-round
feedback pass for cell-image segmentation, on a small numpy autodiff engine."""

__version__ = "0.1.0"

from .config import (DataConfig, DecoderConfig, EncoderConfig, ExperimentConfig, FeedbackConfig, LossConfig,
                     ModelConfig, TrainConfig, load_config)
from .errors import ConfigError, DataError, FBFormerError, ShapeError, UsageError
from .feedback import FeedbackFormer, two_round_forward
from .tensor import Parameter, Rng, Tensor, backward

__all__ = [
    "ConfigError", "DataConfig", "DataError", "DecoderConfig", "EncoderConfig", "ExperimentConfig", "FBFormerError",
    "FeedbackConfig", "FeedbackFormer", "LossConfig", "ModelConfig", "Parameter", "Rng", "ShapeError", "Tensor",
    "TrainConfig", "UsageError", "backward", "load_config", "two_round_forward",
]
