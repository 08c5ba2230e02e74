"""Synthetic Fusion Pyramid Network detector built on a small numpy autodiff engine."""

from .autograd import ParamStore, Tensor, backward, no_grad
from .head import Detection, GroundTruthBox, gen_anchors, predict
from .pyramid import ModelConfig, SfpnModel, build_model, build_schedule, count_params

__all__ = [
    "Detection",
    "GroundTruthBox",
    "ModelConfig",
    "ParamStore",
    "SfpnModel",
    "Tensor",
    "backward",
    "build_model",
    "build_schedule",
    "count_params",
    "gen_anchors",
    "no_grad",
    "predict",
]

__version__ = "0.1.0"
