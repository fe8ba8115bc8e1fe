"""P300 decoding stack: autodiff core, EEG-TCFNet and baseline topologies,
signal conditioning, a synthetic session simulator and evaluation tools."""

from .architectures import TOPOLOGIES, ModelConfig, build, count_parameters, forward, predict
from .autodiff import Parameter, ShapeError, Tensor, backward, finite_diff_gradient
from .optim import AdamState, adam_step

__all__ = [
    "TOPOLOGIES", "ModelConfig", "build", "count_parameters", "forward", "predict",
    "Parameter", "ShapeError", "Tensor", "backward", "finite_diff_gradient",
    "AdamState", "adam_step",
]
__version__ = "0.1.0"
