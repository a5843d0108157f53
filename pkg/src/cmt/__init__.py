"""Hybrid CNN-transformer (CMT) backbones in numpy: kernels, blocks, model
family, cost accounting and gradient verification."""
from .cost import count_flops, count_params
from .errors import CMTError
from .model import PRESETS, ModelSpec, ScalingParams, build, forward, load, preset, save, scale, transfer_resolution

__all__ = ["CMTError", "PRESETS", "ModelSpec", "ScalingParams", "build", "count_flops", "count_params",
           "forward", "load", "preset", "save", "scale", "transfer_resolution"]
__version__ = "0.1.0"
