"""Deformable 3D registration with several similarity metrics optimized jointly."""

__version__ = "0.1.0"

from .core import (DisplacementField, Landmark, LandmarkSet, LossSpec, OptimConfig, Volume,
                   normalize, zero_field)
from .errors import (FormatError, MmregError, OptimizationError, ShapeError, ValidationError)
from .evaluation import compare, hit_rate, paired_t_test, tre
from .loss import combined_loss, combined_loss_grad, diffusion, lncc, mse
from .optim import adam_step, instance_optimize, register, upsample_field
from .phantom import PhantomSpec, generate
from .sampling import sample, sample_gradient, warp, warp_point

__all__ = [
    "DisplacementField", "Landmark", "LandmarkSet", "LossSpec", "OptimConfig", "Volume",
    "normalize", "zero_field", "FormatError", "MmregError", "OptimizationError", "ShapeError",
    "ValidationError", "compare", "hit_rate", "paired_t_test", "tre", "combined_loss",
    "combined_loss_grad", "diffusion", "lncc", "mse", "adam_step", "instance_optimize", "register",
    "upsample_field", "PhantomSpec", "generate", "sample", "sample_gradient", "warp", "warp_point",
]
