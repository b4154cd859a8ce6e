"""Adaptive target-precision training for multi-landmark heatmap regression.

Per-landmark policy controllers tune the width of each landmark's Gaussian
target heatmap while the regressor trains, exploring K width vectors in
parallel each outer iteration, broadcasting the best model, and freezing a
landmark's width once its validation error stabilizes.
"""

from .errors import (
    AhlError,
    ConfigurationError,
    DimensionError,
    FormatError,
    NumericalError,
)
from .heatmap import (
    LandmarkSet,
    argmax_decode,
    gaussian_heatmap,
    render_targets,
    soft_argmax_decode,
)
from .laoml import RunArtifacts, TrainConfig, run_training
from .learner import Architecture, LearnerState, build_learner, clone_weights
from .metrics import mre, pck, radial_errors
from .numkernel import AdamState, Tensor, adam_step, finite_diff_grad, tensor
from .synthdata import DatasetSplit, Sample, augment, gen_dataset, load_dataset, save_dataset

__version__ = "0.1.0"

__all__ = [
    "AdamState",
    "AhlError",
    "Architecture",
    "ConfigurationError",
    "DatasetSplit",
    "DimensionError",
    "FormatError",
    "LandmarkSet",
    "LearnerState",
    "NumericalError",
    "RunArtifacts",
    "Sample",
    "Tensor",
    "TrainConfig",
    "adam_step",
    "argmax_decode",
    "augment",
    "build_learner",
    "clone_weights",
    "finite_diff_grad",
    "gaussian_heatmap",
    "gen_dataset",
    "load_dataset",
    "mre",
    "pck",
    "radial_errors",
    "render_targets",
    "run_training",
    "save_dataset",
    "soft_argmax_decode",
    "tensor",
]
