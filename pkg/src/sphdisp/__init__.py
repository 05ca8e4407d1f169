"""sphdisp: representation-collapse diagnostics and sliced spherical
dispersion regularization for tiny sequence-to-sequence transformers."""

from .autodiff import RngStream, Tensor, grad_check
from .dispersion import (
    DirectionSet,
    GreatCircle,
    circle_gap_deviation,
    sample_great_circle,
    sliced_dispersion,
    subsample_rare_rows,
)
from .geometry import MetricRecord, avg_cosine, matrix_entropy, spherical_variance
from .model import ModelConfig, ModelState, init_model
from .training import TrainConfig, train_loop

__version__ = "0.1.0"

__all__ = [
    "RngStream",
    "Tensor",
    "grad_check",
    "DirectionSet",
    "GreatCircle",
    "circle_gap_deviation",
    "sample_great_circle",
    "sliced_dispersion",
    "subsample_rare_rows",
    "MetricRecord",
    "avg_cosine",
    "matrix_entropy",
    "spherical_variance",
    "ModelConfig",
    "ModelState",
    "init_model",
    "TrainConfig",
    "train_loop",
    "__version__",
]
