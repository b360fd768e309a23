"""Simplicity-bias laboratory: linear attention on in-context regression
trained with GD and SAM, reduced ODEs, and loss-trajectory upsampling."""

from .attention import ModelParams, GradientSet, population_gradients, population_loss, hessian_blocks
from .optimizers import OptimizerConfig, TrainingTrace, train, init_params
from .spectra import CovarianceSpec, TaskBatch, geometric_spectrum, make_spectrum, sample_tasks

__all__ = [
    "CovarianceSpec",
    "GradientSet",
    "ModelParams",
    "OptimizerConfig",
    "TaskBatch",
    "TrainingTrace",
    "geometric_spectrum",
    "hessian_blocks",
    "init_params",
    "make_spectrum",
    "population_gradients",
    "population_loss",
    "sample_tasks",
    "train",
]
__version__ = "0.1.0"
