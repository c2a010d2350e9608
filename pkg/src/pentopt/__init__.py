"""Neural topology optimization trained without pre-optimized data.

A trainable predictor network proposes density fields from boundary
conditions and a target fill degree; fixed differentiable evaluators (FEM
compliance, fill deviation, checkerboard filter, uncertainty) score each
proposal, and training minimizes the combined objective over random inputs.
A conventional SIMP optimizer is included for validation.
"""

from .domain import (BoundaryConditionSet, DensityField, InputSample, Level,
                     reshape_to_matrix, reshape_to_vector, upsample_field)
from .estimator import PenTopologyOptimizer, SimpReferenceOptimizer
from .evaluators import EvaluatorLosses, QualityCoefficients
from .predictor import ArchitectureConfig, Predictor, load_model, save_model
from .trainer import TrainingConfig, train

__all__ = [
    "ArchitectureConfig",
    "BoundaryConditionSet",
    "DensityField",
    "EvaluatorLosses",
    "InputSample",
    "Level",
    "PenTopologyOptimizer",
    "Predictor",
    "QualityCoefficients",
    "SimpReferenceOptimizer",
    "TrainingConfig",
    "load_model",
    "reshape_to_matrix",
    "reshape_to_vector",
    "save_model",
    "train",
    "upsample_field",
]

__version__ = "0.1.0"
