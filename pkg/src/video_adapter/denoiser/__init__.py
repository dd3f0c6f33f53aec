"""Conditional denoisers: the frozen prior and the trainable adapter share this family."""

from .arch import ArchitectureDescriptor, Denoiser, param_count
from .checkpoint import (DenoiserCheckpoint, energy_value, init_denoiser, load_checkpoint, predict_eps,
                         save_checkpoint)
from .conditioning import ConditionSpec, make_first_frame_condition, sobel_edges
from .train import TrainConfig, TrainingArrays, TrainingDivergedError, train_denoiser

__all__ = [
    "ArchitectureDescriptor", "ConditionSpec", "Denoiser", "DenoiserCheckpoint", "TrainConfig",
    "TrainingArrays", "TrainingDivergedError", "energy_value", "init_denoiser", "load_checkpoint",
    "make_first_frame_condition", "param_count", "predict_eps", "save_checkpoint", "sobel_edges",
    "train_denoiser",
]
