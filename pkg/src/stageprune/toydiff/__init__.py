"""Desk-scale pixel-space diffusion model used as the pruning substrate."""

from .checkpoint import load_checkpoint, save_checkpoint
from .data import CLASS_NAMES, ToyDataset, make_dataset
from .model import DenoiserModel, LayerInfo, ModelConfig, StageRoute
from .sampler import SamplerConfig, initial_latents, sample
from .schedule import NoiseSchedule, build_schedule, forward_noise
from .train import train

__all__ = [
    "CLASS_NAMES",
    "DenoiserModel",
    "LayerInfo",
    "ModelConfig",
    "NoiseSchedule",
    "SamplerConfig",
    "StageRoute",
    "ToyDataset",
    "build_schedule",
    "forward_noise",
    "initial_latents",
    "load_checkpoint",
    "make_dataset",
    "sample",
    "save_checkpoint",
    "train",
]
