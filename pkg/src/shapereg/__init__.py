"""Landmark shape regression from images with point-cloud networks.

A from-scratch numpy autodiff core drives a small CNN encoder, PointNet and
Point Transformer networks, three regression heads, a pixel-classification
baseline, and the training/evaluation/ablation tooling around them.
"""

from .data import Dataset, SyntheticConfig, generate_synthetic, load_dataset, save_dataset
from .experiment import ExperimentConfig, RunReport, ablate, evaluate, train
from .geometry import Shape

__all__ = [
    "Dataset",
    "ExperimentConfig",
    "RunReport",
    "Shape",
    "SyntheticConfig",
    "ablate",
    "evaluate",
    "generate_synthetic",
    "load_dataset",
    "save_dataset",
    "train",
]

__version__ = "0.1.0"
