"""Weakly supervised segmentation from tight bounding boxes.

Multiple-instance bags built from box crossing lines, focal and pairwise
losses with smooth maximum bag predictions, a small autodiff engine to train
against them, and a synthetic-data harness to measure Dice.
"""

from .boxbags import AngleSet, Bag, BoxLabel
from .milloss import LossConfig
from .trainer import ExperimentConfig, OptimConfig

__all__ = ["AngleSet", "Bag", "BoxLabel", "ExperimentConfig", "LossConfig", "OptimConfig"]
__version__ = "0.1.0"
