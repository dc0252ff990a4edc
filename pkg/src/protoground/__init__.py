"""Referring-expression grounding on synthetic shape scenes with context
disentangling and a prototype bank."""
from .config import AblationFlags, RunConfig
from .model import GroundingModel, GroundingOutput
from .pipeline import TrainedModel, evaluate, random_box_baseline, sweep, train

__all__ = [
    "AblationFlags",
    "GroundingModel",
    "GroundingOutput",
    "RunConfig",
    "TrainedModel",
    "evaluate",
    "random_box_baseline",
    "sweep",
    "train",
]
