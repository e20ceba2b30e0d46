"""Transformer-based data association and query enhancement for 3D multi-object tracking.

A self-contained numpy reproduction: autodiff core, attention blocks, association and
query-enhancement modules, a synthetic bird's-eye-view world, staged training and
CLEAR-MOT / AMOTA evaluation.
"""

from .model import ModelConfig, MotionTrack
from .motmetrics import compute_amota
from .pipeline import run_sequence, step
from .simworld import Scenario, ScenarioConfig, generate_scenario
from .train import TrainConfig, train_stage

__all__ = ["ModelConfig", "MotionTrack", "compute_amota", "run_sequence", "step", "Scenario",
           "ScenarioConfig", "generate_scenario", "TrainConfig", "train_stage"]
__version__ = "0.1.0"
