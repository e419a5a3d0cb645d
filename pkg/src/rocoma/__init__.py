"""Robust constrained multi-agent rebalancing for electric AMoD fleets."""

from .core import CostWeights, Grid, JointState, RebalanceAction, RegionState, UncertaintyConfig
from .sim import GridCity, PerturbConfig, SimConfig
from .trainer import TrainConfig, TrainState, train

__version__ = "0.1.0"

__all__ = [
    "CostWeights", "Grid", "JointState", "RebalanceAction", "RegionState", "UncertaintyConfig",
    "GridCity", "PerturbConfig", "SimConfig", "TrainConfig", "TrainState", "train",
]
