"""Targeted maximum likelihood estimation of the average treatment effect,
with an internal Super Learner ensemble and a Monte Carlo study harness."""

from .dgm import Dataset, ScenarioConfig, SCENARIO_GRID, simulate_dataset
from .rng import RngState, derive_substream
from .tmle import TMLEResult, run_estimator

__all__ = [
    "Dataset",
    "RngState",
    "SCENARIO_GRID",
    "ScenarioConfig",
    "TMLEResult",
    "derive_substream",
    "run_estimator",
    "simulate_dataset",
]
