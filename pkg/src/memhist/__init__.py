"""Causal attribution of training-history effects on small models."""

from memhist.intervene import BranchConfig, InterventionSpec, branch_and_hold, suggest_window
from memhist.optim import half_life
from memhist.runner import Recipe, Run, build_data
from memhist.stats import paired_ate_ci, tost

__all__ = ["BranchConfig", "InterventionSpec", "Recipe", "Run", "branch_and_hold", "build_data", "half_life",
           "paired_ate_ci", "suggest_window", "tost"]
__version__ = "0.1.0"
